use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ForwardMode, SizePreset, Surrogate, SurrogateError, TimeAxis};
use crate::euler::{Dataset, Split, Trajectory};
use crate::nn::{
    adamw_step, clip_grad_norm, reduce_grads, AdamWConfig, GradBuffer, LrSchedule, NnError,
};
use crate::par::{self, Exec};
use crate::rng::{derive_seed, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Exponent of the per-element error in the loss.
    pub loss_power: f64,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub exec: Exec,
}

impl TrainConfig {
    pub fn pretrain(size: SizePreset) -> Self {
        match size {
            SizePreset::Desk => Self {
                lr: 1e-3,
                weight_decay: 1e-7,
                batch_size: 16,
                epochs: 30,
                loss_power: 2.0,
                seed: 0,
                schedule: LrSchedule::Cosine {
                    warmup_steps: 50,
                    final_factor: 0.05,
                },
                grad_clip: Some(1.0),
                exec: Exec::Parallel,
            },
            SizePreset::Paper => Self {
                lr: 5e-6,
                weight_decay: 1e-7,
                batch_size: 32,
                epochs: 100,
                loss_power: 2.0,
                seed: 0,
                schedule: LrSchedule::Constant,
                grad_clip: None,
                exec: Exec::Parallel,
            },
        }
    }

    pub fn finetune(size: SizePreset) -> Self {
        match size {
            SizePreset::Desk => Self {
                lr: 3e-4,
                weight_decay: 0.01,
                epochs: 40,
                ..Self::pretrain(SizePreset::Desk)
            },
            SizePreset::Paper => Self {
                lr: 1e-5,
                weight_decay: 0.01,
                ..Self::pretrain(SizePreset::Paper)
            },
        }
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.loss_power < 1.0 {
            return bad("loss exponent must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        Ok(())
    }

    fn optimizer(&self, factor: f64) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr * factor,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train_pairs: usize,
    pub n_val_pairs: usize,
    pub init_val_mse: f64,
    pub best_val_mse: f64,
    /// 0 means the initial parameters were never improved on.
    pub best_epoch: usize,
    pub steps: u64,
    pub epochs: Vec<EpochStats>,
    pub seconds: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] SurrogateError),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: u64,
        reason: String,
        last_good: Box<Surrogate>,
    },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Consecutive snapshot pairs `(u_k, u_{k+1})` in normalized units.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    snapshots: Vec<Vec<Vec<f64>>>,
    t_norm: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn new<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>, model: &Surrogate) -> Self {
        let mut set = PairSet::default();
        let time = model.time_axis();
        for (ti, tr) in trajs.into_iter().enumerate() {
            set.snapshots.push(
                tr.snapshots()
                    .iter()
                    .map(|s| model.normalization().normalize(s))
                    .collect(),
            );
            set.t_norm
                .push(tr.times().iter().map(|&t| time.t_norm(t)).collect());
            set.pairs.extend((0..tr.len() - 1).map(|k| (ti, k)));
        }
        set
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn input(&self, model: &Surrogate, i: usize) -> Vec<f64> {
        let (ti, k) = self.pairs[i];
        model.input(self.snapshots[ti][k].clone(), self.t_norm[ti][k])
    }

    fn target(&self, i: usize) -> &[f64] {
        let (ti, k) = self.pairs[i];
        &self.snapshots[ti][k + 1]
    }

    /// Mean one-step MSE with dropout off.
    pub fn mse(&self, model: &Surrogate, exec: Exec) -> Result<f64, SurrogateError> {
        if self.is_empty() {
            return Ok(f64::NAN);
        }
        let errs = par::try_map_range(exec, self.len(), |i| {
            let out = model.vit().infer(
                model.params(),
                &self.input(model, i),
                ForwardMode::DeterministicInfer.dropout(),
                &mut RngStream::new(0, 0),
            )?;
            Ok::<_, SurrogateError>(mean_sq(&out, self.target(i)))
        })?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Loss `mean |e|^p` and its gradient with respect to the prediction.
fn power_loss(pred: &[f64], target: &[f64], p: f64) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let e = a - b;
            if p == 2.0 {
                loss += e * e;
                2.0 * e / n
            } else {
                loss += e.abs().powf(p);
                p * e.abs().powf(p - 1.0) * e.signum() / n
            }
        })
        .collect();
    (loss / n, grad)
}

fn diverged(epoch: usize, step: u64, reason: impl ToString, last_good: &Surrogate) -> TrainError {
    TrainError::Diverged {
        epoch,
        step,
        reason: reason.to_string(),
        last_good: Box::new(last_good.clone()),
    }
}

/// Minimizes the one-step loss over `train` and leaves the parameters with
/// the best validation MSE in `model` (the final ones if `val` is empty).
pub fn fit(
    model: &mut Surrogate,
    train: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SurrogateError::Config("no training pairs".into()).into());
    }
    let started = Instant::now();
    let init_val = val.mse(model, cfg.exec)?;
    let mut report = TrainReport {
        n_train_pairs: train.len(),
        n_val_pairs: val.len(),
        init_val_mse: init_val,
        best_val_mse: init_val,
        ..TrainReport::default()
    };
    let mut best = model.params().clone();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (batches_per_epoch * cfg.epochs) as u64;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngStream::new(derive_seed(cfg.seed, &[epoch as u64]), 0x0D0E).shuffle(&mut order);
        let dropout_seed = derive_seed(cfg.seed, &[epoch as u64, 0xD120]);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            let m: &Surrogate = model;
            let per_sample = par::map_range(cfg.exec, batch.len(), |j| {
                let i = batch[j];
                let mut rng = RngStream::new(dropout_seed, i as u64);
                let (out, cache) = m.vit().forward(
                    m.params(),
                    &train.input(m, i),
                    ForwardMode::Train.dropout(),
                    &mut rng,
                )?;
                let (loss, dout) = power_loss(&out, train.target(i), cfg.loss_power);
                let mut g: GradBuffer = m.params().grad_buffer();
                m.vit().backward(m.params(), &cache, &dout, &mut g)?;
                Ok::<_, NnError>((loss, g))
            });
            let mut losses = Vec::with_capacity(batch.len());
            let mut grads = Vec::with_capacity(batch.len());
            for r in per_sample {
                match r {
                    Ok((l, g)) => {
                        losses.push(l);
                        grads.push(g);
                    }
                    Err(e) => {
                        let last = with_params(model, &best);
                        return Err(diverged(epoch, step, e, &last));
                    }
                }
            }
            let batch_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            if !batch_loss.is_finite() {
                let last = with_params(model, &best);
                return Err(diverged(epoch, step, "non-finite loss", &last));
            }
            loss_sum += losses.iter().sum::<f64>();
            let sum = reduce_grads(grads).expect("non-empty batch");
            model
                .params_mut()
                .set_grads(&sum, 1.0 / batch.len() as f64)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(model.params_mut(), c);
            }
            let factor = cfg.schedule.factor(step, total_steps);
            lr = cfg.lr * factor;
            if let Err(e) = adamw_step(model.params_mut(), &cfg.optimizer(factor)) {
                let last = with_params(model, &best);
                return Err(diverged(epoch, step, e, &last));
            }
            step += 1;
        }
        let val_mse = if val.is_empty() {
            f64::NAN
        } else {
            val.mse(model, cfg.exec)?
        };
        if !val.is_empty() && !val_mse.is_finite() {
            let last = with_params(model, &best);
            return Err(diverged(epoch, step, "non-finite validation error", &last));
        }
        if val.is_empty() || val_mse < report.best_val_mse || !report.best_val_mse.is_finite() {
            report.best_val_mse = val_mse;
            report.best_epoch = epoch;
            best = model.params().clone();
        }
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mse,
            lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }
    *model.params_mut() = best;
    report.steps = step;
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn with_params(model: &Surrogate, params: &crate::nn::ParamStore) -> Surrogate {
    let mut m = model.clone();
    *m.params_mut() = params.clone();
    m
}

fn time_axis(ds: &Dataset) -> TimeAxis {
    let times = ds
        .trajectories
        .first()
        .map(|t| t.times())
        .unwrap_or_default();
    match (times.first(), times.get(1), times.last()) {
        (Some(a), Some(b), Some(last)) => TimeAxis {
            dt: b - a,
            t_final: *last,
        },
        _ => TimeAxis::default(),
    }
}

/// Trains a fresh model on the training split, selecting on the
/// validation split.
pub fn train(
    ds: &Dataset,
    model_cfg: &super::ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Surrogate, TrainReport), TrainError> {
    let g = ds.grid();
    if g.nx != model_cfg.width || g.ny != model_cfg.height {
        return Err(SurrogateError::Config(format!(
            "dataset grid {}x{} does not match model grid {}x{}",
            g.nx, g.ny, model_cfg.width, model_cfg.height
        ))
        .into());
    }
    let train_trajs = ds.split(Split::Train);
    if train_trajs.is_empty() {
        return Err(SurrogateError::Config("dataset has no training trajectories".into()).into());
    }
    let mut model = Surrogate::new(
        model_cfg.clone(),
        ds.normalization,
        time_axis(ds),
        derive_seed(cfg.seed, &[0x1417]),
    )?;
    let train = PairSet::new(train_trajs, &model);
    let val = PairSet::new(ds.split(Split::Val), &model);
    let report = fit(&mut model, &train, &val, cfg)?;
    Ok((model, report))
}

/// Dataset indices of the `n_traj` training trajectories that
/// [`finetune`] uses with `seed`, in increasing order.
pub fn finetune_subset(
    ds: &Dataset,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<usize>, SurrogateError> {
    let mut idx = ds.split_indices(Split::Train);
    if n_traj > idx.len() {
        return Err(SurrogateError::Config(format!(
            "requested {n_traj} finetuning trajectories, only {} available",
            idx.len()
        )));
    }
    RngStream::new(derive_seed(seed, &[0xF17E]), 0).shuffle(&mut idx);
    idx.truncate(n_traj);
    idx.sort_unstable();
    Ok(idx)
}

/// Continues training `pretrained` on `n_traj` training trajectories of
/// `ds` drawn with `cfg.seed`. Optimizer state starts fresh; normalization
/// stays that of the pretrained model.
pub fn finetune(
    pretrained: &Surrogate,
    ds: &Dataset,
    n_traj: usize,
    cfg: &TrainConfig,
) -> Result<(Surrogate, TrainReport), TrainError> {
    let mut model = pretrained.clone();
    if n_traj == 0 {
        return Ok((model, TrainReport::default()));
    }
    let idx = finetune_subset(ds, n_traj, cfg.seed)?;
    model.params_mut().reset_optimizer();
    let train = PairSet::new(idx.iter().map(|&i| &ds.trajectories[i]), &model);
    let val = PairSet::new(ds.split(Split::Val), &model);
    let report = fit(&mut model, &train, &val, cfg)?;
    Ok((model, report))
}
