use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::triplet::{triplet_loss_grad, ScoreOrientation, TripletRecord};
use super::{RewardError, RewardScore};
use crate::euler::{Normalization, Snapshot};
use crate::nn::{
    self, adamw_step, clip_grad_norm, reduce_grads, AdamWConfig, DropoutMode, Head, LrSchedule,
    NnError, ParamStore, Vit, VitConfig,
};
use crate::par::{self, Exec};
use crate::rng::{derive_seed, RngStream};
use crate::surrogate::{with_time_channel, ModelConfig, TimeAxis};

pub const PRM_KIND: &str = "prm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrmTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a better held-out ranking accuracy before stopping.
    pub patience: usize,
    /// Fraction of triplets held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for PrmTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 30,
            patience: 8,
            val_fraction: 0.2,
            seed: 0,
            schedule: LrSchedule::Constant,
            grad_clip: Some(1.0),
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrmConfig {
    /// Same family as the surrogate; the PRM sees two snapshots, so its
    /// input has twice `backbone.in_channels` channels.
    pub backbone: ModelConfig,
    pub alpha: f64,
    /// Candidates sampled per pair when building triplets.
    pub k: usize,
    #[serde(default)]
    pub orientation: ScoreOrientation,
    #[serde(default)]
    pub max_trajectories: Option<usize>,
    pub train: PrmTrainConfig,
}

impl PrmConfig {
    pub fn new(backbone: ModelConfig) -> Self {
        Self {
            backbone,
            alpha: 0.1,
            k: 100,
            orientation: ScoreOrientation::HigherIsBetter,
            max_trajectories: None,
            train: PrmTrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.alpha > 0.0) {
            return Err(RewardError::InvalidInput(format!(
                "margin {} must be positive",
                self.alpha
            )));
        }
        if self.k < 3 {
            return Err(RewardError::InvalidInput(format!(
                "K = {} must be at least 3",
                self.k
            )));
        }
        if !(self.train.lr > 0.0) || self.train.batch_size == 0 {
            return Err(RewardError::InvalidInput(
                "PRM learning rate and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.train.val_fraction) {
            return Err(RewardError::InvalidInput(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        self.backbone.validate()?;
        Ok(())
    }

    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            in_channels: 2 * self.backbone.in_channels,
            head: Head::Scalar,
            ..self.backbone.vit_config()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PrmMeta {
    normalization: Normalization,
    time: TimeAxis,
    init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

/// Scalar scorer of a transition `(u_t, candidate)`.
#[derive(Clone, Debug)]
pub struct Prm {
    cfg: PrmConfig,
    vit: Vit,
    params: ParamStore,
    norm: Normalization,
    time: TimeAxis,
    init_seed: u64,
}

impl Prm {
    pub fn new(
        cfg: PrmConfig,
        norm: Normalization,
        time: TimeAxis,
        seed: u64,
    ) -> Result<Self, RewardError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let vit = Vit::new(
            cfg.vit_config(),
            &mut params,
            "",
            &mut RngStream::new(seed, 0x9A),
        )?;
        Ok(Self {
            cfg,
            vit,
            params,
            norm,
            time,
            init_seed: seed,
        })
    }

    pub fn config(&self) -> &PrmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn input(&self, u_t: &Snapshot, cand: &Snapshot) -> Result<Vec<f64>, RewardError> {
        let (h, w) = (self.cfg.backbone.height, self.cfg.backbone.width);
        for s in [u_t, cand] {
            if s.grid().nx != w || s.grid().ny != h {
                return Err(RewardError::GridMismatch);
            }
        }
        let cells = h * w;
        let time = self.cfg.backbone.time_channel();
        let mut x = with_time_channel(
            self.norm.normalize(u_t),
            cells,
            self.time.t_norm(u_t.t()),
            time,
        );
        x.extend(with_time_channel(
            self.norm.normalize(cand),
            cells,
            self.time.t_norm(cand.t()),
            time,
        ));
        Ok(x)
    }

    fn orient(&self, raw: f64) -> f64 {
        match self.cfg.orientation {
            ScoreOrientation::HigherIsBetter => raw,
            ScoreOrientation::LowerIsBetter => -raw,
        }
    }

    /// Network output with dropout off.
    pub fn raw_score(&self, u_t: &Snapshot, cand: &Snapshot) -> Result<f64, RewardError> {
        let x = self.input(u_t, cand)?;
        Ok(self.vit.infer(
            &self.params,
            &x,
            DropoutMode::Off,
            &mut RngStream::new(0, 0),
        )?[0])
    }

    /// Deterministic score; higher means a better candidate under either
    /// orientation.
    pub fn score(&self, u_t: &Snapshot, cand: &Snapshot) -> Result<f64, RewardError> {
        Ok(self.orient(self.raw_score(u_t, cand)?))
    }

    /// Fraction of triplets whose best candidate outscores the worst.
    pub fn ranking_accuracy(
        &self,
        triplets: &[TripletRecord],
        exec: Exec,
    ) -> Result<f64, RewardError> {
        if triplets.is_empty() {
            return Ok(f64::NAN);
        }
        let hits = par::try_map_slice(exec, triplets, |t| {
            Ok::<_, RewardError>(self.score(&t.u_t, &t.best)? > self.score(&t.u_t, &t.worst)?)
        })?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / triplets.len() as f64)
    }

    /// Mean triplet loss with dropout off.
    pub fn mean_loss(&self, triplets: &[TripletRecord], exec: Exec) -> Result<f64, RewardError> {
        if triplets.is_empty() {
            return Ok(f64::NAN);
        }
        let losses = par::try_map_slice(exec, triplets, |t| {
            let s = [
                self.raw_score(&t.u_t, &t.best)?,
                self.raw_score(&t.u_t, &t.median)?,
                self.raw_score(&t.u_t, &t.worst)?,
            ];
            let (r_min, r_med, r_max) = self.hinge_order(s);
            Ok::<_, RewardError>(triplet_loss_grad(r_min, r_med, r_max, self.cfg.alpha).0)
        })?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Maps raw scores of (best, median, worst) to the loss arguments.
    fn hinge_order(&self, s: [f64; 3]) -> (f64, f64, f64) {
        match self.cfg.orientation {
            ScoreOrientation::HigherIsBetter => (s[2], s[1], s[0]),
            ScoreOrientation::LowerIsBetter => (s[0], s[1], s[2]),
        }
    }

    pub fn save(&self, path: &Path, config_digest: Option<&str>) -> Result<(), RewardError> {
        let meta = PrmMeta {
            normalization: self.norm,
            time: self.time,
            init_seed: self.init_seed,
            config_digest: config_digest.map(str::to_owned),
        };
        nn::save_checkpoint(
            path,
            PRM_KIND,
            serde_json::to_value(&self.cfg).expect("config serializes"),
            vec![self.init_seed, self.cfg.train.seed],
            &self.params,
            serde_json::to_value(&meta).expect("metadata serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let (header, store) = nn::load_checkpoint(path)?;
        if header.model_kind != PRM_KIND {
            return Err(RewardError::InvalidInput(format!(
                "checkpoint holds a '{}' model, expected '{PRM_KIND}'",
                header.model_kind
            )));
        }
        let bad =
            |e: serde_json::Error| RewardError::InvalidInput(format!("checkpoint header: {e}"));
        let cfg: PrmConfig = serde_json::from_value(header.config).map_err(bad)?;
        let meta: PrmMeta = serde_json::from_value(header.extra).map_err(bad)?;
        let mut prm = Self::new(cfg, meta.normalization, meta.time, meta.init_seed)?;
        prm.params.copy_values_from(&store)?;
        prm.params = store;
        Ok(prm)
    }
}

pub fn prm_score(prm: &Prm, u_t: &Snapshot, cand: &Snapshot) -> Result<RewardScore, RewardError> {
    Ok(RewardScore {
        value: prm.score(u_t, cand)?,
        model_id: PRM_KIND.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrmReport {
    pub n_train: usize,
    pub n_val: usize,
    pub init_train_loss: f64,
    pub final_train_loss: f64,
    pub init_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs: Vec<PrmEpoch>,
    pub seconds: f64,
}

fn diverged(epoch: usize, reason: impl ToString) -> RewardError {
    RewardError::Diverged {
        epoch,
        reason: reason.to_string(),
    }
}

/// Trains a PRM on triplets with the margin loss; model selection by
/// ranking accuracy on a held-out share of the triplets, ties broken by
/// lower held-out loss.
pub fn train_prm(
    triplets: &[TripletRecord],
    cfg: &PrmConfig,
    norm: &Normalization,
    time: TimeAxis,
) -> Result<(Prm, PrmReport), RewardError> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(RewardError::InvalidInput("no triplets to train on".into()));
    }
    let started = Instant::now();
    let tc = &cfg.train;
    let mut prm = Prm::new(cfg.clone(), *norm, time, derive_seed(tc.seed, &[0x9A]))?;

    let mut order: Vec<usize> = (0..triplets.len()).collect();
    RngStream::new(derive_seed(tc.seed, &[0x5B]), 0).shuffle(&mut order);
    let mut n_val = (tc.val_fraction * triplets.len() as f64).round() as usize;
    if triplets.len() >= 2 && tc.val_fraction > 0.0 {
        n_val = n_val.clamp(1, triplets.len() - 1);
    }
    let val: Vec<TripletRecord> = order[..n_val]
        .iter()
        .map(|&i| triplets[i].clone())
        .collect();
    let train: Vec<&TripletRecord> = order[n_val..].iter().map(|&i| &triplets[i]).collect();

    let train_owned: Vec<TripletRecord> = train.iter().map(|t| (*t).clone()).collect();
    let init_train_loss = prm.mean_loss(&train_owned, tc.exec)?;
    drop(train_owned);
    let init_val_accuracy = prm.ranking_accuracy(&val, tc.exec)?;
    let mut report = PrmReport {
        n_train: train.len(),
        n_val,
        init_train_loss,
        init_val_accuracy,
        best_val_accuracy: init_val_accuracy,
        ..PrmReport::default()
    };
    let mut best_key = (init_val_accuracy, -prm.mean_loss(&val, tc.exec)?);
    let mut best = prm.params.clone();
    let mut since_best = 0;
    let total_steps = (train.len().div_ceil(tc.batch_size) * tc.epochs) as u64;
    let mut step = 0u64;

    for epoch in 1..=tc.epochs {
        let t0 = Instant::now();
        let mut idx: Vec<usize> = (0..train.len()).collect();
        RngStream::new(derive_seed(tc.seed, &[epoch as u64]), 0x0D0E).shuffle(&mut idx);
        let drop_seed = derive_seed(tc.seed, &[epoch as u64, 0xD120]);
        let mut loss_sum = 0.0;
        for batch in idx.chunks(tc.batch_size) {
            let p: &Prm = &prm;
            let per = par::try_map_range(tc.exec, batch.len(), |j| {
                let t = train[batch[j]];
                let mut rng = RngStream::new(drop_seed, batch[j] as u64);
                let mut outs = Vec::with_capacity(3);
                for cand in [&t.best, &t.median, &t.worst] {
                    let x = p.input(&t.u_t, cand)?;
                    outs.push(p.vit.forward(&p.params, &x, DropoutMode::On, &mut rng)?);
                }
                let s = [outs[0].0[0], outs[1].0[0], outs[2].0[0]];
                let (r_min, r_med, r_max) = p.hinge_order(s);
                let (loss, g) = triplet_loss_grad(r_min, r_med, r_max, cfg.alpha);
                // Gradient w.r.t. raw (best, median, worst).
                let d = match cfg.orientation {
                    ScoreOrientation::HigherIsBetter => [g[2], g[1], g[0]],
                    ScoreOrientation::LowerIsBetter => g,
                };
                let mut buf = p.params.grad_buffer();
                for ((_, cache), dk) in outs.iter().zip(d) {
                    if dk != 0.0 {
                        p.vit.backward(&p.params, cache, &[dk], &mut buf)?;
                    }
                }
                Ok::<_, RewardError>((loss, buf))
            })
            .map_err(|e| diverged(epoch, e))?;
            let (losses, grads): (Vec<f64>, Vec<_>) = per.into_iter().unzip();
            let sum: f64 = losses.iter().sum();
            if !sum.is_finite() {
                return Err(diverged(epoch, "non-finite loss"));
            }
            loss_sum += sum;
            let g = reduce_grads(grads).expect("non-empty batch");
            prm.params.set_grads(&g, 1.0 / batch.len() as f64)?;
            if let Some(c) = tc.grad_clip {
                clip_grad_norm(&mut prm.params, c);
            }
            let opt = AdamWConfig {
                lr: tc.lr * tc.schedule.factor(step, total_steps),
                weight_decay: tc.weight_decay,
                ..AdamWConfig::default()
            };
            adamw_step(&mut prm.params, &opt).map_err(|e: NnError| diverged(epoch, e))?;
            step += 1;
        }
        let val_loss = prm.mean_loss(&val, tc.exec)?;
        let val_accuracy = prm.ranking_accuracy(&val, tc.exec)?;
        report.epochs.push(PrmEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        });
        let key = (val_accuracy, -val_loss);
        let better =
            val.is_empty() || key.0 > best_key.0 || (key.0 == best_key.0 && key.1 > best_key.1);
        if better {
            best_key = key;
            best = prm.params.clone();
            report.best_epoch = epoch;
            report.best_val_accuracy = val_accuracy;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    report.final_train_loss = report
        .epochs
        .last()
        .map_or(init_train_loss, |e| e.train_loss);
    prm.params = best;
    report.seconds = started.elapsed().as_secs_f64();
    Ok((prm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::euler::{GridSpec, Primitive};

    fn tiny() -> PrmConfig {
        let mut c = PrmConfig::new(ModelConfig {
            patch_size: 3,
            in_channels: 5,
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2,
            dropout_p: 0.1,
            height: 8,
            width: 8,
        });
        c.k = 3;
        c
    }

    fn snap(a: f64, t: f64) -> Snapshot {
        Snapshot::from_fn(GridSpec::square(8).unwrap(), t, |x, y| {
            Primitive::new(1.0 + a * (6.0 * x).sin(), 0.1, -0.2 * y, 1.0)
        })
    }

    #[test]
    fn input_has_two_time_channels() {
        let p = Prm::new(tiny(), Normalization::identity(), TimeAxis::default(), 1).unwrap();
        assert_eq!(p.vit.config().in_channels, 10);
        let x = p.input(&snap(0.1, 0.0), &snap(0.2, 0.05)).unwrap();
        assert_eq!(x.len(), 10 * 64);
        assert_eq!(x[4 * 64], 0.0);
        assert!((x[9 * 64] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn scoring_is_deterministic_and_orientation_flips_sign() {
        let p = Prm::new(tiny(), Normalization::identity(), TimeAxis::default(), 2).unwrap();
        let (a, b) = (snap(0.1, 0.0), snap(0.3, 0.05));
        assert_eq!(p.score(&a, &b).unwrap(), p.score(&a, &b).unwrap());
        let mut c = tiny();
        c.orientation = ScoreOrientation::LowerIsBetter;
        let q = Prm::new(c, Normalization::identity(), TimeAxis::default(), 2).unwrap();
        assert_eq!(q.score(&a, &b).unwrap(), -p.score(&a, &b).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Prm::new(tiny(), Normalization::identity(), TimeAxis::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        p.save(&path, None).unwrap();
        let q = Prm::load(&path).unwrap();
        let (a, b) = (snap(0.1, 0.0), snap(0.3, 0.05));
        assert_eq!(p.score(&a, &b).unwrap(), q.score(&a, &b).unwrap());
    }
}
