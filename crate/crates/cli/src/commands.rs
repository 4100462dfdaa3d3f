use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use pdettc_core::euler::{generate_dataset, Channel, Dataset, Split, Trajectory};
use pdettc_core::io::{load_dataset, save_dataset};
use pdettc_core::metrics::{evaluate as eval_records, EvalCase, EvalEntry, GroupSummary};
use pdettc_core::par::Exec;
use pdettc_core::rewards::{
    build_prm_triplets, build_triplets_for, save_triplets, train_prm as fit_prm, Prm,
};
use pdettc_core::surrogate::{
    finetune as finetune_model, finetune_subset, fit, train as train_model, PairSet, Surrogate,
    TrainError, TrainReport,
};
use pdettc_core::ttc::{
    load_rollout, rollout_sweep, save_rollout, ArmReward, OracleMse, RewardKind, RewardModel,
    RolloutRecord, SweepCase, TTCConfig, TtcError,
};

use crate::config::ExperimentConfig;
use crate::render::{field_ppm, line_plot_svg, Series};
use crate::{
    CliError, EvaluateArgs, FinetuneArgs, GenDataArgs, OptimArgs, ReportArgs, RolloutArgs,
    TrainArgs, TrainPrmArgs,
};

const EXEC: Exec = Exec::Parallel;

/// Resolved configuration plus its digest and output directory.
struct Run {
    cfg: ExperimentConfig,
    digest: String,
}

impl Run {
    fn start(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let digest = cfg.digest();
        std::fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        let configs = cfg.out_dir.join("configs");
        std::fs::create_dir_all(&configs)?;
        let path = configs.join(format!("{digest}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&cfg)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(Self { cfg, digest })
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given
            .clone()
            .unwrap_or_else(|| self.cfg.out_dir.join(default))
    }

    fn write_json(&self, path: &Path, mut doc: serde_json::Value) -> Result<()> {
        if let Some(obj) = doc.as_object_mut() {
            obj.insert("config_digest".into(), json!(self.digest));
        }
        create_parent(path)?;
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    /// CSV whose first line is a `#` comment carrying the config digest.
    fn write_csv(&self, path: &Path, header: &str, rows: &[String]) -> Result<()> {
        let mut out = format!("# config_digest={}\n{header}\n", self.digest);
        for r in rows {
            out.push_str(r);
            out.push('\n');
        }
        create_parent(path)?;
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CliError::Config(msg.into()).into()
}

fn load_data(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(config_err(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    let (ds, _) = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ds)
}

fn load_model(path: &Path) -> Result<Surrogate> {
    if !path.exists() {
        return Err(config_err(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Surrogate::load(path).with_context(|| format!("loading {}", path.display()))
}

fn apply_optim(section: &mut crate::config::OptimSection, a: &OptimArgs) {
    if a.epochs.is_some() {
        section.epochs = a.epochs;
    }
    if a.lr.is_some() {
        section.lr = a.lr;
    }
    if a.batch_size.is_some() {
        section.batch_size = a.batch_size;
    }
}

pub fn gen_data(mut cfg: ExperimentConfig, a: GenDataArgs) -> Result<()> {
    if let Some(f) = a.families {
        cfg.data.families = f;
    }
    if let Some(n) = a.n {
        cfg.data.n_per_family = n;
    }
    if let Some(g) = a.grid {
        cfg.data.grid = g;
    }
    let run = Run::start(cfg)?;
    let spec = run.cfg.dataset_spec()?;
    let out = run.path(&a.out, "data.bin");
    create_parent(&out)?;
    let ds = generate_dataset(&spec, EXEC)?;
    save_dataset(&out, &ds, Some(run.digest.clone()))
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} trajectories on {}x{} to {}",
        ds.len(),
        spec.grid.nx,
        spec.grid.ny,
        out.display()
    );
    let gamma = spec.solver.gamma;
    for family in &spec.families {
        let trajs: Vec<&Trajectory> = ds
            .trajectories
            .iter()
            .filter(|t| t.ic().family == *family)
            .collect();
        let mut worst = [0.0f64; 4];
        for t in &trajs {
            for (w, d) in worst.iter_mut().zip(t.conservation_drift(gamma)) {
                *w = w.max(d);
            }
        }
        println!(
            "audit {family}: {} trajectories, max relative drift mass {:.2e} momentum_x {:.2e} momentum_y {:.2e} energy {:.2e}",
            trajs.len(),
            worst[0],
            worst[1],
            worst[2],
            worst[3]
        );
    }
    Ok(())
}

fn loss_rows(report: &TrainReport) -> Vec<String> {
    report
        .epochs
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_mse, e.lr, e.seconds
            )
        })
        .collect()
}

fn finish_training(
    run: &Run,
    out: &Path,
    result: std::result::Result<(Surrogate, TrainReport), TrainError>,
    seed: u64,
) -> Result<()> {
    let (model, report) = match result {
        Ok(r) => r,
        Err(TrainError::Diverged {
            epoch,
            step,
            reason,
            last_good,
        }) => {
            let rescue = out.with_extension("last_good.ckpt");
            create_parent(&rescue)?;
            last_good.save(&rescue, &[seed], Some(&run.digest))?;
            return Err(CliError::Numerical(format!(
                "training diverged at epoch {epoch}, step {step}: {reason}; best parameters so far saved to {}",
                rescue.display()
            ))
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    create_parent(out)?;
    model
        .save(out, &[seed], Some(&run.digest))
        .with_context(|| format!("writing {}", out.display()))?;
    run.write_csv(
        &out.with_extension("loss.csv"),
        "epoch,train_loss,val_mse,lr,seconds",
        &loss_rows(&report),
    )?;
    run.write_json(
        &out.with_extension("report.json"),
        json!({ "report": report }),
    )?;
    println!(
        "val one-step MSE {:.5} -> {:.5} (best epoch {}), {} optimizer steps in {:.1} s; checkpoint {}",
        report.init_val_mse,
        report.best_val_mse,
        report.best_epoch,
        model.params().step(),
        report.seconds,
        out.display()
    );
    Ok(())
}

pub fn train(mut cfg: ExperimentConfig, a: TrainArgs) -> Result<()> {
    if let Some(m) = a.model {
        cfg.model.name = m;
    }
    if let Some(p) = a.preset {
        cfg.model.size = p;
    }
    apply_optim(&mut cfg.train, &a.optim);
    let data = a
        .data
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("data.bin"));
    let ds = load_data(&data)?;
    cfg.data.grid = ds.grid().nx;
    if ds.grid().nx != ds.grid().ny {
        return Err(config_err("the CLI trains on square grids only"));
    }
    let run = Run::start(cfg)?;
    let out = run.path(&a.out, "model.ckpt");
    let tc = run.cfg.train_config();
    let result = match &a.resume {
        None => train_model(&ds, &run.cfg.model_config()?, &tc),
        Some(path) => {
            let mut model = load_model(path)?;
            if !model.grid_matches(ds.grid()) {
                return Err(config_err("checkpoint and dataset grids differ"));
            }
            println!(
                "resuming {} at optimizer step {}",
                path.display(),
                model.params().step()
            );
            let train = PairSet::new(ds.split(Split::Train), &model);
            let val = PairSet::new(ds.split(Split::Val), &model);
            fit(&mut model, &train, &val, &tc).map(|r| (model, r))
        }
    };
    finish_training(&run, &out, result, tc.seed)
}

pub fn finetune(mut cfg: ExperimentConfig, a: FinetuneArgs) -> Result<()> {
    if let Some(n) = a.n {
        cfg.finetune.n_trajectories = n;
    }
    apply_optim(&mut cfg.finetune.optim, &a.optim);
    let run = Run::start(cfg)?;
    let n = run.cfg.finetune.n_trajectories;
    let model = load_model(&run.path(&a.pretrained, "model.ckpt"))?;
    let ds = load_data(&run.path(&a.data, "data.bin"))?;
    if !model.grid_matches(ds.grid()) {
        return Err(config_err("checkpoint and dataset grids differ"));
    }
    let out = run.path(&a.out, &format!("finetune_n{n}.ckpt"));
    let tc = run.cfg.finetune_config();
    let result = finetune_model(&model, &ds, n, &tc);
    finish_training(&run, &out, result, tc.seed)
}

pub fn train_prm(mut cfg: ExperimentConfig, a: TrainPrmArgs) -> Result<()> {
    if let Some(k) = a.k {
        cfg.prm.k = k;
    }
    if let Some(alpha) = a.alpha {
        cfg.prm.alpha = alpha;
    }
    if a.max_trajectories.is_some() {
        cfg.prm.max_trajectories = a.max_trajectories;
    }
    if a.epochs.is_some() {
        cfg.prm.epochs = a.epochs;
    }
    if a.lr.is_some() {
        cfg.prm.lr = a.lr;
    }
    let run = Run::start(cfg)?;
    let model = load_model(&run.path(&a.model, "model.ckpt"))?;
    let ds = load_data(&run.path(&a.data, "data.bin"))?;
    if !model.grid_matches(ds.grid()) {
        return Err(config_err("checkpoint and dataset grids differ"));
    }
    let out = run.path(&a.out, "prm.ckpt");
    let mut prm_cfg = run.cfg.prm_config()?;
    prm_cfg.backbone = model.config().clone();
    let seed = run.cfg.triplet_seed();
    let triplets = match a.finetune_subset {
        None => build_prm_triplets(&model, &ds, prm_cfg.k, seed, prm_cfg.max_trajectories, EXEC)?,
        Some(n) => {
            let idx = finetune_subset(&ds, n, run.cfg.finetune_config().seed)?;
            let src: Vec<(usize, &Trajectory)> =
                idx.iter().map(|&i| (i, &ds.trajectories[i])).collect();
            build_triplets_for(&model, &src, prm_cfg.k, seed, EXEC)?
        }
    };
    if triplets.is_empty() {
        return Err(config_err(
            "no triplets: the dataset has no usable training pairs",
        ));
    }
    let trip_path = out.with_extension("triplets.bin");
    create_parent(&trip_path)?;
    save_triplets(
        &trip_path,
        &triplets,
        json!({ "config_digest": run.digest }),
    )?;
    let (prm, report) = fit_prm(
        &triplets,
        &prm_cfg,
        model.normalization(),
        model.time_axis(),
    )?;
    prm.save(&out, Some(&run.digest))
        .with_context(|| format!("writing {}", out.display()))?;
    let rows: Vec<String> = report
        .epochs
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.seconds
            )
        })
        .collect();
    run.write_csv(
        &out.with_extension("loss.csv"),
        "epoch,train_loss,val_loss,val_accuracy,seconds",
        &rows,
    )?;
    run.write_json(
        &out.with_extension("report.json"),
        json!({ "report": report }),
    )?;
    println!(
        "{} triplets (K = {}, alpha = {}); held-out ranking accuracy {:.1}% -> {:.1}% (epoch {}); checkpoint {}",
        triplets.len(),
        prm_cfg.k,
        prm_cfg.alpha,
        100.0 * report.init_val_accuracy,
        100.0 * report.best_val_accuracy,
        report.best_epoch,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    /// Dataset index of the initial condition.
    case: usize,
    seed: u64,
    #[serde(rename = "B")]
    b: usize,
    reward: RewardKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RolloutIndex {
    config_digest: String,
    tag: String,
    data: PathBuf,
    model: PathBuf,
    prm: Option<PathBuf>,
    records: Vec<IndexEntry>,
}

fn test_cases(ds: &Dataset, max_cases: Option<usize>) -> Vec<usize> {
    let mut idx = ds.split_indices(Split::Test);
    if let Some(m) = max_cases {
        idx.truncate(m);
    }
    idx
}

pub fn rollout(mut cfg: ExperimentConfig, a: RolloutArgs) -> Result<()> {
    if let Some(r) = a.rewards {
        cfg.ttc.rewards = r;
    }
    if let Some(b) = a.b_list {
        cfg.ttc.b_list = b;
    }
    if let Some(s) = a.seeds {
        cfg.ttc.seeds = s;
    }
    if let Some(s) = a.steps {
        cfg.ttc.steps = s;
    }
    if a.max_cases.is_some() {
        cfg.ttc.max_cases = a.max_cases;
    }
    let run = Run::start(cfg)?;
    let model_path = run.path(&a.model, "model.ckpt");
    let data_path = run.path(&a.data, "data.bin");
    let model = load_model(&model_path)?;
    let ds = load_data(&data_path)?;
    if !model.grid_matches(ds.grid()) {
        return Err(config_err("checkpoint and dataset grids differ"));
    }
    let ttc = &run.cfg.ttc;
    let prm_path = match (&a.prm, ttc.rewards.contains(&RewardKind::Prm)) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => {
            let p = run.cfg.out_dir.join("prm.ckpt");
            if !p.exists() {
                return Err(config_err(
                    "the prm reward needs --prm or <out-dir>/prm.ckpt",
                ));
            }
            Some(p)
        }
        (None, false) => None,
    };
    let prm: Option<Prm> = match (&prm_path, ttc.rewards.contains(&RewardKind::Prm)) {
        (Some(p), true) => Some(Prm::load(p).with_context(|| format!("loading {}", p.display()))?),
        _ => None,
    };
    let tag = a.tag.clone().unwrap_or_else(|| {
        model_path
            .file_stem()
            .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
    });
    let dir = run.path(&a.out, "rollouts").join(&tag);
    std::fs::create_dir_all(&dir)?;
    let case_idx = test_cases(&ds, ttc.max_cases);
    if case_idx.is_empty() {
        return Err(config_err("the dataset has no test trajectories"));
    }
    let cases: Vec<SweepCase> = case_idx
        .iter()
        .map(|&i| SweepCase {
            id: i,
            truth: &ds.trajectories[i],
        })
        .collect();
    let norm = model.normalization();
    let mut index = RolloutIndex {
        config_digest: run.digest.clone(),
        tag: tag.clone(),
        data: data_path.clone(),
        model: model_path.clone(),
        prm: prm_path.clone(),
        records: Vec::new(),
    };
    for &kind in &ttc.rewards {
        let base = TTCConfig {
            steps: ttc.steps,
            ..TTCConfig::new(1, kind, 0)
        };
        let records = rollout_sweep(
            &model,
            |case| -> std::result::Result<Box<dyn RewardModel>, _> {
                Ok(match kind {
                    RewardKind::Prm => Box::new(prm.as_ref().expect("loaded above")),
                    RewardKind::OracleMse => Box::new(OracleMse::new(case.truth, norm)),
                    _ => Box::new(ArmReward::new(kind)?),
                })
            },
            &cases,
            &ttc.b_list,
            &ttc.seeds,
            &base,
        )
        .map_err(|e| match e {
            TtcError::Aborted { step, source, .. } => anyhow::Error::from(CliError::Numerical(
                format!("{kind} rollout aborted at step {step}: {source}"),
            )),
            other => other.into(),
        })?;
        let mut fallbacks = 0;
        let mut violations = 0;
        for rec in &records {
            let case = rec.case_id.expect("sweep records carry a case id");
            let seed = rec.sweep_seed.expect("sweep records carry a seed");
            let file = format!("{kind}_case{case}_seed{seed}_b{}.bin", rec.config.b);
            save_rollout(
                &dir.join(&file),
                rec,
                json!({ "config_digest": run.digest, "tag": tag }),
            )?;
            fallbacks += rec.steps.iter().filter(|s| s.fallback).count();
            violations += rec.steps.iter().filter(|s| s.positivity_violation).count();
            index.records.push(IndexEntry {
                file,
                case,
                seed,
                b: rec.config.b,
                reward: kind,
            });
        }
        println!(
            "{kind}: {} rollouts over {} cases, B in {:?}; {fallbacks} fallback steps, {violations} positivity violations",
            records.len(),
            cases.len(),
            ttc.b_list
        );
    }
    let index_path = dir.join("index.json");
    std::fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    println!("index {}", index_path.display());
    Ok(())
}

fn rollout_dirs(run: &Run, given: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !given.is_empty() {
        return Ok(given.to_vec());
    }
    let root = run.cfg.out_dir.join("rollouts");
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(&root) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("index.json").exists())
            .collect(),
        Err(_) => Vec::new(),
    };
    dirs.sort();
    if dirs.is_empty() {
        return Err(config_err(format!(
            "no rollout directories under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

fn read_index(dir: &Path) -> Result<RolloutIndex> {
    let p = dir.join("index.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

pub fn evaluate(cfg: ExperimentConfig, a: EvaluateArgs) -> Result<()> {
    let run = Run::start(cfg)?;
    let ds = load_data(&run.path(&a.data, "data.bin"))?;
    let gamma = ds.spec.solver.gamma;
    let test = ds.split_indices(Split::Test);
    let position: HashMap<usize, usize> = test.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let cases: Vec<EvalCase> = test
        .iter()
        .map(|&i| {
            let t = &ds.trajectories[i];
            EvalCase {
                dataset: ds
                    .spec
                    .families
                    .iter()
                    .map(|f| f.name())
                    .collect::<Vec<_>>()
                    .join("+"),
                family: t.ic().family,
                ic_seed: t.ic().seed,
                truth: t,
            }
        })
        .collect();

    let mut loaded: Vec<(String, usize, RolloutRecord)> = Vec::new();
    for dir in rollout_dirs(&run, &a.rollouts)? {
        let index = read_index(&dir)?;
        for e in &index.records {
            if a.reward
                .as_ref()
                .is_some_and(|keep| !keep.contains(&e.reward))
            {
                continue;
            }
            let &pos = position.get(&e.case).ok_or_else(|| {
                config_err(format!(
                    "{}: case {} is not a test trajectory of this dataset",
                    dir.display(),
                    e.case
                ))
            })?;
            let rec = load_rollout(&dir.join(&e.file))?;
            loaded.push((index.tag.clone(), pos, rec));
        }
    }
    if loaded.is_empty() {
        return Err(config_err("no rollout records selected"));
    }
    let entries: Vec<EvalEntry> = loaded
        .iter()
        .map(|(tag, pos, rec)| EvalEntry {
            case: *pos,
            model: tag,
            record: rec,
        })
        .collect();
    let report = eval_records(&cases, &entries, &ds.normalization, gamma)?;

    let csv_path = run.path(&a.csv, "metrics.csv");
    create_parent(&csv_path)?;
    let mut buf = format!("# config_digest={}\n", run.digest).into_bytes();
    report.write_csv(&mut buf)?;
    std::fs::write(&csv_path, buf)?;
    let summary_path = run.path(&a.summary, "summary.json");
    let doc = report.summary_json(json!({ "records": loaded.len(), "gamma": gamma }));
    run.write_json(&summary_path, doc)?;

    println!(
        "{:<16} {:<16} {:>5} {:>12} {:>10} {:>10}",
        "model", "reward", "B", "final MSE", "gain %", "|arm_mass|"
    );
    for g in &report.groups {
        println!(
            "{:<16} {:<16} {:>5} {:>12.5} {:>10} {:>10}",
            g.model,
            g.reward,
            g.b,
            g.final_mse_mean,
            g.aggregate_gain.map_or("-".into(), |v| format!("{v:.2}")),
            g.mean_abs_arm[0].map_or("-".into(), |v| format!("{v:.2e}"))
        );
    }
    println!(
        "metrics {} and summary {}",
        csv_path.display(),
        summary_path.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct SummaryDoc {
    groups: Vec<GroupSummary>,
    #[serde(default)]
    config_digest: Option<String>,
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn report(cfg: ExperimentConfig, a: ReportArgs) -> Result<()> {
    let run = Run::start(cfg)?;
    let summary_path = run.path(&a.summary, "summary.json");
    let text = std::fs::read_to_string(&summary_path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", summary_path.display())))?;
    let summary: SummaryDoc = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", summary_path.display()))?;
    let out = run.path(&a.out, "report");
    std::fs::create_dir_all(&out)?;
    let stamp = format!(
        "config_digest={} summary_digest={}",
        run.digest,
        summary.config_digest.as_deref().unwrap_or("unknown")
    );
    let mut files = Vec::new();

    let mut by_pair: BTreeMap<(String, String), Vec<&GroupSummary>> = BTreeMap::new();
    for g in &summary.groups {
        by_pair
            .entry((g.model.clone(), g.reward.clone()))
            .or_default()
            .push(g);
    }
    for ((model, reward), mut groups) in by_pair {
        groups.sort_by_key(|g| g.b);
        let series: Vec<Series> = groups
            .iter()
            .map(|g| Series {
                label: format!("B = {}", g.b),
                points: g
                    .mse_by_t
                    .iter()
                    .enumerate()
                    .map(|(t, &m)| ((t + 1) as f64, m))
                    .collect(),
            })
            .collect();
        let svg = line_plot_svg(
            &format!("{model}, {reward}: rollout MSE"),
            "step",
            "mean MSE (z-score units)",
            &series,
            &stamp,
        );
        let name = format!("mse_vs_t_{}_{}.svg", slug(&model), slug(&reward));
        std::fs::write(out.join(&name), svg)?;
        files.push(name);
    }

    let data_path = a.data.clone().or_else(|| {
        let p = run.cfg.out_dir.join("data.bin");
        p.exists().then_some(p)
    });
    let ds = data_path.as_deref().map(load_data).transpose()?;
    let dirs = if a.rollouts.is_empty() {
        rollout_dirs(&run, &[]).unwrap_or_default()
    } else {
        a.rollouts.clone()
    };
    for dir in dirs {
        let index = read_index(&dir)?;
        let Some(first) = index.records.first() else {
            continue;
        };
        let (case, seed) = (first.case, first.seed);
        for e in index
            .records
            .iter()
            .filter(|e| e.case == case && e.seed == seed)
        {
            let rec = load_rollout(&dir.join(&e.file))?;
            let Some(last) = rec.chosen.last() else {
                continue;
            };
            let name = format!(
                "field_{}_{}_case{case}_b{}_rho.ppm",
                slug(&index.tag),
                e.reward,
                e.b
            );
            std::fs::write(out.join(&name), field_ppm(last, Channel::Rho, 4, &stamp))?;
            files.push(name);
        }
        if let Some(ds) = &ds {
            if let (Some(truth), Some(e)) = (ds.trajectories.get(case), index.records.first()) {
                let rec = load_rollout(&dir.join(&e.file))?;
                let k = rec.chosen.len().min(truth.len() - 1);
                let name = format!("field_truth_case{case}_t{k}_rho.ppm");
                std::fs::write(
                    out.join(&name),
                    field_ppm(truth.get(k), Channel::Rho, 4, &stamp),
                )?;
                files.push(name);
            }
        }
    }
    files.sort();
    files.dedup();
    run.write_json(
        &out.join("index.json"),
        json!({ "files": files, "summary": summary_path }),
    )?;
    let mut listing = String::new();
    for f in &files {
        let _ = writeln!(listing, "  {f}");
    }
    print!("report in {}:\n{listing}", out.display());
    Ok(())
}
