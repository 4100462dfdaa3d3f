//! Rollout evaluation: per-step error against ground truth, sample gain
//! relative to the single-candidate run, and conservation traces.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::euler::{Family, Normalization, Snapshot, Trajectory};
use crate::rewards::{arm_energy, arm_mass, arm_momentum, Component};
use crate::ttc::RolloutRecord;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("snapshots live on different grids")]
    GridMismatch,
    #[error("sample gain undefined: single-candidate error is {0}")]
    ZeroBaseline(f64),
    #[error("no ratios to aggregate")]
    Empty,
    #[error("record does not match its ground truth: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean squared difference over all channels and cells, in normalized
/// channel units.
pub fn mse(a: &Snapshot, b: &Snapshot, norm: &Normalization) -> Result<f64, MetricsError> {
    if !a.grid().compatible(b.grid()) {
        return Err(MetricsError::GridMismatch);
    }
    let mut sum = 0.0;
    for c in 0..crate::euler::N_CHANNELS {
        let inv = 1.0 / norm.std[c];
        for (x, y) in a.fields()[c].iter().zip(&b.fields()[c]) {
            let d = (x - y) * inv;
            sum += d * d;
        }
    }
    Ok(sum / (crate::euler::N_CHANNELS * a.grid().cells()) as f64)
}

/// `mse_b / mse_1`; below 1 means the larger branching factor helped.
pub fn sample_gain(mse_b: f64, mse_1: f64) -> Result<f64, MetricsError> {
    if mse_1 <= 0.0 || !mse_1.is_finite() {
        return Err(MetricsError::ZeroBaseline(mse_1));
    }
    Ok(mse_b / mse_1)
}

/// `100 * (1 - mean(ratios))`, in percent.
pub fn aggregate_gain(ratios: &[f64]) -> Result<f64, MetricsError> {
    if ratios.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(100.0 * (1.0 - ratios.iter().sum::<f64>() / ratios.len() as f64))
}

/// ARM values of one transition; `None` where the reward is undefined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmValues {
    pub mass: Option<f64>,
    pub mom_x: Option<f64>,
    pub mom_y: Option<f64>,
    pub energy: Option<f64>,
}

pub fn arm_values(u_t: &Snapshot, u_next: &Snapshot, gamma: f64) -> ArmValues {
    ArmValues {
        mass: arm_mass(u_t, u_next).ok().map(|s| s.value),
        mom_x: arm_momentum(u_t, u_next, Component::X)
            .ok()
            .map(|s| s.value),
        mom_y: arm_momentum(u_t, u_next, Component::Y)
            .ok()
            .map(|s| s.value),
        energy: arm_energy(u_t, u_next, gamma).ok().map(|s| s.value),
    }
}

/// ARM values of every consecutive pair of a snapshot sequence.
pub fn trace_of(snaps: &[&Snapshot], gamma: f64) -> Vec<ArmValues> {
    snaps
        .windows(2)
        .map(|w| arm_values(w[0], w[1], gamma))
        .collect()
}

/// ARM values along the chosen trajectory of a record (start included),
/// one entry per step.
pub fn conservation_trace(record: &RolloutRecord, gamma: f64) -> Vec<ArmValues> {
    trace_of(&record.trajectory(), gamma)
}

/// Identifies the initial condition behind a record.
#[derive(Clone, Debug)]
pub struct EvalCase<'a> {
    pub dataset: String,
    pub family: Family,
    pub ic_seed: u64,
    pub truth: &'a Trajectory,
}

/// A record to evaluate, tagged with the model that produced it.
#[derive(Clone, Copy, Debug)]
pub struct EvalEntry<'a> {
    pub case: usize,
    pub model: &'a str,
    pub record: &'a RolloutRecord,
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub family: String,
    pub ic_seed: u64,
    pub model: String,
    pub reward: String,
    #[serde(rename = "B")]
    pub b: usize,
    pub t: usize,
    pub mse: f64,
    pub sg: Option<f64>,
    pub mass_arm: Option<f64>,
    pub mom_x_arm: Option<f64>,
    pub mom_y_arm: Option<f64>,
    pub energy_arm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub model: String,
    pub reward: String,
    #[serde(rename = "B")]
    pub b: usize,
    pub n_rollouts: usize,
    pub final_mse_mean: f64,
    pub final_mse_std: f64,
    /// Percent; `None` when no paired single-candidate rollouts exist.
    pub aggregate_gain: Option<f64>,
    pub mse_by_t: Vec<f64>,
    /// Mean |ARM| over steps and rollouts: mass, x/y momentum, energy.
    pub mean_abs_arm: [Option<f64>; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalization: Normalization,
    pub rows: Vec<EvalRow>,
    pub groups: Vec<GroupSummary>,
}

type GroupKey = (String, String, usize);
type PairKey = (usize, Option<u64>, String, String);

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn mean_abs(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().map(f64::abs).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Evaluates records against their cases. Sample gains pair each record
/// with the B = 1 record of the same case, sweep seed, model and reward.
pub fn evaluate(
    cases: &[EvalCase],
    entries: &[EvalEntry],
    norm: &Normalization,
    gamma: f64,
) -> Result<EvalReport, MetricsError> {
    let mut per_entry: Vec<Vec<f64>> = Vec::with_capacity(entries.len());
    for e in entries {
        let case = cases
            .get(e.case)
            .ok_or_else(|| MetricsError::Mismatch(format!("case {} out of range", e.case)))?;
        let truth = case.truth.snapshots();
        if e.record.chosen.len() + 1 > truth.len() {
            return Err(MetricsError::Mismatch(format!(
                "{} steps but only {} true snapshots",
                e.record.chosen.len(),
                truth.len()
            )));
        }
        let errs = e
            .record
            .chosen
            .iter()
            .enumerate()
            .map(|(k, s)| mse(s, &truth[k + 1], norm))
            .collect::<Result<Vec<_>, _>>()?;
        per_entry.push(errs);
    }

    let key = |e: &EvalEntry| -> PairKey {
        (
            e.case,
            e.record.sweep_seed,
            e.model.to_string(),
            e.record.reward_id.clone(),
        )
    };
    let mut baseline: BTreeMap<PairKey, usize> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if e.record.config.b == 1 {
            baseline.entry(key(e)).or_insert(i);
        }
    }

    let mut rows = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let case = &cases[e.case];
        let base = baseline.get(&key(e)).map(|&j| &per_entry[j]);
        let trace = conservation_trace(e.record, gamma);
        for (k, &m) in per_entry[i].iter().enumerate() {
            let sg = match base {
                Some(b) => Some(sample_gain(m, b[k])?),
                None => None,
            };
            let a = trace[k];
            rows.push(EvalRow {
                dataset: case.dataset.clone(),
                family: case.family.name().into(),
                ic_seed: case.ic_seed,
                model: e.model.into(),
                reward: e.record.reward_id.clone(),
                b: e.record.config.b,
                t: k + 1,
                mse: m,
                sg,
                mass_arm: a.mass,
                mom_x_arm: a.mom_x,
                mom_y_arm: a.mom_y,
                energy_arm: a.energy,
            });
        }
        groups
            .entry((
                e.model.to_string(),
                e.record.reward_id.clone(),
                e.record.config.b,
            ))
            .or_default()
            .push(i);
    }

    let mut summaries = Vec::new();
    for ((model, reward, b), idx) in groups {
        let finals: Vec<f64> = idx
            .iter()
            .filter_map(|&i| per_entry[i].last().copied())
            .collect();
        let (final_mse_mean, final_mse_std) = mean_std(&finals);
        let ratios: Option<Vec<f64>> = idx
            .iter()
            .map(|&i| {
                let j = *baseline.get(&key(&entries[i]))?;
                sample_gain(*per_entry[i].last()?, *per_entry[j].last()?).ok()
            })
            .collect();
        let n_t = idx.iter().map(|&i| per_entry[i].len()).min().unwrap_or(0);
        let mse_by_t = (0..n_t)
            .map(|k| idx.iter().map(|&i| per_entry[i][k]).sum::<f64>() / idx.len() as f64)
            .collect();
        let traces: Vec<ArmValues> = idx
            .iter()
            .flat_map(|&i| conservation_trace(entries[i].record, gamma))
            .collect();
        summaries.push(GroupSummary {
            model,
            reward,
            b,
            n_rollouts: idx.len(),
            final_mse_mean,
            final_mse_std,
            aggregate_gain: ratios.and_then(|r| aggregate_gain(&r).ok()),
            mse_by_t,
            mean_abs_arm: [
                mean_abs(traces.iter().map(|a| a.mass)),
                mean_abs(traces.iter().map(|a| a.mom_x)),
                mean_abs(traces.iter().map(|a| a.mom_y)),
                mean_abs(traces.iter().map(|a| a.energy)),
            ],
        });
    }
    Ok(EvalReport {
        normalization: *norm,
        rows,
        groups: summaries,
    })
}

impl EvalReport {
    pub fn group(&self, model: &str, reward: &str, b: usize) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.model == model && g.reward == reward && g.b == b)
    }

    /// CSV with header
    /// `dataset,family,ic_seed,model,reward,B,t,mse,sg,mass_arm,mom_x_arm,mom_y_arm,energy_arm`;
    /// undefined values are empty fields.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        if self.rows.is_empty() {
            out.write_record([
                "dataset",
                "family",
                "ic_seed",
                "model",
                "reward",
                "B",
                "t",
                "mse",
                "sg",
                "mass_arm",
                "mom_x_arm",
                "mom_y_arm",
                "energy_arm",
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Summary document: normalization, per-group statistics and
    /// aggregate gains, plus caller-supplied metadata.
    pub fn summary_json(&self, meta: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "mse_units": "per-channel z-scores",
            "normalization": self.normalization,
            "groups": self.groups,
            "meta": meta,
        })
    }
}
