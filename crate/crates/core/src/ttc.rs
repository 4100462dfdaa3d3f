//! Greedy best-of-B rollout: at every step sample B candidate successors,
//! score each transition with a reward model, keep the argmax and continue
//! from it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::euler::{Snapshot, Trajectory, DEFAULT_GAMMA};
use crate::io::{load_snapshots, save_snapshots, IoError};
use crate::par::{self, Exec};
use crate::rewards::{arm_energy, arm_mass, arm_momentum, Component, Prm, RewardError};
use crate::rng::derive_seed;
use crate::surrogate::{Surrogate, SurrogateError};

pub const ROLLOUT_RECORD: &str = "ROLLOUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    ArmMass,
    ArmMomentumX,
    ArmMomentumY,
    ArmEnergy,
    Prm,
    OracleMse,
}

impl RewardKind {
    pub const ALL: [RewardKind; 6] = [
        RewardKind::ArmMass,
        RewardKind::ArmMomentumX,
        RewardKind::ArmMomentumY,
        RewardKind::ArmEnergy,
        RewardKind::Prm,
        RewardKind::OracleMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::ArmMass => "arm_mass",
            RewardKind::ArmMomentumX => "arm_momentum_x",
            RewardKind::ArmMomentumY => "arm_momentum_y",
            RewardKind::ArmEnergy => "arm_energy",
            RewardKind::Prm => "prm",
            RewardKind::OracleMse => "oracle_mse",
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        RewardKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown reward '{s}'"))
    }
}

/// Where a rollout step stands; lets a reward consult per-step context.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    /// 0-based step: the transition from snapshot `step` to `step + 1`.
    pub step: usize,
}

pub trait RewardModel: Sync {
    fn id(&self) -> String;

    /// Higher is better. [`RewardError::Undefined`] and
    /// [`RewardError::InvalidInput`] mark the candidate's reward as
    /// undefined; other errors abort the rollout.
    fn score(&self, ctx: &StepContext, u_t: &Snapshot, cand: &Snapshot)
        -> Result<f64, RewardError>;
}

impl<R: RewardModel + ?Sized> RewardModel for &R {
    fn id(&self) -> String {
        (**self).id()
    }

    fn score(
        &self,
        ctx: &StepContext,
        u_t: &Snapshot,
        cand: &Snapshot,
    ) -> Result<f64, RewardError> {
        (**self).score(ctx, u_t, cand)
    }
}

/// One of the closed-form conservation rewards.
#[derive(Clone, Copy, Debug)]
pub struct ArmReward {
    pub kind: RewardKind,
    pub gamma: f64,
}

impl ArmReward {
    pub fn new(kind: RewardKind) -> Result<Self, RewardError> {
        match kind {
            RewardKind::ArmMass
            | RewardKind::ArmMomentumX
            | RewardKind::ArmMomentumY
            | RewardKind::ArmEnergy => Ok(Self {
                kind,
                gamma: DEFAULT_GAMMA,
            }),
            _ => Err(RewardError::InvalidInput(format!(
                "{kind} is not an analytical reward"
            ))),
        }
    }
}

impl RewardModel for ArmReward {
    fn id(&self) -> String {
        self.kind.name().into()
    }

    fn score(&self, _: &StepContext, u_t: &Snapshot, cand: &Snapshot) -> Result<f64, RewardError> {
        let s = match self.kind {
            RewardKind::ArmMass => arm_mass(u_t, cand)?,
            RewardKind::ArmMomentumX => arm_momentum(u_t, cand, Component::X)?,
            RewardKind::ArmMomentumY => arm_momentum(u_t, cand, Component::Y)?,
            RewardKind::ArmEnergy => arm_energy(u_t, cand, self.gamma)?,
            _ => unreachable!("checked in ArmReward::new"),
        };
        Ok(s.value)
    }
}

impl RewardModel for Prm {
    fn id(&self) -> String {
        RewardKind::Prm.name().into()
    }

    fn score(&self, _: &StepContext, u_t: &Snapshot, cand: &Snapshot) -> Result<f64, RewardError> {
        Prm::score(self, u_t, cand)
    }
}

/// `-MSE(candidate, truth[step + 1])` in the surrogate's normalized units.
pub struct OracleMse<'a> {
    truth: &'a [Snapshot],
    norm: &'a crate::euler::Normalization,
}

impl<'a> OracleMse<'a> {
    pub fn new(truth: &'a Trajectory, norm: &'a crate::euler::Normalization) -> Self {
        Self {
            truth: truth.snapshots(),
            norm,
        }
    }
}

impl RewardModel for OracleMse<'_> {
    fn id(&self) -> String {
        RewardKind::OracleMse.name().into()
    }

    fn score(&self, ctx: &StepContext, _: &Snapshot, cand: &Snapshot) -> Result<f64, RewardError> {
        let truth = self.truth.get(ctx.step + 1).ok_or_else(|| {
            RewardError::InvalidInput(format!("no ground truth for step {}", ctx.step + 1))
        })?;
        Ok(-normalized_mse(self.norm, cand, truth)?)
    }
}

pub(crate) fn normalized_mse(
    norm: &crate::euler::Normalization,
    a: &Snapshot,
    b: &Snapshot,
) -> Result<f64, RewardError> {
    if !a.grid().compatible(b.grid()) {
        return Err(RewardError::GridMismatch);
    }
    let (x, y) = (norm.normalize(a), norm.normalize(b));
    Ok(x.iter()
        .zip(&y)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / x.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TTCConfig {
    /// Branching factor.
    pub b: usize,
    pub reward: RewardKind,
    pub seed: u64,
    /// Number of predicted steps.
    pub steps: usize,
    /// Draw candidate streams per (step, B) instead of per step, so runs
    /// with different B share no candidates.
    #[serde(default)]
    pub independent_streams: bool,
    /// Keep every candidate in the record, not only the chosen one.
    #[serde(default)]
    pub keep_candidates: bool,
    #[serde(default)]
    pub exec: Exec,
}

impl TTCConfig {
    pub fn new(b: usize, reward: RewardKind, seed: u64) -> Self {
        Self {
            b,
            reward,
            seed,
            steps: crate::euler::N_TIMES - 1,
            independent_streams: false,
            keep_candidates: false,
            exec: Exec::Parallel,
        }
    }

    pub fn validate(&self) -> Result<(), TtcError> {
        if self.b == 0 {
            return Err(TtcError::Config(
                "branching factor must be at least 1".into(),
            ));
        }
        if self.steps == 0 {
            return Err(TtcError::Config("rollout needs at least one step".into()));
        }
        Ok(())
    }

    /// Seed of the candidate streams at `step`; candidate `i` uses stream `i`.
    pub fn stream_seed(&self, step: usize) -> u64 {
        if self.independent_streams {
            derive_seed(self.seed, &[step as u64, self.b as u64])
        } else {
            derive_seed(self.seed, &[step as u64])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `None` marks an undefined reward.
    pub rewards: Vec<Option<f64>>,
    pub selected: usize,
    /// Every reward was undefined and candidate 0 was taken.
    pub fallback: bool,
    /// The chosen snapshot has a non-positive density or pressure somewhere.
    pub positivity_violation: bool,
    pub seconds: f64,
}

impl StepRecord {
    pub fn selected_reward(&self) -> Option<f64> {
        self.rewards[self.selected]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub config: TTCConfig,
    pub reward_id: String,
    /// Initial-condition id and sweep seed when produced by a sweep.
    #[serde(default)]
    pub case_id: Option<usize>,
    #[serde(default)]
    pub sweep_seed: Option<u64>,
    /// Candidates branch from the true snapshot at every step instead of
    /// from the previous choice.
    pub teacher_forced: bool,
    #[serde(skip)]
    pub start: Option<Snapshot>,
    /// Chosen snapshots for times `1..=steps`.
    #[serde(skip)]
    pub chosen: Vec<Snapshot>,
    pub steps: Vec<StepRecord>,
    #[serde(skip)]
    pub candidates: Vec<Vec<Snapshot>>,
}

impl RolloutRecord {
    fn empty(cfg: &TTCConfig, reward_id: String, start: &Snapshot, teacher_forced: bool) -> Self {
        Self {
            config: cfg.clone(),
            reward_id,
            case_id: None,
            sweep_seed: None,
            teacher_forced,
            start: Some(start.clone()),
            chosen: Vec::with_capacity(cfg.steps),
            steps: Vec::with_capacity(cfg.steps),
            candidates: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.chosen.len() == self.config.steps
    }

    /// The start snapshot followed by the chosen ones.
    pub fn trajectory(&self) -> Vec<&Snapshot> {
        self.start.iter().chain(self.chosen.iter()).collect()
    }

    /// Checks that every selection attains the maximum defined reward with
    /// ties resolved to the lowest index, and that fallbacks happen exactly
    /// when no reward is defined.
    pub fn check_selection(&self) -> Result<(), String> {
        for (t, s) in self.steps.iter().enumerate() {
            let best = s
                .rewards
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.map(|r| (i, r)))
                .fold(None, |acc: Option<(usize, f64)>, (i, r)| match acc {
                    Some((_, br)) if br >= r => acc,
                    _ => Some((i, r)),
                });
            match best {
                None if s.fallback && s.selected == 0 => {}
                None => {
                    return Err(format!(
                        "step {t}: no defined reward but no fallback to candidate 0"
                    ))
                }
                Some((i, _)) if i == s.selected && !s.fallback => {}
                Some((i, r)) => {
                    return Err(format!(
                        "step {t}: selected {} but candidate {i} has the first maximal reward {r}",
                        s.selected
                    ))
                }
            }
        }
        Ok(())
    }

    /// Equality ignoring wall-clock timings and the execution mode.
    pub fn same_outcome(&self, other: &RolloutRecord) -> bool {
        let strip = |r: &RolloutRecord| {
            let mut r = r.clone();
            r.config.exec = Exec::Sequential;
            r.steps.iter_mut().for_each(|s| s.seconds = 0.0);
            r
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Error)]
pub enum TtcError {
    #[error("invalid rollout configuration: {0}")]
    Config(String),
    #[error("rollout aborted at step {step}: {source}")]
    Aborted {
        step: usize,
        source: Box<dyn std::error::Error + Send + Sync>,
        partial: Box<RolloutRecord>,
    },
    #[error(transparent)]
    Io(#[from] IoError),
}

fn abort(
    step: usize,
    e: impl std::error::Error + Send + Sync + 'static,
    rec: RolloutRecord,
) -> TtcError {
    TtcError::Aborted {
        step,
        source: Box::new(e),
        partial: Box::new(rec),
    }
}

/// Samples, scores and selects one step from `u_t`.
fn select_step(
    model: &Surrogate,
    reward: &dyn RewardModel,
    u_t: &Snapshot,
    step: usize,
    cfg: &TTCConfig,
) -> Result<(Vec<Snapshot>, StepRecord), Box<dyn std::error::Error + Send + Sync>> {
    let started = Instant::now();
    let t_norm = model.time_axis().t_norm(u_t.t());
    let cands = model.sample_candidates(u_t, t_norm, cfg.b, cfg.stream_seed(step), cfg.exec)?;
    let ctx = StepContext { step };
    let rewards = par::try_map_slice(cfg.exec, &cands, |c| match reward.score(&ctx, u_t, c) {
        Ok(v) => Ok(Some(v)),
        Err(RewardError::Undefined(_) | RewardError::InvalidInput(_)) => Ok(None),
        Err(e) => Err(e),
    })?;
    let mut selected = None::<(usize, f64)>;
    for (i, r) in rewards.iter().enumerate() {
        if let Some(r) = *r {
            if selected.is_none_or(|(_, best)| r > best) {
                selected = Some((i, r));
            }
        }
    }
    let fallback = selected.is_none();
    let selected = selected.map_or(0, |(i, _)| i);
    let chosen = &cands[selected];
    let record = StepRecord {
        rewards,
        selected,
        fallback,
        positivity_violation: chosen.min_rho() <= 0.0 || chosen.min_p() <= 0.0,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((cands, record))
}

/// Greedy rollout from `u_start`. On failure the error carries the record
/// up to the last completed step.
pub fn greedy_rollout(
    model: &Surrogate,
    reward: &dyn RewardModel,
    u_start: &Snapshot,
    cfg: &TTCConfig,
) -> Result<RolloutRecord, TtcError> {
    cfg.validate()?;
    if !u_start.is_finite() {
        return Err(TtcError::Config("start snapshot is not finite".into()));
    }
    let mut rec = RolloutRecord::empty(cfg, reward.id(), u_start, false);
    let mut current = u_start.clone();
    for step in 0..cfg.steps {
        let (mut cands, s) = match select_step(model, reward, &current, step, cfg) {
            Ok(v) => v,
            Err(e) => {
                return Err(TtcError::Aborted {
                    step,
                    source: e,
                    partial: Box::new(rec),
                })
            }
        };
        current = cands.swap_remove(s.selected);
        if cfg.keep_candidates {
            cands.push(current.clone());
            let last = cands.len() - 1;
            cands.swap(s.selected, last);
            rec.candidates.push(cands);
        }
        rec.chosen.push(current.clone());
        rec.steps.push(s);
    }
    Ok(rec)
}

/// Like [`greedy_rollout`], but every step branches from the true snapshot
/// at that time, so each recorded choice is a pure one-step selection.
pub fn one_step_selection(
    model: &Surrogate,
    reward: &dyn RewardModel,
    truth: &Trajectory,
    cfg: &TTCConfig,
) -> Result<RolloutRecord, TtcError> {
    cfg.validate()?;
    if truth.len() < cfg.steps + 1 {
        return Err(TtcError::Config(format!(
            "ground truth has {} snapshots, need {}",
            truth.len(),
            cfg.steps + 1
        )));
    }
    let mut rec = RolloutRecord::empty(cfg, reward.id(), truth.get(0), true);
    for step in 0..cfg.steps {
        let (mut cands, s) = match select_step(model, reward, truth.get(step), step, cfg) {
            Ok(v) => v,
            Err(e) => {
                return Err(TtcError::Aborted {
                    step,
                    source: e,
                    partial: Box::new(rec),
                })
            }
        };
        let chosen = cands[s.selected].clone();
        if cfg.keep_candidates {
            rec.candidates.push(std::mem::take(&mut cands));
        }
        rec.chosen.push(chosen);
        rec.steps.push(s);
    }
    Ok(rec)
}

/// One initial condition of a sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepCase<'a> {
    pub id: usize,
    pub truth: &'a Trajectory,
}

/// Greedy rollouts for every `(case, seed, B)`; record order is case-major,
/// then seed, then B as listed. Within a `(case, seed)` all B share the
/// rollout seed `derive_seed(seed, [case id])`, so with shared-prefix
/// streams the B = 1 candidate is candidate 0 of every larger run.
pub fn rollout_sweep<'a, F>(
    model: &Surrogate,
    reward_for: F,
    cases: &[SweepCase<'a>],
    b_list: &[usize],
    seeds: &[u64],
    base: &TTCConfig,
) -> Result<Vec<RolloutRecord>, TtcError>
where
    F: Fn(&SweepCase<'a>) -> Result<Box<dyn RewardModel + 'a>, RewardError> + Sync,
{
    if b_list.is_empty() || seeds.is_empty() {
        return Err(TtcError::Config(
            "sweep needs at least one branching factor and one seed".into(),
        ));
    }
    let jobs: Vec<(usize, u64, usize)> = (0..cases.len())
        .flat_map(|c| {
            seeds
                .iter()
                .flat_map(move |&s| b_list.iter().map(move |&b| (c, s, b)))
        })
        .collect();
    par::try_map_range(base.exec, jobs.len(), |j| {
        let (c, seed, b) = jobs[j];
        let case = &cases[c];
        let reward = reward_for(case).map_err(|e| {
            abort(
                0,
                e,
                RolloutRecord::empty(base, String::new(), case.truth.get(0), false),
            )
        })?;
        let cfg = TTCConfig {
            b,
            seed: derive_seed(seed, &[case.id as u64]),
            exec: Exec::Sequential,
            ..base.clone()
        };
        let mut rec = greedy_rollout(model, reward.as_ref(), case.truth.get(0), &cfg)?;
        rec.case_id = Some(case.id);
        rec.sweep_seed = Some(seed);
        Ok(rec)
    })
}

#[derive(Serialize, Deserialize)]
struct RolloutMeta {
    record: RolloutRecord,
    n_candidates_kept: usize,
    extra: serde_json::Value,
}

/// Writes chosen snapshots (start first) as a `ROLLOUT` container with the
/// record's metadata in the header, plus a JSON sidecar. Kept candidates
/// follow the chosen snapshots step by step.
pub fn save_rollout(
    path: &Path,
    rec: &RolloutRecord,
    extra: serde_json::Value,
) -> Result<(), TtcError> {
    let mut snaps: Vec<Snapshot> = rec.trajectory().into_iter().cloned().collect();
    for c in &rec.candidates {
        snaps.extend(c.iter().cloned());
    }
    let meta = RolloutMeta {
        record: rec.clone(),
        n_candidates_kept: rec.candidates.len(),
        extra,
    };
    let meta = serde_json::to_value(&meta).map_err(IoError::from)?;
    save_snapshots(path, ROLLOUT_RECORD, &snaps, meta)?;
    Ok(())
}

pub fn load_rollout(path: &Path) -> Result<RolloutRecord, TtcError> {
    let (snaps, header) = load_snapshots(path)?;
    if header.record_type != ROLLOUT_RECORD {
        return Err(TtcError::Config(format!(
            "{} holds '{}' records, not a rollout",
            path.display(),
            header.record_type
        )));
    }
    let meta: RolloutMeta = serde_json::from_value(header.meta).map_err(IoError::from)?;
    let mut rec = meta.record;
    let n_chosen = rec.steps.len();
    if snaps.len() != 1 + n_chosen + meta.n_candidates_kept * rec.config.b {
        return Err(TtcError::Config(
            "rollout payload does not match its metadata".into(),
        ));
    }
    let mut it = snaps.into_iter();
    rec.start = it.next();
    rec.chosen = it.by_ref().take(n_chosen).collect();
    rec.candidates = (0..meta.n_candidates_kept)
        .map(|_| it.by_ref().take(rec.config.b).collect())
        .collect();
    Ok(rec)
}

impl From<SurrogateError> for TtcError {
    fn from(e: SurrogateError) -> Self {
        TtcError::Config(e.to_string())
    }
}
