use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RewardError;
use crate::euler::{Dataset, Snapshot, Split, Trajectory};
use crate::io::{load_snapshots, save_snapshots};
use crate::par::{self, Exec};
use crate::rng::derive_seed;
use crate::surrogate::Surrogate;

pub const TRIPLET_RECORD: &str = "TRIPLET";

/// Which end of the score scale the triplet loss pushes good candidates to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrientation {
    #[default]
    HigherIsBetter,
    LowerIsBetter,
}

/// A current snapshot with three of its sampled successors, chosen by rank
/// of (normalized) MSE against the true next snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletRecord {
    pub trajectory: usize,
    pub step: usize,
    pub u_t: Snapshot,
    pub best: Snapshot,
    pub median: Snapshot,
    pub worst: Snapshot,
    /// MSE of best, median, worst.
    pub mse: [f64; 3],
    /// Candidate indices of best, median, worst.
    pub candidate: [usize; 3],
}

/// Returns `[best, median, worst]` candidate indices: ranks 0, `K/2` and
/// `K-1` after sorting by MSE with ties broken by index. `None` when fewer
/// than three candidates or when best and worst are indistinguishable
/// (spread within 1e-14).
pub fn rank_candidates(mse: &[f64]) -> Option<[usize; 3]> {
    let k = mse.len();
    if k < 3 {
        return None;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mse[a].total_cmp(&mse[b]).then(a.cmp(&b)));
    let (best, median, worst) = (order[0], order[k / 2], order[k - 1]);
    if mse[worst] - mse[best] <= 1e-14 {
        return None;
    }
    Some([best, median, worst])
}

/// `max(0, r_min - r_median + alpha) + max(0, r_median - r_max + alpha)`,
/// where `r_min`, `r_median`, `r_max` are the scores that should end up
/// lowest, middle and highest.
pub fn triplet_loss(r_min: f64, r_median: f64, r_max: f64, alpha: f64) -> f64 {
    (r_min - r_median + alpha).max(0.0) + (r_median - r_max + alpha).max(0.0)
}

/// Loss and its subgradient with respect to `(r_min, r_median, r_max)`;
/// an inactive hinge (argument `<= 0`) contributes nothing.
pub fn triplet_loss_grad(r_min: f64, r_median: f64, r_max: f64, alpha: f64) -> (f64, [f64; 3]) {
    let a = r_min - r_median + alpha;
    let b = r_median - r_max + alpha;
    let mut g = [0.0; 3];
    if a > 0.0 {
        g[0] += 1.0;
        g[1] -= 1.0;
    }
    if b > 0.0 {
        g[1] += 1.0;
        g[2] -= 1.0;
    }
    (a.max(0.0) + b.max(0.0), g)
}

fn normalized_mse(model: &Surrogate, a: &Snapshot, b: &[f64]) -> f64 {
    let x = model.normalization().normalize(a);
    x.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64
}

/// Triplets for every consecutive pair of the given `(dataset index,
/// trajectory)` list. Candidates for pair `(i, k)` come from streams
/// `0..K` of `derive_seed(seed, [i, k])`.
pub fn build_triplets_for(
    model: &Surrogate,
    trajs: &[(usize, &Trajectory)],
    k: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TripletRecord>, RewardError> {
    let pairs: Vec<(usize, usize)> = trajs
        .iter()
        .enumerate()
        .flat_map(|(slot, (_, tr))| (0..tr.len() - 1).map(move |s| (slot, s)))
        .collect();
    let time = model.time_axis();
    let built = par::try_map_range(exec, pairs.len(), |p| {
        let (slot, step) = pairs[p];
        let (id, tr) = trajs[slot];
        let u_t = tr.get(step);
        let truth = model.normalization().normalize(tr.get(step + 1));
        let cands = model.sample_candidates(
            u_t,
            time.t_norm(u_t.t()),
            k,
            derive_seed(seed, &[id as u64, step as u64]),
            Exec::Sequential,
        )?;
        let mse: Vec<f64> = cands
            .iter()
            .map(|c| normalized_mse(model, c, &truth))
            .collect();
        let Some(idx) = rank_candidates(&mse) else {
            return Ok(None);
        };
        let [b, m, w] = idx;
        let mut cands: Vec<Option<Snapshot>> = cands.into_iter().map(Some).collect();
        Ok::<_, RewardError>(Some(TripletRecord {
            trajectory: id,
            step,
            u_t: u_t.clone(),
            best: cands[b].take().expect("distinct ranks"),
            median: cands[m].take().expect("distinct ranks"),
            worst: cands[w].take().expect("distinct ranks"),
            mse: [mse[b], mse[m], mse[w]],
            candidate: idx,
        }))
    })?;
    Ok(built.into_iter().flatten().collect())
}

/// Triplets from the training split of `ds` (optionally only its first
/// `max_trajectories` trajectories).
pub fn build_prm_triplets(
    model: &Surrogate,
    ds: &Dataset,
    k: usize,
    seed: u64,
    max_trajectories: Option<usize>,
    exec: Exec,
) -> Result<Vec<TripletRecord>, RewardError> {
    if k < 3 {
        return Err(RewardError::InvalidInput(format!(
            "need at least 3 candidates per pair, got {k}"
        )));
    }
    let mut idx = ds.split_indices(Split::Train);
    if let Some(n) = max_trajectories {
        idx.truncate(n);
    }
    let trajs: Vec<(usize, &Trajectory)> = idx.iter().map(|&i| (i, &ds.trajectories[i])).collect();
    build_triplets_for(model, &trajs, k, seed, exec)
}

#[derive(Serialize, Deserialize)]
struct TripletMeta {
    trajectory: usize,
    step: usize,
    mse: [f64; 3],
    candidate: [usize; 3],
}

/// Writes triplets as a snapshot container of record type `TRIPLET`:
/// four snapshots per record (u_t, best, median, worst).
pub fn save_triplets(
    path: &Path,
    triplets: &[TripletRecord],
    extra: serde_json::Value,
) -> Result<(), RewardError> {
    let snaps: Vec<Snapshot> = triplets
        .iter()
        .flat_map(|t| {
            [
                t.u_t.clone(),
                t.best.clone(),
                t.median.clone(),
                t.worst.clone(),
            ]
        })
        .collect();
    let meta: Vec<TripletMeta> = triplets
        .iter()
        .map(|t| TripletMeta {
            trajectory: t.trajectory,
            step: t.step,
            mse: t.mse,
            candidate: t.candidate,
        })
        .collect();
    let meta = serde_json::json!({ "records": meta, "extra": extra });
    save_snapshots(path, TRIPLET_RECORD, &snaps, meta)?;
    Ok(())
}

pub fn load_triplets(path: &Path) -> Result<Vec<TripletRecord>, RewardError> {
    let (snaps, header) = load_snapshots(path)?;
    if header.record_type != TRIPLET_RECORD {
        return Err(RewardError::InvalidInput(format!(
            "{} holds '{}' records, not triplets",
            path.display(),
            header.record_type
        )));
    }
    let meta: Vec<TripletMeta> = serde_json::from_value(header.meta["records"].clone())
        .map_err(|e| RewardError::InvalidInput(format!("triplet metadata: {e}")))?;
    if snaps.len() != 4 * meta.len() {
        return Err(RewardError::InvalidInput(
            "triplet payload does not match metadata".into(),
        ));
    }
    let mut it = snaps.into_iter();
    Ok(meta
        .into_iter()
        .map(|m| TripletRecord {
            trajectory: m.trajectory,
            step: m.step,
            u_t: it.next().expect("length checked"),
            best: it.next().expect("length checked"),
            median: it.next().expect("length checked"),
            worst: it.next().expect("length checked"),
            mse: m.mse,
            candidate: m.candidate,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(triplet_loss(0.0, 0.2, 0.4, 0.1), 0.0);
        assert!((triplet_loss(0.1, 0.15, 0.3, 0.1) - 0.05).abs() < 1e-15);
        assert!((triplet_loss(0.5, 0.5, 0.5, 0.1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_candidates(&[0.3, 0.1, 0.2]), Some([1, 2, 0]));
        let mse: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let [b, m, w] = rank_candidates(&mse).unwrap();
        assert_eq!((mse[b], mse[m], mse[w]), (0.0, 50.0, 99.0));
        assert_eq!(rank_candidates(&[0.5; 5]), None);
        // Ties resolve to the lower index.
        assert_eq!(rank_candidates(&[1.0, 0.0, 0.0, 2.0]), Some([1, 0, 3]));
        assert_eq!(rank_candidates(&[1.0, 2.0]), None);
    }
}
