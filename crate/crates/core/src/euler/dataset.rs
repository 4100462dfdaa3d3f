use serde::{Deserialize, Serialize};

use super::{
    solve_trajectory, EulerError, Family, GridSpec, ICSpec, Snapshot, SolverConfig, Trajectory,
    N_CHANNELS,
};
use crate::par::{self, Exec};
use crate::rng::{derive_seed, RngStream};

const SPLIT_STREAM: u64 = 0x5_9117;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.125,
            test: 0.125,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), EulerError> {
        let sum = self.train + self.val + self.test;
        if [self.train, self.val, self.test]
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(EulerError::InvalidConfig(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// (train, val, test) trajectory counts for `n` trajectories.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

impl Default for Normalization {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_CHANNELS],
            std: [1.0; N_CHANNELS],
        }
    }

    /// Mean and (population) standard deviation per channel over every cell
    /// of every snapshot. Degenerate channels get unit scale.
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut count = 0usize;
        let mut sum = [0.0; N_CHANNELS];
        let mut sq = [0.0; N_CHANNELS];
        let trajs: Vec<&Trajectory> = trajs.into_iter().collect();
        for traj in &trajs {
            for s in traj.snapshots() {
                count += s.grid().cells();
                for (c, f) in s.fields().iter().enumerate() {
                    sum[c] += f.iter().sum::<f64>();
                }
            }
        }
        if count == 0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / count as f64);
        for traj in &trajs {
            for s in traj.snapshots() {
                for (c, f) in s.fields().iter().enumerate() {
                    sq[c] += f.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
        }
        let std = std::array::from_fn(|c| {
            let sd = (sq[c] / count as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    /// Channel-major normalized values `[rho | vx | vy | p]`.
    pub fn normalize(&self, s: &Snapshot) -> Vec<f64> {
        let mut out = Vec::with_capacity(N_CHANNELS * s.grid().cells());
        for (c, f) in s.fields().iter().enumerate() {
            let (m, inv) = (self.mean[c], 1.0 / self.std[c]);
            out.extend(f.iter().map(|v| (v - m) * inv));
        }
        out
    }

    pub fn denormalize(
        &self,
        grid: GridSpec,
        t: f64,
        data: &[f64],
    ) -> Result<Snapshot, EulerError> {
        let n = grid.cells();
        if data.len() != N_CHANNELS * n {
            return Err(EulerError::Shape(format!(
                "expected {} normalized values, got {}",
                N_CHANNELS * n,
                data.len()
            )));
        }
        let fields = std::array::from_fn(|c| {
            data[c * n..(c + 1) * n]
                .iter()
                .map(|v| v * self.std[c] + self.mean[c])
                .collect()
        });
        Snapshot::new(grid, t, fields)
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub families: Vec<Family>,
    pub n_per_family: usize,
    pub grid: GridSpec,
    pub seed: u64,
    pub splits: SplitFractions,
    pub solver: SolverConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub trajectories: Vec<Trajectory>,
    pub splits: Vec<Split>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn grid(&self) -> &GridSpec {
        &self.spec.grid
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(t, _)| t)
            .collect()
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == which)
            .collect()
    }
}

/// Seed of the `index`-th trajectory of `family` in a dataset seeded `seed`.
pub fn trajectory_seed(seed: u64, family: Family, index: usize) -> u64 {
    derive_seed(seed, &[family as u64, index as u64])
}

/// Solves `n_per_family` trajectories of every family, assigns splits by a
/// seeded shuffle, and computes normalization on the train split.
pub fn generate_dataset(spec: &DatasetSpec, exec: Exec) -> Result<Dataset, EulerError> {
    spec.splits.validate()?;
    spec.grid.validate()?;
    let ics: Vec<ICSpec> = spec
        .families
        .iter()
        .flat_map(|&f| {
            (0..spec.n_per_family).map(move |i| ICSpec::sample(f, trajectory_seed(spec.seed, f, i)))
        })
        .collect();
    let trajectories = par::try_map_range(exec, ics.len(), |i| {
        solve_trajectory(&ics[i], &spec.grid, &spec.solver)
    })?;

    let n = trajectories.len();
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(spec.seed, SPLIT_STREAM).shuffle(&mut order);
    let (n_train, n_val, _) = spec.splits.counts(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let normalization = Normalization::from_trajectories(
        trajectories
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(t, _)| t),
    );
    Ok(Dataset {
        spec: spec.clone(),
        trajectories,
        splits,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> DatasetSpec {
        DatasetSpec {
            families: vec![Family::Rp],
            n_per_family: n,
            grid: GridSpec::square(8).unwrap(),
            seed: 5,
            splits: SplitFractions::default(),
            solver: SolverConfig {
                n_times: 3,
                t_final: 0.1,
                ..SolverConfig::default()
            },
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(SplitFractions::default().counts(128), (96, 16, 16));
        assert_eq!(SplitFractions::default().counts(0), (0, 0, 0));
        let bad = SplitFractions {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_valid() {
        let d = generate_dataset(&spec(0), Exec::Sequential).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.normalization, Normalization::identity());
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let d = generate_dataset(&spec(16), Exec::Parallel).unwrap();
        let tr = d.split_indices(Split::Train);
        let va = d.split_indices(Split::Val);
        let te = d.split_indices(Split::Test);
        assert_eq!((tr.len(), va.len(), te.len()), (12, 2, 2));
        let mut all: Vec<usize> = tr.into_iter().chain(va).chain(te).collect();
        all.sort();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_uses_train_split_only() {
        let d = generate_dataset(&spec(16), Exec::Sequential).unwrap();
        let expect = Normalization::from_trajectories(d.split(Split::Train));
        assert_eq!(d.normalization, expect);
        let all = Normalization::from_trajectories(&d.trajectories);
        assert_ne!(d.normalization, all);
    }

    #[test]
    fn normalize_round_trip() {
        let d = generate_dataset(&spec(4), Exec::Sequential).unwrap();
        let s = d.trajectories[0].get(1);
        let z = d.normalization.normalize(s);
        let back = d.normalization.denormalize(*s.grid(), s.t(), &z).unwrap();
        for c in 0..4 {
            for (a, b) in back.fields()[c].iter().zip(&s.fields()[c]) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
