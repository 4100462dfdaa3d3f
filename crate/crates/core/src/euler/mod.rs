//! Ground-truth compressible Euler simulation on a periodic unit square.

mod dataset;
mod grid;
mod ic;
mod snapshot;
mod solver;

pub use dataset::{generate_dataset, Dataset, DatasetSpec, Normalization, Split, SplitFractions};
pub use grid::{Boundary, GridSpec};
pub use ic::{make_initial_condition, post_shock_state, Family, GaussBump, ICSpec, IcParams};
pub use snapshot::{total_energy, Channel, Primitive, Snapshot, Totals, N_CHANNELS};
pub use solver::{fv_step, solve_from, solve_trajectory, stable_dt, SolverConfig};

use thiserror::Error;

/// Ratio of specific heats of an ideal diatomic gas.
pub const DEFAULT_GAMMA: f64 = 1.4;
/// Snapshots stored per trajectory.
pub const N_TIMES: usize = 21;
pub const T_FINAL: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EulerError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid initial condition: {0}")]
    InvalidIc(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("non-positive state at t = {t}, cell {cell}: rho = {rho}, p = {p}")]
    NonPositive {
        t: f64,
        cell: usize,
        rho: f64,
        p: f64,
    },
    #[error("time step {dt} exceeds the stability limit {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("solver failed at t = {t}: {source}")]
    Solver {
        t: f64,
        #[source]
        source: Box<EulerError>,
    },
}

/// Ordered snapshots of one solve, starting from the realized IC.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    ic: ICSpec,
    snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn new(ic: ICSpec, snapshots: Vec<Snapshot>) -> Result<Self, EulerError> {
        if snapshots.len() < 2 {
            return Err(EulerError::Shape(
                "a trajectory needs at least two snapshots".into(),
            ));
        }
        let grid = *snapshots[0].grid();
        for w in snapshots.windows(2) {
            if !(w[1].t() > w[0].t()) {
                return Err(EulerError::Shape("snapshot times must increase".into()));
            }
            if w[1].grid() != &grid {
                return Err(EulerError::Shape("snapshots must share a grid".into()));
            }
        }
        Ok(Self { ic, snapshots })
    }

    pub fn ic(&self) -> &ICSpec {
        &self.ic
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn get(&self, k: usize) -> &Snapshot {
        &self.snapshots[k]
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(Snapshot::t).collect()
    }

    pub fn grid(&self) -> &GridSpec {
        self.snapshots[0].grid()
    }

    /// Largest relative change of each discrete total over the trajectory,
    /// ordered (mass, x-momentum, y-momentum, energy). Each change is scaled
    /// by the initial sum of absolute cell values, which equals the plain
    /// total for mass and energy and stays meaningful for momenta whose net
    /// total is zero.
    pub fn conservation_drift(&self, gamma: f64) -> [f64; 4] {
        let first = &self.snapshots[0];
        let t0 = first.totals(gamma).as_array();
        let n = first.grid().cells();
        let mut scale = [0.0; 4];
        for k in 0..n {
            let w = first.primitive(k);
            scale[0] += w.rho.abs();
            scale[1] += (w.rho * w.vx).abs();
            scale[2] += (w.rho * w.vy).abs();
            scale[3] += w.total_energy(gamma).abs();
        }
        let mut drift = [0.0f64; 4];
        for s in &self.snapshots[1..] {
            let t = s.totals(gamma).as_array();
            for q in 0..4 {
                if scale[q] > 0.0 {
                    drift[q] = drift[q].max((t[q] - t0[q]).abs() / scale[q]);
                }
            }
        }
        drift
    }
}
