//! Rewards over transition pairs `(u_t, u_next)`: closed-form conservation
//! scores and a learned process reward model.

mod prm;
mod triplet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::euler::{EulerError, Snapshot};
use crate::nn::NnError;
use crate::surrogate::SurrogateError;

pub use prm::{
    prm_score, train_prm, Prm, PrmConfig, PrmEpoch, PrmReport, PrmTrainConfig, PRM_KIND,
};
pub use triplet::{
    build_prm_triplets, build_triplets_for, load_triplets, rank_candidates, save_triplets,
    triplet_loss, triplet_loss_grad, ScoreOrientation, TripletRecord,
};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("snapshots live on different grids")]
    GridMismatch,
    #[error("invalid reward input: {0}")]
    InvalidInput(String),
    /// The reward has no meaningful value for this input (e.g. a vanishing
    /// momentum denominator). Selection skips such candidates.
    #[error("reward undefined: {0}")]
    Undefined(String),
    #[error("PRM training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Euler(#[from] EulerError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub value: f64,
    pub model_id: String,
}

impl RewardScore {
    fn new(value: f64, model_id: &str) -> Self {
        Self {
            value,
            model_id: model_id.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X,
    Y,
}

fn same_grid(a: &Snapshot, b: &Snapshot) -> Result<(), RewardError> {
    if a.grid().compatible(b.grid()) {
        Ok(())
    } else {
        Err(RewardError::GridMismatch)
    }
}

fn finite(a: &Snapshot, b: &Snapshot) -> Result<(), RewardError> {
    if a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(RewardError::InvalidInput("non-finite snapshot".into()))
    }
}

/// `-|sum rho_next - sum rho_t| / sum rho_t`.
pub fn arm_mass(u_t: &Snapshot, u_next: &Snapshot) -> Result<RewardScore, RewardError> {
    same_grid(u_t, u_next)?;
    finite(u_t, u_next)?;
    let m0: f64 = u_t.rho().iter().sum();
    let m1: f64 = u_next.rho().iter().sum();
    if m0 <= 0.0 {
        return Err(RewardError::InvalidInput(format!(
            "total mass {m0} is not positive"
        )));
    }
    Ok(RewardScore::new(-(m1 - m0).abs() / m0, "arm_mass"))
}

fn momentum(u: &Snapshot, c: Component) -> f64 {
    let v = match c {
        Component::X => u.vx(),
        Component::Y => u.vy(),
    };
    u.rho().iter().zip(v).map(|(r, v)| r * v).sum()
}

/// `-|P_next - P_t| / |P_t|` for one momentum component. Undefined when
/// `|P_t| <= 1e-12 * cells`.
pub fn arm_momentum(
    u_t: &Snapshot,
    u_next: &Snapshot,
    component: Component,
) -> Result<RewardScore, RewardError> {
    same_grid(u_t, u_next)?;
    finite(u_t, u_next)?;
    let p0 = momentum(u_t, component);
    let p1 = momentum(u_next, component);
    let eps = 1e-12 * u_t.grid().cells() as f64;
    if p0.abs() <= eps {
        return Err(RewardError::Undefined(format!(
            "net {component:?} momentum {p0:e} is below {eps:e}"
        )));
    }
    let id = match component {
        Component::X => "arm_momentum_x",
        Component::Y => "arm_momentum_y",
    };
    Ok(RewardScore::new(-(p1 - p0).abs() / p0.abs(), id))
}

fn energy(u: &Snapshot, gamma: f64) -> f64 {
    let g1 = gamma - 1.0;
    (0..u.grid().cells())
        .map(|k| {
            let (r, vx, vy, p) = (u.rho()[k], u.vx()[k], u.vy()[k], u.p()[k]);
            p / g1 + 0.5 * r * (vx * vx + vy * vy)
        })
        .sum()
}

/// `-|E_next - E_t| / E_t` with `E = p/(gamma-1) + rho |v|^2 / 2` summed
/// over cells. The candidate is not required to be physical; the reference
/// total must be positive.
pub fn arm_energy(
    u_t: &Snapshot,
    u_next: &Snapshot,
    gamma: f64,
) -> Result<RewardScore, RewardError> {
    same_grid(u_t, u_next)?;
    finite(u_t, u_next)?;
    if gamma <= 1.0 {
        return Err(RewardError::InvalidInput(format!(
            "gamma {gamma} must exceed 1"
        )));
    }
    let e0 = energy(u_t, gamma);
    let e1 = energy(u_next, gamma);
    if e0 <= 0.0 {
        return Err(RewardError::InvalidInput(format!(
            "total energy {e0} is not positive"
        )));
    }
    Ok(RewardScore::new(-(e1 - e0).abs() / e0, "arm_energy"))
}
