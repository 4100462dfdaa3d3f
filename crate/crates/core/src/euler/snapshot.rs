use serde::{Deserialize, Serialize};

use super::{EulerError, GridSpec};

/// Physical channel order used everywhere: storage, model I/O, metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Rho = 0,
    Vx = 1,
    Vy = 2,
    P = 3,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Rho, Channel::Vx, Channel::Vy, Channel::P];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Rho => "rho",
            Channel::Vx => "vx",
            Channel::Vy => "vy",
            Channel::P => "p",
        }
    }
}

pub const N_CHANNELS: usize = 4;

/// Pointwise primitive state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub rho: f64,
    pub vx: f64,
    pub vy: f64,
    pub p: f64,
}

impl Primitive {
    pub const fn new(rho: f64, vx: f64, vy: f64, p: f64) -> Self {
        Self { rho, vx, vy, p }
    }

    pub fn is_physical(&self) -> bool {
        self.rho > 0.0 && self.p > 0.0 && self.vx.is_finite() && self.vy.is_finite()
    }

    pub fn total_energy(&self, gamma: f64) -> f64 {
        total_energy(self.rho, self.vx, self.vy, self.p, gamma)
    }
}

/// E = p/(gamma-1) + rho |v|^2 / 2
#[inline]
pub fn total_energy(rho: f64, vx: f64, vy: f64, p: f64, gamma: f64) -> f64 {
    p / (gamma - 1.0) + 0.5 * rho * (vx * vx + vy * vy)
}

/// Discrete domain totals (plain cell sums, no cell-volume factor).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub mass: f64,
    pub mom_x: f64,
    pub mom_y: f64,
    pub energy: f64,
}

impl Totals {
    pub fn as_array(&self) -> [f64; 4] {
        [self.mass, self.mom_x, self.mom_y, self.energy]
    }
}

/// One time slice of `(rho, vx, vy, p)` on a grid.
///
/// Solver output always satisfies positivity; surrogate predictions may not,
/// so construction only checks shapes. Use [`Snapshot::check_physical`] where
/// the physical invariants are required.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    grid: GridSpec,
    t: f64,
    fields: [Vec<f64>; N_CHANNELS],
}

impl Snapshot {
    pub fn new(grid: GridSpec, t: f64, fields: [Vec<f64>; N_CHANNELS]) -> Result<Self, EulerError> {
        let n = grid.cells();
        for (c, f) in fields.iter().enumerate() {
            if f.len() != n {
                return Err(EulerError::Shape(format!(
                    "channel {} has {} values, grid has {n} cells",
                    Channel::ALL[c].name(),
                    f.len()
                )));
            }
        }
        Ok(Self { grid, t, fields })
    }

    /// Builds a snapshot from channel-major data `[rho | vx | vy | p]`.
    pub fn from_channel_major(grid: GridSpec, t: f64, data: &[f64]) -> Result<Self, EulerError> {
        let n = grid.cells();
        if data.len() != N_CHANNELS * n {
            return Err(EulerError::Shape(format!(
                "expected {} values, got {}",
                N_CHANNELS * n,
                data.len()
            )));
        }
        let fields = std::array::from_fn(|c| data[c * n..(c + 1) * n].to_vec());
        Ok(Self { grid, t, fields })
    }

    pub fn uniform(grid: GridSpec, t: f64, state: Primitive) -> Self {
        let n = grid.cells();
        Self {
            grid,
            t,
            fields: [
                vec![state.rho; n],
                vec![state.vx; n],
                vec![state.vy; n],
                vec![state.p; n],
            ],
        }
    }

    /// Evaluates `f` at every cell centre.
    pub fn from_fn(grid: GridSpec, t: f64, f: impl Fn(f64, f64) -> Primitive) -> Self {
        let n = grid.cells();
        let mut fields: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.center(i, j);
                let s = f(x, y);
                fields[0].push(s.rho);
                fields[1].push(s.vx);
                fields[2].push(s.vy);
                fields[3].push(s.p);
            }
        }
        Self { grid, t, fields }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn field(&self, c: Channel) -> &[f64] {
        &self.fields[c as usize]
    }

    pub fn field_mut(&mut self, c: Channel) -> &mut [f64] {
        &mut self.fields[c as usize]
    }

    pub fn fields(&self) -> &[Vec<f64>; N_CHANNELS] {
        &self.fields
    }

    pub fn rho(&self) -> &[f64] {
        &self.fields[0]
    }

    pub fn vx(&self) -> &[f64] {
        &self.fields[1]
    }

    pub fn vy(&self) -> &[f64] {
        &self.fields[2]
    }

    pub fn p(&self) -> &[f64] {
        &self.fields[3]
    }

    pub fn primitive(&self, k: usize) -> Primitive {
        Primitive::new(
            self.fields[0][k],
            self.fields[1][k],
            self.fields[2][k],
            self.fields[3][k],
        )
    }

    /// Channel-major copy `[rho | vx | vy | p]`.
    pub fn to_channel_major(&self) -> Vec<f64> {
        self.fields.concat()
    }

    pub fn is_finite(&self) -> bool {
        self.fields.iter().flatten().all(|v| v.is_finite())
    }

    /// Positivity of density and pressure plus finiteness everywhere.
    pub fn check_physical(&self) -> Result<(), EulerError> {
        if !self.is_finite() {
            return Err(EulerError::NonFinite { t: self.t });
        }
        for k in 0..self.grid.cells() {
            let (rho, p) = (self.fields[0][k], self.fields[3][k]);
            if rho <= 0.0 || p <= 0.0 {
                return Err(EulerError::NonPositive {
                    t: self.t,
                    cell: k,
                    rho,
                    p,
                });
            }
        }
        Ok(())
    }

    pub fn min_rho(&self) -> f64 {
        self.rho().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_p(&self) -> f64 {
        self.p().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn totals(&self, gamma: f64) -> Totals {
        let mut t = Totals::default();
        for k in 0..self.grid.cells() {
            let s = self.primitive(k);
            t.mass += s.rho;
            t.mom_x += s.rho * s.vx;
            t.mom_y += s.rho * s.vy;
            t.energy += s.total_energy(gamma);
        }
        t
    }

    /// Periodic roll: the value at `(i, j)` moves to `(i + di, j + dj)`.
    pub fn shifted(&self, di: usize, dj: usize) -> Snapshot {
        let g = self.grid;
        let fields = std::array::from_fn(|c| {
            let src = &self.fields[c];
            let mut dst = vec![0.0; src.len()];
            for j in 0..g.ny {
                for i in 0..g.nx {
                    dst[g.index((i + di) % g.nx, (j + dj) % g.ny)] = src[g.index(i, j)];
                }
            }
            dst
        });
        Snapshot {
            grid: g,
            t: self.t,
            fields,
        }
    }
}
