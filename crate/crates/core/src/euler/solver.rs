//! Second-order finite-volume scheme for the 2D Euler equations.
//!
//! Unsplit dimension-by-dimension update: MUSCL reconstruction of primitive
//! variables with the minmod limiter, Rusanov (local Lax-Friedrichs)
//! interface fluxes, and two-stage SSP Runge-Kutta in time. Every cell is
//! updated by a difference of face fluxes, and under periodic boundaries each
//! face flux is shared by exactly two cells, so the discrete totals of mass,
//! momentum and energy telescope.

use serde::{Deserialize, Serialize};

use super::{
    make_initial_condition, Boundary, EulerError, GridSpec, ICSpec, Snapshot, Trajectory,
    DEFAULT_GAMMA, N_TIMES, T_FINAL,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub gamma: f64,
    pub cfl: f64,
    /// Stored snapshots per trajectory, uniformly spaced on `[0, t_final]`.
    pub n_times: usize,
    pub t_final: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            cfl: 0.4,
            n_times: N_TIMES,
            t_final: T_FINAL,
            max_steps: 1_000_000,
        }
    }
}

type Fields = [Vec<f64>; 4];

#[inline]
fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Conserved vector (rho, rho u_n, rho u_t, E) of a primitive state given in
/// face-normal coordinates.
#[inline]
fn conserved(w: [f64; 4], gamma: f64) -> [f64; 4] {
    let [rho, un, ut, p] = w;
    [
        rho,
        rho * un,
        rho * ut,
        p / (gamma - 1.0) + 0.5 * rho * (un * un + ut * ut),
    ]
}

#[inline]
fn normal_flux(w: [f64; 4], e: f64) -> [f64; 4] {
    let [rho, un, ut, p] = w;
    let m = rho * un;
    [m, m * un + p, m * ut, un * (e + p)]
}

#[inline]
fn rusanov(wl: [f64; 4], wr: [f64; 4], gamma: f64) -> [f64; 4] {
    let ul = conserved(wl, gamma);
    let ur = conserved(wr, gamma);
    let fl = normal_flux(wl, ul[3]);
    let fr = normal_flux(wr, ur[3]);
    let cl = (gamma * wl[3] / wl[0]).sqrt();
    let cr = (gamma * wr[3] / wr[0]).sqrt();
    let a = (wl[1].abs() + cl).max(wr[1].abs() + cr);
    std::array::from_fn(|q| 0.5 * (fl[q] + fr[q]) - 0.5 * a * (ur[q] - ul[q]))
}

fn to_conserved(s: &Snapshot, gamma: f64) -> Fields {
    let n = s.grid().cells();
    let mut u: Fields = std::array::from_fn(|_| vec![0.0; n]);
    for k in 0..n {
        let w = s.primitive(k);
        u[0][k] = w.rho;
        u[1][k] = w.rho * w.vx;
        u[2][k] = w.rho * w.vy;
        u[3][k] = w.total_energy(gamma);
    }
    u
}

fn to_primitive(u: &Fields, gamma: f64, t: f64) -> Result<Fields, EulerError> {
    let n = u[0].len();
    let mut w: Fields = std::array::from_fn(|_| vec![0.0; n]);
    for k in 0..n {
        let rho = u[0][k];
        let vx = u[1][k] / rho;
        let vy = u[2][k] / rho;
        let p = (gamma - 1.0) * (u[3][k] - 0.5 * rho * (vx * vx + vy * vy));
        if !(rho.is_finite() && p.is_finite() && vx.is_finite() && vy.is_finite()) {
            return Err(EulerError::NonFinite { t });
        }
        if rho <= 0.0 || p <= 0.0 {
            return Err(EulerError::NonPositive { t, cell: k, rho, p });
        }
        w[0][k] = rho;
        w[1][k] = vx;
        w[2][k] = vy;
        w[3][k] = p;
    }
    Ok(w)
}

/// Largest stable time step for Courant number `cfl`.
pub fn stable_dt(s: &Snapshot, gamma: f64, cfl: f64) -> f64 {
    let g = s.grid();
    let (dx, dy) = (g.dx(), g.dy());
    let mut rate: f64 = 0.0;
    for k in 0..g.cells() {
        let w = s.primitive(k);
        let c = (gamma * w.p / w.rho).sqrt();
        rate = rate.max((w.vx.abs() + c) / dx + (w.vy.abs() + c) / dy);
    }
    if rate > 0.0 {
        cfl / rate
    } else {
        f64::INFINITY
    }
}

/// Flux divergence along one line of cells, accumulated into `rhs`.
struct LineSweep {
    // primitive line with two ghost cells on each side, face-normal ordering
    w: [Vec<f64>; 4],
    flux: Vec<[f64; 4]>,
}

impl LineSweep {
    fn new(n: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| vec![0.0; n + 4]),
            flux: vec![[0.0; 4]; n + 1],
        }
    }

    /// `cells` yields the flat indices of the line in order; `normal` is the
    /// velocity channel normal to the faces (1 for x, 2 for y).
    fn run(
        &mut self,
        prim: &Fields,
        cells: &[usize],
        normal: usize,
        boundary: Boundary,
        inv_h: f64,
        gamma: f64,
        rhs: &mut Fields,
    ) {
        let n = cells.len();
        let tangent = 3 - normal;
        let order = [0, normal, tangent, 3];
        for m in 0..n + 4 {
            let src = match boundary {
                Boundary::Periodic => (m + 2 * n - 2) % n,
                Boundary::Transmissive => m.saturating_sub(2).min(n - 1),
            };
            let k = cells[src];
            for q in 0..4 {
                self.w[q][m] = prim[order[q]][k];
            }
        }
        for f in 0..=n {
            // face f sits between line cells f-1 and f, i.e. buffer f+1 and f+2
            let (a, b) = (f + 1, f + 2);
            let mut wl = [0.0; 4];
            let mut wr = [0.0; 4];
            for q in 0..4 {
                let w = &self.w[q];
                wl[q] = w[a] + 0.5 * minmod(w[a] - w[a - 1], w[b] - w[a]);
                wr[q] = w[b] - 0.5 * minmod(w[b] - w[a], w[b + 1] - w[b]);
            }
            self.flux[f] = rusanov(wl, wr, gamma);
        }
        for (i, &k) in cells.iter().enumerate() {
            for q in 0..4 {
                rhs[order[q]][k] -= (self.flux[i + 1][q] - self.flux[i][q]) * inv_h;
            }
        }
    }
}

fn flux_divergence(grid: &GridSpec, prim: &Fields, gamma: f64) -> Fields {
    let n = grid.cells();
    let mut rhs: Fields = std::array::from_fn(|_| vec![0.0; n]);
    let mut row = LineSweep::new(grid.nx);
    let mut line = vec![0; grid.nx];
    for j in 0..grid.ny {
        for (i, c) in line.iter_mut().enumerate() {
            *c = grid.index(i, j);
        }
        row.run(
            prim,
            &line,
            1,
            grid.boundary_x,
            1.0 / grid.dx(),
            gamma,
            &mut rhs,
        );
    }
    let mut col = LineSweep::new(grid.ny);
    let mut line = vec![0; grid.ny];
    for i in 0..grid.nx {
        for (j, c) in line.iter_mut().enumerate() {
            *c = grid.index(i, j);
        }
        col.run(
            prim,
            &line,
            2,
            grid.boundary_y,
            1.0 / grid.dy(),
            gamma,
            &mut rhs,
        );
    }
    rhs
}

/// One SSP-RK2 step of size `dt`.
pub fn fv_step(u: &Snapshot, dt: f64, gamma: f64) -> Result<Snapshot, EulerError> {
    u.check_physical()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(EulerError::Cfl {
            dt,
            limit: f64::NAN,
        });
    }
    let limit = stable_dt(u, gamma, 1.0);
    if dt > limit {
        return Err(EulerError::Cfl { dt, limit });
    }
    let grid = *u.grid();
    let t1 = u.t() + dt;
    let u0 = to_conserved(u, gamma);
    let w0 = to_primitive(&u0, gamma, u.t())?;
    let l0 = flux_divergence(&grid, &w0, gamma);
    let u1: Fields =
        std::array::from_fn(|q| u0[q].iter().zip(&l0[q]).map(|(a, l)| a + dt * l).collect());
    let w1 = to_primitive(&u1, gamma, t1)?;
    let l1 = flux_divergence(&grid, &w1, gamma);
    let u2: Fields = std::array::from_fn(|q| {
        u0[q]
            .iter()
            .zip(&u1[q])
            .zip(&l1[q])
            .map(|((a, b), l)| 0.5 * a + 0.5 * (b + dt * l))
            .collect()
    });
    let w2 = to_primitive(&u2, gamma, t1)?;
    Snapshot::new(grid, t1, w2)
}

/// Advances `initial` through `cfg.n_times` uniformly spaced output times.
pub fn solve_from(initial: Snapshot, cfg: &SolverConfig) -> Result<Vec<Snapshot>, EulerError> {
    initial.check_physical()?;
    if cfg.n_times < 2 {
        return Err(EulerError::InvalidConfig(
            "need at least two output times".into(),
        ));
    }
    let intervals = (cfg.n_times - 1) as f64;
    let mut out = Vec::with_capacity(cfg.n_times);
    let mut cur = initial.with_time(0.0);
    out.push(cur.clone());
    let mut steps = 0usize;
    for k in 1..cfg.n_times {
        let target = cfg.t_final * k as f64 / intervals;
        loop {
            let remaining = target - cur.t();
            if remaining <= 1e-14 * cfg.t_final {
                break;
            }
            let dt = stable_dt(&cur, cfg.gamma, cfg.cfl).min(remaining);
            let t_before = cur.t();
            cur = fv_step(&cur, dt, cfg.gamma).map_err(|e| EulerError::Solver {
                t: t_before,
                source: Box::new(e),
            })?;
            steps += 1;
            if steps > cfg.max_steps {
                return Err(EulerError::InvalidConfig(format!(
                    "exceeded {} solver steps before t = {target}",
                    cfg.max_steps
                )));
            }
        }
        cur = cur.with_time(target);
        out.push(cur.clone());
    }
    Ok(out)
}

/// Realizes the IC and solves it on the standard output schedule.
pub fn solve_trajectory(
    spec: &ICSpec,
    grid: &GridSpec,
    cfg: &SolverConfig,
) -> Result<Trajectory, EulerError> {
    let initial = make_initial_condition(spec, grid)?;
    let snapshots = solve_from(initial, cfg)?;
    Trajectory::new(spec.clone(), snapshots)
}
