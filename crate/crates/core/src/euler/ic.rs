//! Initial-condition families.
//!
//! Six families loosely modelled on the compressible-Euler benchmark suites:
//! four "pretraining" families (axis-aligned Riemann problems, curved
//! Riemann problems, Gaussian bumps, Kelvin-Helmholtz shear layers) and two
//! "downstream" families (Riemann problems with perturbed interfaces and a
//! Richtmyer-Meshkov-style shock/interface setup). Parameter ranges are fixed
//! constants chosen so every draw has strictly positive density and pressure.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EulerError, GridSpec, Primitive, Snapshot, DEFAULT_GAMMA};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Rp,
    Crp,
    Gauss,
    Kh,
    Rpui,
    Rm,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Rp,
        Family::Crp,
        Family::Gauss,
        Family::Kh,
        Family::Rpui,
        Family::Rm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Rp => "rp",
            Family::Crp => "crp",
            Family::Gauss => "gauss",
            Family::Kh => "kh",
            Family::Rpui => "rpui",
            Family::Rm => "rm",
        }
    }

    fn stream_id(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = EulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EulerError::InvalidIc(format!("unknown family '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussBump {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub amp_rho: f64,
    pub amp_p: f64,
}

/// Family-specific parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IcParams {
    /// Quadrant states ordered NE, NW, SW, SE around the split point.
    Rp {
        x0: f64,
        y0: f64,
        states: [Primitive; 4],
    },
    /// `inside` within the curve r(theta) = r0 (1 + sum_k a_k sin(k theta + phi_k)).
    Crp {
        cx: f64,
        cy: f64,
        r0: f64,
        modes: Vec<(u32, f64, f64)>,
        inside: Primitive,
        outside: Primitive,
    },
    Gauss {
        background: Primitive,
        bumps: Vec<GaussBump>,
    },
    /// Dense band `y_lo <= y < y_hi` moving at `+shear`, the rest at `-shear`;
    /// vy = amp sin(2 pi mode x).
    Kh {
        shear: f64,
        rho_in: f64,
        rho_out: f64,
        p: f64,
        amp: f64,
        mode: u32,
        y_lo: f64,
        y_hi: f64,
    },
    /// Quadrant states separated by tilted, sinusoidally displaced interfaces
    /// x = x0 + tilt_x (y - 1/2) + amp_x sin(2 pi mode_x y + phase_x) and the
    /// analogous y interface.
    Rpui {
        x0: f64,
        y0: f64,
        tilt_x: f64,
        tilt_y: f64,
        amp_x: f64,
        amp_y: f64,
        mode_x: u32,
        mode_y: u32,
        phase_x: f64,
        phase_y: f64,
        states: [Primitive; 4],
    },
    /// Post-shock gas for x < shock_x, light gas up to the corrugated
    /// interface x = interface_x + amp sin(2 pi mode y + phase), heavy gas
    /// beyond it.
    Rm {
        shock_x: f64,
        interface_x: f64,
        amp: f64,
        mode: u32,
        phase: f64,
        post_shock: Primitive,
        light: Primitive,
        heavy: Primitive,
    },
}

impl IcParams {
    pub fn family(&self) -> Family {
        match self {
            IcParams::Rp { .. } => Family::Rp,
            IcParams::Crp { .. } => Family::Crp,
            IcParams::Gauss { .. } => Family::Gauss,
            IcParams::Kh { .. } => Family::Kh,
            IcParams::Rpui { .. } => Family::Rpui,
            IcParams::Rm { .. } => Family::Rm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ICSpec {
    pub family: Family,
    pub params: IcParams,
    pub seed: u64,
}

fn random_state(rng: &mut RngStream) -> Primitive {
    Primitive::new(
        rng.uniform_in(0.2, 1.0),
        rng.uniform_in(-0.5, 0.5),
        rng.uniform_in(-0.5, 0.5),
        rng.uniform_in(0.2, 1.0),
    )
}

/// Post-shock state behind a right-moving shock of Mach `mach` running into
/// `pre` (at rest), from the Rankine-Hugoniot relations.
pub fn post_shock_state(pre: Primitive, mach: f64, gamma: f64) -> Primitive {
    let m2 = mach * mach;
    let rho = pre.rho * (gamma + 1.0) * m2 / ((gamma - 1.0) * m2 + 2.0);
    let p = pre.p * (2.0 * gamma * m2 - (gamma - 1.0)) / (gamma + 1.0);
    let c = (gamma * pre.p / pre.rho).sqrt();
    let u = pre.vx + c * 2.0 / (gamma + 1.0) * (mach - 1.0 / mach);
    Primitive::new(rho, u, pre.vy, p)
}

impl ICSpec {
    pub fn new(params: IcParams, seed: u64) -> Self {
        Self {
            family: params.family(),
            params,
            seed,
        }
    }

    /// Draws family parameters deterministically from `seed`.
    pub fn sample(family: Family, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, family.stream_id());
        let params = match family {
            Family::Rp => IcParams::Rp {
                x0: rng.uniform_in(0.3, 0.7),
                y0: rng.uniform_in(0.3, 0.7),
                states: std::array::from_fn(|_| random_state(&mut rng)),
            },
            Family::Crp => {
                let n_modes = 2 + rng.below(3) as u32;
                let modes = (0..n_modes)
                    .map(|k| {
                        (
                            k + 2,
                            rng.uniform_in(-0.1, 0.1),
                            rng.uniform_in(0.0, 2.0 * PI),
                        )
                    })
                    .collect();
                IcParams::Crp {
                    cx: rng.uniform_in(0.4, 0.6),
                    cy: rng.uniform_in(0.4, 0.6),
                    r0: rng.uniform_in(0.15, 0.3),
                    modes,
                    inside: random_state(&mut rng),
                    outside: random_state(&mut rng),
                }
            }
            Family::Gauss => {
                let n = 1 + rng.below(4) as usize;
                let bumps = (0..n)
                    .map(|_| GaussBump {
                        x: rng.uniform(),
                        y: rng.uniform(),
                        width: rng.uniform_in(0.05, 0.15),
                        amp_rho: rng.uniform_in(-0.2, 0.5),
                        amp_p: rng.uniform_in(-0.2, 0.5),
                    })
                    .collect();
                IcParams::Gauss {
                    background: Primitive::new(
                        1.0,
                        rng.uniform_in(-0.2, 0.2),
                        rng.uniform_in(-0.2, 0.2),
                        1.0,
                    ),
                    bumps,
                }
            }
            Family::Kh => {
                let half = rng.uniform_in(0.2, 0.3);
                IcParams::Kh {
                    shear: rng.uniform_in(0.3, 0.7),
                    rho_in: rng.uniform_in(1.5, 2.5),
                    rho_out: rng.uniform_in(0.8, 1.2),
                    p: 2.5,
                    amp: rng.uniform_in(0.005, 0.05),
                    mode: 1 + rng.below(4) as u32,
                    y_lo: 0.5 - half,
                    y_hi: 0.5 + half,
                }
            }
            Family::Rpui => IcParams::Rpui {
                x0: rng.uniform_in(0.3, 0.7),
                y0: rng.uniform_in(0.3, 0.7),
                tilt_x: rng.uniform_in(-0.3, 0.3),
                tilt_y: rng.uniform_in(-0.3, 0.3),
                amp_x: rng.uniform_in(0.02, 0.08),
                amp_y: rng.uniform_in(0.02, 0.08),
                mode_x: 1 + rng.below(3) as u32,
                mode_y: 1 + rng.below(3) as u32,
                phase_x: rng.uniform_in(0.0, 2.0 * PI),
                phase_y: rng.uniform_in(0.0, 2.0 * PI),
                states: std::array::from_fn(|_| random_state(&mut rng)),
            },
            Family::Rm => {
                let light = Primitive::new(1.0, 0.0, 0.0, 1.0);
                let heavy = Primitive::new(rng.uniform_in(2.0, 4.0), 0.0, 0.0, 1.0);
                let mach = rng.uniform_in(1.2, 2.0);
                IcParams::Rm {
                    shock_x: rng.uniform_in(0.1, 0.2),
                    interface_x: rng.uniform_in(0.35, 0.5),
                    amp: rng.uniform_in(0.02, 0.06),
                    mode: 1 + rng.below(4) as u32,
                    phase: rng.uniform_in(0.0, 2.0 * PI),
                    post_shock: post_shock_state(light, mach, DEFAULT_GAMMA),
                    light,
                    heavy,
                }
            }
        };
        Self::new(params, seed)
    }

    fn validate_params(&self) -> Result<(), EulerError> {
        if self.params.family() != self.family {
            return Err(EulerError::InvalidIc(format!(
                "family {} does not match parameters for {}",
                self.family,
                self.params.family()
            )));
        }
        let bad = |what: &str, s: &Primitive| {
            Err(EulerError::InvalidIc(format!(
                "{what} state {s:?} is not physical (need rho > 0, p > 0)"
            )))
        };
        match &self.params {
            IcParams::Rp { states, .. } | IcParams::Rpui { states, .. } => {
                for s in states {
                    if !s.is_physical() {
                        return bad("quadrant", s);
                    }
                }
            }
            IcParams::Crp {
                r0,
                modes,
                inside,
                outside,
                ..
            } => {
                for s in [inside, outside] {
                    if !s.is_physical() {
                        return bad("region", s);
                    }
                }
                let worst: f64 = modes.iter().map(|m| m.1.abs()).sum();
                if *r0 <= 0.0 || worst >= 1.0 {
                    return Err(EulerError::InvalidIc(
                        "interface radius must stay positive".into(),
                    ));
                }
            }
            IcParams::Gauss { background, bumps } => {
                if !background.is_physical() {
                    return bad("background", background);
                }
                if bumps.iter().any(|b| b.width <= 0.0) {
                    return Err(EulerError::InvalidIc("bump width must be positive".into()));
                }
            }
            IcParams::Kh {
                rho_in, rho_out, p, ..
            } => {
                if *rho_in <= 0.0 || *rho_out <= 0.0 || *p <= 0.0 {
                    return Err(EulerError::InvalidIc(
                        "shear layer densities and pressure must be positive".into(),
                    ));
                }
            }
            IcParams::Rm {
                post_shock,
                light,
                heavy,
                ..
            } => {
                for s in [post_shock, light, heavy] {
                    if !s.is_physical() {
                        return bad("shock/interface", s);
                    }
                }
            }
        }
        Ok(())
    }
}

fn quadrant(states: &[Primitive; 4], east: bool, north: bool) -> Primitive {
    match (east, north) {
        (true, true) => states[0],
        (false, true) => states[1],
        (false, false) => states[2],
        (true, false) => states[3],
    }
}

/// Minimum-image distance component on a periodic unit interval.
fn periodic_delta(a: f64, b: f64, len: f64) -> f64 {
    let d = (a - b).rem_euclid(len);
    if d > 0.5 * len {
        d - len
    } else {
        d
    }
}

/// Realizes `spec` at cell centres of `grid` as the t = 0 snapshot.
pub fn make_initial_condition(spec: &ICSpec, grid: &GridSpec) -> Result<Snapshot, EulerError> {
    grid.validate()?;
    spec.validate_params()?;
    let g = *grid;
    let snap = match &spec.params {
        IcParams::Rp { x0, y0, states } => {
            Snapshot::from_fn(g, 0.0, |x, y| quadrant(states, x >= *x0, y >= *y0))
        }
        IcParams::Crp {
            cx,
            cy,
            r0,
            modes,
            inside,
            outside,
        } => Snapshot::from_fn(g, 0.0, |x, y| {
            let dx = periodic_delta(x, *cx, g.lx);
            let dy = periodic_delta(y, *cy, g.ly);
            let theta = dy.atan2(dx);
            let r = r0
                * (1.0
                    + modes
                        .iter()
                        .map(|&(k, a, phi)| a * (k as f64 * theta + phi).sin())
                        .sum::<f64>());
            if dx.hypot(dy) < r {
                *inside
            } else {
                *outside
            }
        }),
        IcParams::Gauss { background, bumps } => Snapshot::from_fn(g, 0.0, |x, y| {
            let mut s = *background;
            for b in bumps {
                let dx = periodic_delta(x, b.x, g.lx);
                let dy = periodic_delta(y, b.y, g.ly);
                let w = (-(dx * dx + dy * dy) / (2.0 * b.width * b.width)).exp();
                s.rho += b.amp_rho * w;
                s.p += b.amp_p * w;
            }
            s
        }),
        IcParams::Kh {
            shear,
            rho_in,
            rho_out,
            p,
            amp,
            mode,
            y_lo,
            y_hi,
        } => Snapshot::from_fn(g, 0.0, |x, y| {
            let inside = y >= *y_lo && y < *y_hi;
            let vy = amp * (2.0 * PI * *mode as f64 * x).sin();
            if inside {
                Primitive::new(*rho_in, *shear, vy, *p)
            } else {
                Primitive::new(*rho_out, -*shear, vy, *p)
            }
        }),
        IcParams::Rpui {
            x0,
            y0,
            tilt_x,
            tilt_y,
            amp_x,
            amp_y,
            mode_x,
            mode_y,
            phase_x,
            phase_y,
            states,
        } => Snapshot::from_fn(g, 0.0, |x, y| {
            let xi =
                x0 + tilt_x * (y - 0.5) + amp_x * (2.0 * PI * *mode_x as f64 * y + phase_x).sin();
            let yi =
                y0 + tilt_y * (x - 0.5) + amp_y * (2.0 * PI * *mode_y as f64 * x + phase_y).sin();
            quadrant(states, x >= xi, y >= yi)
        }),
        IcParams::Rm {
            shock_x,
            interface_x,
            amp,
            mode,
            phase,
            post_shock,
            light,
            heavy,
        } => Snapshot::from_fn(g, 0.0, |x, y| {
            let xi = interface_x + amp * (2.0 * PI * *mode as f64 * y + phase).sin();
            if x < *shock_x {
                *post_shock
            } else if x < xi {
                *light
            } else {
                *heavy
            }
        }),
    };
    snap.check_physical()
        .map_err(|e| EulerError::InvalidIc(format!("initial condition is not physical: {e}")))?;
    Ok(snap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_samples_physical_states() {
        let g = GridSpec::square(32).unwrap();
        for fam in Family::ALL {
            for seed in 0..20 {
                let spec = ICSpec::sample(fam, seed);
                let s = make_initial_condition(&spec, &g).unwrap();
                assert_eq!(s.t(), 0.0);
                assert!(s.min_rho() > 0.0 && s.min_p() > 0.0, "{fam} seed {seed}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        for fam in Family::ALL {
            assert_eq!(ICSpec::sample(fam, 11), ICSpec::sample(fam, 11));
            assert_ne!(ICSpec::sample(fam, 11), ICSpec::sample(fam, 12));
        }
    }

    #[test]
    fn zero_amplitude_gauss_is_uniform() {
        let g = GridSpec::square(16).unwrap();
        let bg = Primitive::new(1.0, 0.1, -0.2, 1.0);
        let bumps = vec![GaussBump {
            x: 0.5,
            y: 0.5,
            width: 0.1,
            amp_rho: 0.0,
            amp_p: 0.0,
        }];
        let s = make_initial_condition(
            &ICSpec::new(
                IcParams::Gauss {
                    background: bg,
                    bumps,
                },
                0,
            ),
            &g,
        )
        .unwrap();
        assert_eq!(s, Snapshot::uniform(g, 0.0, bg));
    }

    #[test]
    fn equal_quadrants_are_uniform() {
        let g = GridSpec::square(16).unwrap();
        let st = Primitive::new(0.7, 0.1, 0.2, 0.9);
        let spec = ICSpec::new(
            IcParams::Rp {
                x0: 0.4,
                y0: 0.6,
                states: [st; 4],
            },
            0,
        );
        assert_eq!(
            make_initial_condition(&spec, &g).unwrap(),
            Snapshot::uniform(g, 0.0, st)
        );
    }

    #[test]
    fn kh_shear_profile_matches_closed_form() {
        let g = GridSpec::square(32).unwrap();
        let spec = ICSpec::new(
            IcParams::Kh {
                shear: 0.5,
                rho_in: 2.0,
                rho_out: 1.0,
                p: 2.5,
                amp: 0.01,
                mode: 2,
                y_lo: 0.25,
                y_hi: 0.75,
            },
            0,
        );
        let s = make_initial_condition(&spec, &g).unwrap();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let (x, y) = g.center(i, j);
                let expect_vx = if (0.25..0.75).contains(&y) { 0.5 } else { -0.5 };
                let k = g.index(i, j);
                assert_eq!(s.vx()[k], expect_vx);
                assert_eq!(s.vy()[k], 0.01 * (4.0 * PI * x).sin());
            }
        }
    }

    #[test]
    fn rejects_non_physical_parameters() {
        let g = GridSpec::square(16).unwrap();
        let bad = Primitive::new(-1.0, 0.0, 0.0, 1.0);
        let good = Primitive::new(1.0, 0.0, 0.0, 1.0);
        let spec = ICSpec::new(
            IcParams::Rp {
                x0: 0.5,
                y0: 0.5,
                states: [good, good, bad, good],
            },
            0,
        );
        assert!(make_initial_condition(&spec, &g).is_err());
        // A bump deep enough to drive density negative.
        let spec = ICSpec::new(
            IcParams::Gauss {
                background: good,
                bumps: vec![GaussBump {
                    x: 0.5,
                    y: 0.5,
                    width: 0.1,
                    amp_rho: -2.0,
                    amp_p: 0.0,
                }],
            },
            0,
        );
        assert!(make_initial_condition(&spec, &g).is_err());
    }

    #[test]
    fn rankine_hugoniot_limits() {
        let pre = Primitive::new(1.0, 0.0, 0.0, 1.0);
        let same = post_shock_state(pre, 1.0, 1.4);
        assert!((same.rho - 1.0).abs() < 1e-14 && (same.p - 1.0).abs() < 1e-14);
        assert!(same.vx.abs() < 1e-14);
        let strong = post_shock_state(pre, 2.0, 1.4);
        assert!(strong.rho > 1.0 && strong.p > 1.0 && strong.vx > 0.0);
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("nope".parse::<Family>().is_err());
    }
}
