//! Exact solution of the 1D Euler Riemann problem for an ideal gas
//! (two-rarefaction / two-shock pressure function solved by Newton).

#[derive(Clone, Copy, Debug)]
pub struct State {
    pub rho: f64,
    pub u: f64,
    pub p: f64,
}

pub struct ExactRiemann {
    left: State,
    right: State,
    gamma: f64,
    p_star: f64,
    u_star: f64,
}

impl ExactRiemann {
    pub fn new(left: State, right: State, gamma: f64) -> Self {
        let mut r = Self {
            left,
            right,
            gamma,
            p_star: 0.0,
            u_star: 0.0,
        };
        r.solve_star();
        r
    }

    fn sound(&self, s: State) -> f64 {
        (self.gamma * s.p / s.rho).sqrt()
    }

    /// Pressure function of one side and its derivative.
    fn f_side(&self, p: f64, s: State) -> (f64, f64) {
        let g = self.gamma;
        let c = self.sound(s);
        if p > s.p {
            let a = 2.0 / ((g + 1.0) * s.rho);
            let b = (g - 1.0) / (g + 1.0) * s.p;
            let q = (a / (p + b)).sqrt();
            ((p - s.p) * q, q * (1.0 - 0.5 * (p - s.p) / (p + b)))
        } else {
            let e = (g - 1.0) / (2.0 * g);
            let f = 2.0 * c / (g - 1.0) * ((p / s.p).powf(e) - 1.0);
            let d = 1.0 / (s.rho * c) * (p / s.p).powf(-(g + 1.0) / (2.0 * g));
            (f, d)
        }
    }

    fn solve_star(&mut self) {
        let (l, r) = (self.left, self.right);
        let du = r.u - l.u;
        let mut p = (0.5 * (l.p + r.p)).max(1e-8);
        for _ in 0..100 {
            let (fl, dl) = self.f_side(p, l);
            let (fr, dr) = self.f_side(p, r);
            let next = (p - (fl + fr + du) / (dl + dr)).max(1e-12);
            let change = 2.0 * (next - p).abs() / (next + p);
            p = next;
            if change < 1e-14 {
                break;
            }
        }
        let (fl, _) = self.f_side(p, l);
        let (fr, _) = self.f_side(p, r);
        self.p_star = p;
        self.u_star = 0.5 * (l.u + r.u) + 0.5 * (fr - fl);
    }

    pub fn p_star(&self) -> f64 {
        self.p_star
    }

    pub fn u_star(&self) -> f64 {
        self.u_star
    }

    /// State at similarity coordinate `xi = (x - x0) / t`.
    pub fn sample(&self, xi: f64) -> State {
        let g = self.gamma;
        let (ps, us) = (self.p_star, self.u_star);
        if xi <= us {
            let l = self.left;
            let cl = self.sound(l);
            if ps > l.p {
                let s =
                    l.u - cl * ((g + 1.0) / (2.0 * g) * ps / l.p + (g - 1.0) / (2.0 * g)).sqrt();
                if xi <= s {
                    l
                } else {
                    let ratio = ps / l.p;
                    let gm = (g - 1.0) / (g + 1.0);
                    State {
                        rho: l.rho * (ratio + gm) / (gm * ratio + 1.0),
                        u: us,
                        p: ps,
                    }
                }
            } else {
                let head = l.u - cl;
                let c_star = cl * (ps / l.p).powf((g - 1.0) / (2.0 * g));
                let tail = us - c_star;
                if xi <= head {
                    l
                } else if xi >= tail {
                    State {
                        rho: l.rho * (ps / l.p).powf(1.0 / g),
                        u: us,
                        p: ps,
                    }
                } else {
                    let k = 2.0 / (g + 1.0) + (g - 1.0) / ((g + 1.0) * cl) * (l.u - xi);
                    State {
                        rho: l.rho * k.powf(2.0 / (g - 1.0)),
                        u: 2.0 / (g + 1.0) * (cl + (g - 1.0) / 2.0 * l.u + xi),
                        p: l.p * k.powf(2.0 * g / (g - 1.0)),
                    }
                }
            }
        } else {
            let r = self.right;
            let cr = self.sound(r);
            if ps > r.p {
                let s =
                    r.u + cr * ((g + 1.0) / (2.0 * g) * ps / r.p + (g - 1.0) / (2.0 * g)).sqrt();
                if xi >= s {
                    r
                } else {
                    let ratio = ps / r.p;
                    let gm = (g - 1.0) / (g + 1.0);
                    State {
                        rho: r.rho * (ratio + gm) / (gm * ratio + 1.0),
                        u: us,
                        p: ps,
                    }
                }
            } else {
                let head = r.u + cr;
                let c_star = cr * (ps / r.p).powf((g - 1.0) / (2.0 * g));
                let tail = us + c_star;
                if xi >= head {
                    r
                } else if xi <= tail {
                    State {
                        rho: r.rho * (ps / r.p).powf(1.0 / g),
                        u: us,
                        p: ps,
                    }
                } else {
                    let k = 2.0 / (g + 1.0) - (g - 1.0) / ((g + 1.0) * cr) * (r.u - xi);
                    State {
                        rho: r.rho * k.powf(2.0 / (g - 1.0)),
                        u: 2.0 / (g + 1.0) * (-cr + (g - 1.0) / 2.0 * r.u + xi),
                        p: r.p * k.powf(2.0 * g / (g - 1.0)),
                    }
                }
            }
        }
    }
}

pub const SOD_LEFT: State = State {
    rho: 1.0,
    u: 0.0,
    p: 1.0,
};

pub const SOD_RIGHT: State = State {
    rho: 0.125,
    u: 0.0,
    p: 0.1,
};
