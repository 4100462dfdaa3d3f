#![allow(dead_code)]

pub mod exact_riemann;

use pdettc_core::euler::{solve_from, Boundary, GridSpec, Primitive, Snapshot, SolverConfig};

use exact_riemann::{ExactRiemann, SOD_LEFT, SOD_RIGHT};

/// Numerical Sod density at `t_final` on `n` cells (transmissive in x,
/// uniform in y) next to the exact profile at cell centres. Returns
/// `(numerical, exact)` for the first row.
pub fn sod_profiles(n: usize, t_final: f64) -> (Vec<f64>, Vec<f64>) {
    let grid = GridSpec::new(n, 8)
        .unwrap()
        .with_boundaries(Boundary::Transmissive, Boundary::Periodic);
    let init = Snapshot::from_fn(grid, 0.0, |x, _| {
        if x < 0.5 {
            Primitive::new(SOD_LEFT.rho, SOD_LEFT.u, 0.0, SOD_LEFT.p)
        } else {
            Primitive::new(SOD_RIGHT.rho, SOD_RIGHT.u, 0.0, SOD_RIGHT.p)
        }
    });
    let cfg = SolverConfig {
        n_times: 2,
        t_final,
        ..SolverConfig::default()
    };
    let out = solve_from(init, &cfg).unwrap();
    let last = out.last().unwrap();
    let exact = ExactRiemann::new(SOD_LEFT, SOD_RIGHT, cfg.gamma);
    let num = last.rho()[..n].to_vec();
    let ex = (0..n)
        .map(|i| {
            let (x, _) = grid.center(i, 0);
            exact.sample((x - 0.5) / t_final).rho
        })
        .collect();
    (num, ex)
}

/// Mean absolute density error divided by the initial density jump.
pub fn sod_relative_l1(n: usize) -> f64 {
    let (num, ex) = sod_profiles(n, 0.2);
    let l1 = num.iter().zip(&ex).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    l1 / (SOD_LEFT.rho - SOD_RIGHT.rho)
}

/// Central difference of `f` at `x[k]`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut y = x.to_vec();
    y[k] = x[k] + h;
    let up = f(&y);
    y[k] = x[k] - h;
    let down = f(&y);
    (up - down) / (2.0 * h)
}

/// Relative error with a 1e-4 floor on the scale, so entries whose true
/// gradient is zero are judged on an absolute 1e-8 difference.
pub fn relative_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
}

/// Largest relative error between backprop and central differences over
/// every parameter entry of an 8×8, P=3, D=8, L=1 image model with dropout
/// active on a fixed stream.
pub fn tiny_model_grad_error(seed: u64) -> f64 {
    use pdettc_core::nn::{DropoutMode, Head, ParamId, ParamStore, Vit, VitConfig};
    use pdettc_core::rng::RngStream;

    let cfg = VitConfig {
        in_channels: 5,
        height: 8,
        width: 8,
        patch: 3,
        embed_dim: 8,
        depth: 1,
        n_heads: 2,
        mlp_ratio: 2,
        dropout_p: 0.1,
        head: Head::Image { channels: 4 },
    };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed, 0);
    let vit = Vit::new(cfg, &mut store, "", &mut rng).unwrap();
    let img: Vec<f64> = (0..5 * 64).map(|_| rng.normal()).collect();
    let target: Vec<f64> = (0..vit.output_len()).map(|_| rng.normal()).collect();
    let loss_and_grad = |s: &ParamStore| {
        let mut r = RngStream::new(seed, 7);
        let (out, cache) = vit.forward(s, &img, DropoutMode::On, &mut r).unwrap();
        let n = out.len() as f64;
        let loss = out
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let dout: Vec<f64> = out
            .iter()
            .zip(&target)
            .map(|(a, b)| 2.0 * (a - b) / n)
            .collect();
        (loss, cache, dout)
    };
    let (_, cache, dout) = loss_and_grad(&store);
    let mut grads = store.grad_buffer();
    vit.backward(&store, &cache, &dout, &mut grads).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for pid in 0..store.len() {
        let id = ParamId(pid);
        for k in 0..store.value(id).len() {
            let x0 = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = x0 + h;
            let up = loss_and_grad(&probe).0;
            probe.value_mut(id).data_mut()[k] = x0 - h;
            let down = loss_and_grad(&probe).0;
            probe.value_mut(id).data_mut()[k] = x0;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(fd, grads.get(id)[k]));
        }
    }
    worst
}
