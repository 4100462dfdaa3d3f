use pdettc_core::nn::{adamw_step, AdamWConfig, ParamStore, Tensor};

/// Plain scalar AdamW on f(w) = w^2 / 2, written out step by step.
fn reference(lr: f64, wd: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = w;
        w *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(w);
    }
    out
}

fn optimizer(lr: f64, wd: f64, steps: usize) -> Vec<f64> {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
    let cfg = AdamWConfig {
        lr,
        weight_decay: wd,
        ..AdamWConfig::default()
    };
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let w = store.value(id).data()[0];
        store.params_mut()[0].grad.data_mut()[0] = w;
        adamw_step(&mut store, &cfg).unwrap();
        out.push(store.value(id).data()[0]);
    }
    out
}

fn first_below(ws: &[f64], tol: f64) -> Option<usize> {
    ws.iter().position(|w| w.abs() < tol).map(|k| k + 1)
}

#[test]
fn tracks_the_scalar_reference_on_a_quadratic_bowl() {
    for wd in [0.0, 0.01] {
        let ours = optimizer(0.05, wd, 500);
        let reference = reference(0.05, wd, 500);
        for (t, (a, b)) in ours.iter().zip(&reference).enumerate() {
            assert!(
                (a - b).abs() <= 1e-14 * b.abs().max(1e-300),
                "wd {wd} step {}: {a} vs {b}",
                t + 1
            );
        }
    }
}

#[test]
fn quadratic_bowl_converges_within_500_steps() {
    for wd in [0.0, 0.01] {
        let ws = optimizer(0.05, wd, 500);
        let hit = first_below(&ws, 1e-3);
        assert!(hit.is_some(), "wd {wd}: final w {}", ws[499]);
        assert!(ws[499].abs() < 1e-3);
    }
}

#[test]
fn weight_decay_alone_shrinks_geometrically() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(&[1], vec![2.0]).unwrap());
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    for _ in 0..3 {
        adamw_step(&mut store, &cfg).unwrap();
    }
    assert!((store.value(id).data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
}
