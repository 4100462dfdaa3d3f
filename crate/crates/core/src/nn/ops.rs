//! Layer primitives with hand-written reverse-mode gradients.
//!
//! Activations are `[rows, cols]` tensors (tokens x features). Backward
//! functions take the forward inputs or caches plus the upstream gradient,
//! return the gradient w.r.t. the input, and *accumulate* parameter
//! gradients into the provided slices.

use super::{NnError, Tensor};
use crate::rng::RngStream;

pub const LN_EPS: f64 = 1e-5;

/// Row-major `C = A B + beta C` with optional transposes of the stored
/// operands. `a` is `[m, k]` (or `[k, m]` if `ta`), `b` is `[k, n]` (or
/// `[n, k]` if `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe matrices lying within the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_cols(x: &Tensor, want: usize, what: &str) -> Result<(), NnError> {
    if x.cols() != want {
        return Err(NnError::Shape(format!(
            "{what}: expected {want} features, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// `y = x W + b` with `W` stored `[d_in, d_out]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (d_in, d_out) = (w.rows(), w.cols());
    check_cols(x, d_in, "affine input")?;
    if b.len() != d_out {
        return Err(NnError::Shape(format!(
            "affine bias has {} entries, need {d_out}",
            b.len()
        )));
    }
    let n = x.rows();
    let mut y = Tensor::zeros(&[n, d_out]);
    for i in 0..n {
        y.row_mut(i).copy_from_slice(b.data());
    }
    gemm(
        n,
        d_in,
        d_out,
        x.data(),
        false,
        w.data(),
        false,
        1.0,
        y.data_mut(),
    );
    Ok(y)
}

pub fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let (d_in, d_out) = (w.rows(), w.cols());
    let n = x.rows();
    gemm(d_in, n, d_out, x.data(), true, dy.data(), false, 1.0, dw);
    for i in 0..n {
        for (g, d) in db.iter_mut().zip(dy.row(i)) {
            *g += d;
        }
    }
    let mut dx = Tensor::zeros(&[n, d_in]);
    gemm(
        n,
        d_out,
        d_in,
        dy.data(),
        false,
        w.data(),
        true,
        0.0,
        dx.data_mut(),
    );
    dx
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNormCache {
    pub fn normalized(&self) -> &Tensor {
        &self.xhat
    }
}

/// Row-wise `(x - mean) / sqrt(var + eps) * g + b`.
pub fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<(Tensor, LayerNormCache), NnError> {
    let d = x.cols();
    if g.len() != d || b.len() != d {
        return Err(NnError::Shape(format!(
            "layer norm over {d} features with gain {} / bias {}",
            g.len(),
            b.len()
        )));
    }
    let n = x.rows();
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut y = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let xh = xhat.row(i).to_vec();
        for ((o, v), (gg, bb)) in y
            .row_mut(i)
            .iter_mut()
            .zip(&xh)
            .zip(g.data().iter().zip(b.data()))
        {
            *o = v * gg + bb;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    g: &Tensor,
    dy: &Tensor,
    dg: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
            dxhat[k] = dyr[k] * g.data()[k];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let inv = cache.inv_std[i];
        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = inv * (dxhat[k] - mean_d - xh[k] * mean_dx);
        }
    }
    dx
}

/// Row-wise softmax over the trailing axis, in place.
pub fn softmax_rows_in_place(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn softmax(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let cols = x.cols();
    softmax_rows_in_place(y.data_mut(), cols);
    y
}

/// Given `y = softmax(x)` row-wise, the gradient w.r.t. `x`, in place on `dy`.
pub fn softmax_backward_in_place(y: &[f64], dy: &mut [f64], cols: usize) {
    for (yr, dr) in y.chunks(cols).zip(dy.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for (d, yv) in dr.iter_mut().zip(yr) {
            *d = yv * (*d - dot);
        }
    }
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    softmax_backward_in_place(y.data(), dx.data_mut(), y.cols());
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    y
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad_scalar(*v);
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    On,
}

/// Per-element multipliers of an applied dropout: 0 or 1/(1-p).
#[derive(Clone, Debug, Default)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }

    pub fn apply_backward(&self, dy: &mut Tensor) {
        if let Some(m) = &self.0 {
            for (d, s) in dy.data_mut().iter_mut().zip(m) {
                *d *= s;
            }
        }
    }
}

/// Inverted dropout, in place. Identity (and no draws) when the mode is off
/// or `p == 0`.
pub fn dropout_in_place(
    x: &mut Tensor,
    p: f64,
    mode: DropoutMode,
    rng: &mut RngStream,
) -> DropoutMask {
    debug_assert!((0.0..1.0).contains(&p));
    if mode == DropoutMode::Off || p == 0.0 {
        return DropoutMask(None);
    }
    let scale = 1.0 / (1.0 - p);
    let mut mask = Vec::with_capacity(x.len());
    for v in x.data_mut() {
        let m = if rng.uniform() < p { 0.0 } else { scale };
        *v *= m;
        mask.push(m);
    }
    DropoutMask(Some(mask))
}

pub fn dropout(
    x: &Tensor,
    p: f64,
    mode: DropoutMode,
    rng: &mut RngStream,
) -> (Tensor, DropoutMask) {
    let mut y = x.clone();
    let mask = dropout_in_place(&mut y, p, mode, rng);
    (y, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let mut rng = RngStream::new(1, 0);
        let x = rand_tensor(&[3, 4], &mut rng);
        let mut w = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let y = affine(&x, &w, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y, x);
        assert!(affine(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = Tensor::filled(&[2, 6], 3.5);
        let b = Tensor::from_vec(&[6], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::filled(&[6], 2.0), &b).unwrap();
        assert_eq!(y.row(0), b.data());
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = RngStream::new(2, 0);
        let x = rand_tensor(&[5, 16], &mut rng);
        let (_, cache) =
            layer_norm(&x, &Tensor::filled(&[16], 1.0), &Tensor::zeros(&[16])).unwrap();
        for i in 0..5 {
            let r = cache.normalized().row(i);
            let mean = r.iter().sum::<f64>() / 16.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = RngStream::new(3, 0);
        let x = rand_tensor(&[4, 7], &mut rng);
        let y = softmax(&x);
        for i in 0..4 {
            assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(y.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = RngStream::new(4, 0);
        let x = rand_tensor(&[4, 8], &mut rng);
        let (y, m) = dropout(&x, 0.0, DropoutMode::On, &mut rng);
        assert_eq!(y, x);
        assert!(m.is_identity());
        let (y, _) = dropout(&x, 0.5, DropoutMode::Off, &mut rng);
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_is_reproducible_and_scaled() {
        let x = Tensor::filled(&[10, 10], 1.0);
        let (a, _) = dropout(&x, 0.25, DropoutMode::On, &mut RngStream::new(9, 2));
        let (b, _) = dropout(&x, 0.25, DropoutMode::On, &mut RngStream::new(9, 2));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
        assert!(a.data().contains(&0.0));
    }
}
