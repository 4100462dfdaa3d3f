//! Multi-head self-attention.

use super::ops::{
    affine, affine_backward, dropout_in_place, gemm, softmax_backward_in_place,
    softmax_rows_in_place, DropoutMask, DropoutMode,
};
use super::{NnError, Tensor};
use crate::rng::RngStream;

/// `w_qkv` is `[D, 3D]` with output columns `[q | k | v]`; head `h` owns
/// columns `h*dh..(h+1)*dh` of each block. `w_o` is `[D, D]`.
pub struct MhsaWeights<'a> {
    pub w_qkv: &'a Tensor,
    pub b_qkv: &'a Tensor,
    pub w_o: &'a Tensor,
    pub b_o: &'a Tensor,
}

pub struct MhsaGrads<'a> {
    pub w_qkv: &'a mut [f64],
    pub b_qkv: &'a mut [f64],
    pub w_o: &'a mut [f64],
    pub b_o: &'a mut [f64],
}

#[derive(Clone, Debug)]
pub struct MhsaCache {
    x: Tensor,
    qkv: Tensor,
    attn: Vec<Vec<f64>>,
    concat: Tensor,
    mask: DropoutMask,
    n_heads: usize,
}

impl MhsaCache {
    /// Row-stochastic attention weights `[N, N]` of head `h`.
    pub fn attention(&self, h: usize) -> &[f64] {
        &self.attn[h]
    }
}

fn extract(qkv: &Tensor, block: usize, h: usize, dh: usize, d: usize) -> Vec<f64> {
    let n = qkv.rows();
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        let start = block * d + h * dh;
        out.extend_from_slice(&qkv.row(i)[start..start + dh]);
    }
    out
}

fn scatter(dst: &mut Tensor, src: &[f64], col0: usize, dh: usize) {
    for i in 0..dst.rows() {
        dst.row_mut(i)[col0..col0 + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Self-attention over the rows of `x` (already layer-normed by the
/// caller), followed by the output projection and dropout.
pub fn mhsa(
    x: &Tensor,
    w: &MhsaWeights,
    n_heads: usize,
    dropout_p: f64,
    mode: DropoutMode,
    rng: &mut RngStream,
) -> Result<(Tensor, MhsaCache), NnError> {
    let d = x.cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(NnError::Shape(format!(
            "embedding dim {d} is not divisible by {n_heads} heads"
        )));
    }
    if w.w_qkv.shape() != [d, 3 * d] || w.w_o.shape() != [d, d] {
        return Err(NnError::Shape(format!(
            "attention weights {:?} / {:?} do not match embedding dim {d}",
            w.w_qkv.shape(),
            w.w_o.shape()
        )));
    }
    let n = x.rows();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = affine(x, w.w_qkv, w.b_qkv)?;
    let mut concat = Tensor::zeros(&[n, d]);
    let mut attn = Vec::with_capacity(n_heads);
    let mut out_h = vec![0.0; n * dh];
    for h in 0..n_heads {
        let q = extract(&qkv, 0, h, dh, d);
        let k = extract(&qkv, 1, h, dh, d);
        let v = extract(&qkv, 2, h, dh, d);
        let mut s = vec![0.0; n * n];
        gemm(n, dh, n, &q, false, &k, true, 0.0, &mut s);
        s.iter_mut().for_each(|e| *e *= scale);
        softmax_rows_in_place(&mut s, n);
        gemm(n, n, dh, &s, false, &v, false, 0.0, &mut out_h);
        scatter(&mut concat, &out_h, h * dh, dh);
        attn.push(s);
    }
    let mut y = affine(&concat, w.w_o, w.b_o)?;
    let mask = dropout_in_place(&mut y, dropout_p, mode, rng);
    Ok((
        y,
        MhsaCache {
            x: x.clone(),
            qkv,
            attn,
            concat,
            mask,
            n_heads,
        },
    ))
}

pub fn mhsa_backward(cache: &MhsaCache, w: &MhsaWeights, dy: &Tensor, g: MhsaGrads) -> Tensor {
    let (n, d) = (cache.x.rows(), cache.x.cols());
    let dh = d / cache.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dy = dy.clone();
    cache.mask.apply_backward(&mut dy);
    let dconcat = affine_backward(&cache.concat, w.w_o, &dy, g.w_o, g.b_o);
    let mut dqkv = Tensor::zeros(&[n, 3 * d]);
    let mut da = vec![0.0; n * n];
    let mut dq = vec![0.0; n * dh];
    let mut dk = vec![0.0; n * dh];
    let mut dv = vec![0.0; n * dh];
    for h in 0..cache.n_heads {
        let q = extract(&cache.qkv, 0, h, dh, d);
        let k = extract(&cache.qkv, 1, h, dh, d);
        let v = extract(&cache.qkv, 2, h, dh, d);
        let a = &cache.attn[h];
        let mut dout = Vec::with_capacity(n * dh);
        for i in 0..n {
            dout.extend_from_slice(&dconcat.row(i)[h * dh..(h + 1) * dh]);
        }
        gemm(n, dh, n, &dout, false, &v, true, 0.0, &mut da);
        gemm(n, n, dh, a, true, &dout, false, 0.0, &mut dv);
        softmax_backward_in_place(a, &mut da, n);
        da.iter_mut().for_each(|e| *e *= scale);
        gemm(n, n, dh, &da, false, &k, false, 0.0, &mut dq);
        gemm(n, n, dh, &da, true, &q, false, 0.0, &mut dk);
        scatter(&mut dqkv, &dq, h * dh, dh);
        scatter(&mut dqkv, &dk, d + h * dh, dh);
        scatter(&mut dqkv, &dv, 2 * d + h * dh, dh);
    }
    affine_backward(&cache.x, w.w_qkv, &dqkv, g.w_qkv, g.b_qkv)
}
