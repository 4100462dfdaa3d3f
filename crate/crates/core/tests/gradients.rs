mod support;

use pdettc_core::nn::ops::{
    affine, affine_backward, dropout, gelu, gelu_backward, layer_norm, layer_norm_backward,
    softmax, softmax_backward,
};
use pdettc_core::nn::patch::{
    conv_patch, deconv_patch, deconv_patch_backward, patchify, patchify_backward,
};
use pdettc_core::nn::{
    mhsa, mhsa_backward, DropoutMode, MhsaGrads, MhsaWeights, PatchGeometry, Tensor,
};
use pdettc_core::rng::RngStream;
use support::{central_difference, relative_error};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Compares `grad` with central differences of `f` at `x`, entry by entry.
fn check(name: &str, f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
    assert_eq!(x.len(), grad.len());
    for k in 0..x.len() {
        let fd = central_difference(f, x, k, H);
        let err = relative_error(fd, grad[k]);
        assert!(
            err < TOL,
            "{name}[{k}]: fd {fd} analytic {} err {err}",
            grad[k]
        );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn shape_for(seed: u64) -> (usize, usize, usize) {
    let mut r = RngStream::new(seed, 99);
    (
        1 + r.below(5) as usize,
        1 + r.below(6) as usize,
        1 + r.below(6) as usize,
    )
}

#[test]
fn affine_gradients() {
    for seed in 0..10 {
        let (n, din, dout) = shape_for(seed);
        let mut rng = RngStream::new(seed, 1);
        let x = randn(&mut rng, &[n, din]);
        let w = randn(&mut rng, &[din, dout]);
        let b = randn(&mut rng, &[dout]);
        let dy = randn(&mut rng, &[n, dout]);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = affine_backward(&x, &w, &dy, &mut dw, &mut db);
        let fx = |v: &[f64]| {
            dot(
                affine(&Tensor::from_vec(&[n, din], v.to_vec()).unwrap(), &w, &b)
                    .unwrap()
                    .data(),
                dy.data(),
            )
        };
        let fw = |v: &[f64]| {
            dot(
                affine(&x, &Tensor::from_vec(&[din, dout], v.to_vec()).unwrap(), &b)
                    .unwrap()
                    .data(),
                dy.data(),
            )
        };
        let fb = |v: &[f64]| {
            dot(
                affine(&x, &w, &Tensor::from_vec(&[dout], v.to_vec()).unwrap())
                    .unwrap()
                    .data(),
                dy.data(),
            )
        };
        check("affine x", &fx, x.data(), dx.data());
        check("affine w", &fw, w.data(), &dw);
        check("affine b", &fb, b.data(), &db);
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..10 {
        let (n, d, _) = shape_for(seed);
        let d = d + 1;
        let mut rng = RngStream::new(seed, 2);
        let x = randn(&mut rng, &[n, d]);
        let g = randn(&mut rng, &[d]);
        let b = randn(&mut rng, &[d]);
        let dy = randn(&mut rng, &[n, d]);
        let (_, cache) = layer_norm(&x, &g, &b).unwrap();
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let dx = layer_norm_backward(&cache, &g, &dy, &mut dg, &mut db);
        let f = |xv: &[f64], gv: &[f64], bv: &[f64]| {
            let t = |s: &[usize], v: &[f64]| Tensor::from_vec(s, v.to_vec()).unwrap();
            dot(
                layer_norm(&t(&[n, d], xv), &t(&[d], gv), &t(&[d], bv))
                    .unwrap()
                    .0
                    .data(),
                dy.data(),
            )
        };
        check(
            "layer_norm x",
            &|v| f(v, g.data(), b.data()),
            x.data(),
            dx.data(),
        );
        check("layer_norm g", &|v| f(x.data(), v, b.data()), g.data(), &dg);
        check("layer_norm b", &|v| f(x.data(), g.data(), v), b.data(), &db);
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..10 {
        let (n, d, _) = shape_for(seed);
        let mut rng = RngStream::new(seed, 3);
        let x = randn(&mut rng, &[n, d]);
        let dy = randn(&mut rng, &[n, d]);
        let dx = softmax_backward(&softmax(&x), &dy);
        let f = |v: &[f64]| {
            dot(
                softmax(&Tensor::from_vec(&[n, d], v.to_vec()).unwrap()).data(),
                dy.data(),
            )
        };
        check("softmax", &f, x.data(), dx.data());
    }
}

#[test]
fn gelu_gradients() {
    for seed in 0..10 {
        let (n, d, _) = shape_for(seed);
        let mut rng = RngStream::new(seed, 4);
        let x = randn(&mut rng, &[n, d]);
        let dy = randn(&mut rng, &[n, d]);
        let dx = gelu_backward(&x, &dy);
        let f = |v: &[f64]| {
            dot(
                gelu(&Tensor::from_vec(&[n, d], v.to_vec()).unwrap()).data(),
                dy.data(),
            )
        };
        check("gelu", &f, x.data(), dx.data());
    }
}

#[test]
fn dropout_gradients_follow_the_mask() {
    for seed in 0..10 {
        let (n, d, _) = shape_for(seed);
        let mut rng = RngStream::new(seed, 5);
        let x = randn(&mut rng, &[n, d]);
        let dy = randn(&mut rng, &[n, d]);
        let (_, mask) = dropout(&x, 0.3, DropoutMode::On, &mut RngStream::new(seed, 50));
        let mut dx = dy.clone();
        mask.apply_backward(&mut dx);
        let f = |v: &[f64]| {
            let t = Tensor::from_vec(&[n, d], v.to_vec()).unwrap();
            dot(
                dropout(&t, 0.3, DropoutMode::On, &mut RngStream::new(seed, 50))
                    .0
                    .data(),
                dy.data(),
            )
        };
        check("dropout", &f, x.data(), dx.data());
    }
}

#[test]
fn attention_gradients() {
    for seed in 0..10 {
        let mut rng = RngStream::new(seed, 6);
        let n = 2 + rng.below(4) as usize;
        let heads = 1 + rng.below(2) as usize;
        let d = heads * (1 + rng.below(3) as usize);
        let x = randn(&mut rng, &[n, d]);
        let w_qkv = randn(&mut rng, &[d, 3 * d]);
        let b_qkv = randn(&mut rng, &[3 * d]);
        let w_o = randn(&mut rng, &[d, d]);
        let b_o = randn(&mut rng, &[d]);
        let dy = randn(&mut rng, &[n, d]);
        let p = if seed % 2 == 0 { 0.0 } else { 0.2 };
        let run = |x: &Tensor, wq: &Tensor, bq: &Tensor, wo: &Tensor, bo: &Tensor| {
            let w = MhsaWeights {
                w_qkv: wq,
                b_qkv: bq,
                w_o: wo,
                b_o: bo,
            };
            mhsa(
                x,
                &w,
                heads,
                p,
                DropoutMode::On,
                &mut RngStream::new(seed, 60),
            )
            .unwrap()
        };
        let (_, cache) = run(&x, &w_qkv, &b_qkv, &w_o, &b_o);
        let mut g = [
            vec![0.0; 3 * d * d],
            vec![0.0; 3 * d],
            vec![0.0; d * d],
            vec![0.0; d],
        ];
        let [gq, gbq, go, gbo] = &mut g;
        let weights = MhsaWeights {
            w_qkv: &w_qkv,
            b_qkv: &b_qkv,
            w_o: &w_o,
            b_o: &b_o,
        };
        let dx = mhsa_backward(
            &cache,
            &weights,
            &dy,
            MhsaGrads {
                w_qkv: gq,
                b_qkv: gbq,
                w_o: go,
                b_o: gbo,
            },
        );
        let t = |s: &[usize], v: &[f64]| Tensor::from_vec(s, v.to_vec()).unwrap();
        let fx = |v: &[f64]| {
            dot(
                run(&t(&[n, d], v), &w_qkv, &b_qkv, &w_o, &b_o).0.data(),
                dy.data(),
            )
        };
        let fq = |v: &[f64]| {
            dot(
                run(&x, &t(&[d, 3 * d], v), &b_qkv, &w_o, &b_o).0.data(),
                dy.data(),
            )
        };
        let fbq = |v: &[f64]| {
            dot(
                run(&x, &w_qkv, &t(&[3 * d], v), &w_o, &b_o).0.data(),
                dy.data(),
            )
        };
        let fo = |v: &[f64]| {
            dot(
                run(&x, &w_qkv, &b_qkv, &t(&[d, d], v), &b_o).0.data(),
                dy.data(),
            )
        };
        let fbo = |v: &[f64]| {
            dot(
                run(&x, &w_qkv, &b_qkv, &w_o, &t(&[d], v)).0.data(),
                dy.data(),
            )
        };
        check("mhsa x", &fx, x.data(), dx.data());
        check("mhsa w_qkv", &fq, w_qkv.data(), &g[0]);
        check("mhsa b_qkv", &fbq, b_qkv.data(), &g[1]);
        check("mhsa w_o", &fo, w_o.data(), &g[2]);
        check("mhsa b_o", &fbo, b_o.data(), &g[3]);
    }
}

fn geometry_for(seed: u64) -> PatchGeometry {
    let mut r = RngStream::new(seed, 7);
    let p = [1, 3, 5][r.below(3) as usize];
    let h = 1 + r.below(9) as usize;
    let w = 1 + r.below(9) as usize;
    PatchGeometry::new(1 + r.below(3) as usize, h, w, p).unwrap()
}

#[test]
fn patch_convolution_gradients() {
    for seed in 0..10 {
        let g = geometry_for(seed);
        let d = 3;
        let mut rng = RngStream::new(seed, 8);
        let img: Vec<f64> = (0..g.image_len()).map(|_| rng.normal()).collect();
        let kernel = randn(&mut rng, &[g.patch_dim(), d]);
        let bias = randn(&mut rng, &[d]);
        let dy = randn(&mut rng, &[g.n_tokens(), d]);
        let cols = patchify(&img, &g).unwrap();
        let mut dk = vec![0.0; kernel.len()];
        let mut db = vec![0.0; d];
        let dcols = affine_backward(&cols, &kernel, &dy, &mut dk, &mut db);
        let dimg = patchify_backward(&dcols, &g);
        let f = |v: &[f64]| dot(conv_patch(v, &g, &kernel, &bias).unwrap().data(), dy.data());
        let fk = |v: &[f64]| {
            let k = Tensor::from_vec(&[g.patch_dim(), d], v.to_vec()).unwrap();
            dot(conv_patch(&img, &g, &k, &bias).unwrap().data(), dy.data())
        };
        check("conv_patch image", &f, &img, &dimg);
        check("conv_patch kernel", &fk, kernel.data(), &dk);
    }
}

#[test]
fn transposed_patch_convolution_gradients() {
    for seed in 0..10 {
        let g = geometry_for(seed);
        let d = 3;
        let mut rng = RngStream::new(seed, 9);
        let tokens = randn(&mut rng, &[g.n_tokens(), d]);
        let kernel = randn(&mut rng, &[d, g.patch_dim()]);
        let bias = randn(&mut rng, &[g.patch_dim()]);
        let dimg: Vec<f64> = (0..g.image_len()).map(|_| rng.normal()).collect();
        let mut dk = vec![0.0; kernel.len()];
        let mut db = vec![0.0; bias.len()];
        let dtok = deconv_patch_backward(&tokens, &g, &kernel, &dimg, &mut dk, &mut db);
        let t = |s: &[usize], v: &[f64]| Tensor::from_vec(s, v.to_vec()).unwrap();
        let ft = |v: &[f64]| {
            dot(
                &deconv_patch(&t(&[g.n_tokens(), d], v), &g, &kernel, &bias).unwrap(),
                &dimg,
            )
        };
        let fk = |v: &[f64]| {
            dot(
                &deconv_patch(&tokens, &g, &t(&[d, g.patch_dim()], v), &bias).unwrap(),
                &dimg,
            )
        };
        let fb = |v: &[f64]| {
            dot(
                &deconv_patch(&tokens, &g, &kernel, &t(&[g.patch_dim()], v)).unwrap(),
                &dimg,
            )
        };
        check("deconv_patch tokens", &ft, tokens.data(), dtok.data());
        check("deconv_patch kernel", &fk, kernel.data(), &dk);
        check("deconv_patch bias", &fb, bias.data(), &db);
    }
}

#[test]
fn tiny_model_end_to_end_gradients() {
    for seed in 0..10 {
        let err = support::tiny_model_grad_error(seed);
        assert!(err < TOL, "seed {seed}: worst relative error {err}");
    }
}
