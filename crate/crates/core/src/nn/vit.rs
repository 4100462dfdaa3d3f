//! Vision transformer over circularly padded patch tokens.
//!
//! Blocks use the parallel residual form
//! `z' = z + Drop(MHSA(LN1 z)) + Drop(FFN(LN2 z))`. The image head maps each
//! token back to a patch and crops; the scalar head mean-pools tokens.

use serde::{Deserialize, Serialize};

use super::attention::{mhsa, mhsa_backward, MhsaCache, MhsaGrads, MhsaWeights};
use super::ops::{
    affine, affine_backward, dropout_in_place, gelu, gelu_backward, layer_norm,
    layer_norm_backward, DropoutMask, DropoutMode, LayerNormCache,
};
use super::patch::{patchify, unpatchify, unpatchify_backward, PatchGeometry};
use super::{GradBuffer, NnError, ParamId, ParamStore, Tensor};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Head {
    Image { channels: usize },
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub dropout_p: f64,
    pub head: Head,
}

impl VitConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.patch == 0 || self.patch.is_multiple_of(2) {
            return bad(format!("patch size {} must be odd", self.patch));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads)
        {
            return bad(format!(
                "embedding dim {} is not divisible by {} heads",
                self.embed_dim, self.n_heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return bad("depth, mlp ratio and input channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            ));
        }
        if let Head::Image { channels: 0 } = self.head {
            return bad("image head needs at least one channel".into());
        }
        PatchGeometry::new(self.in_channels, self.height, self.width, self.patch)?;
        Ok(())
    }

    pub fn input_geometry(&self) -> PatchGeometry {
        PatchGeometry::new(self.in_channels, self.height, self.width, self.patch)
            .expect("validated geometry")
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc1: ParamId,
    b_fc1: ParamId,
    w_fc2: ParamId,
    b_fc2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Vit {
    cfg: VitConfig,
    geom_in: PatchGeometry,
    geom_out: Option<PatchGeometry>,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: MhsaCache,
    ln2: LayerNormCache,
    h2: Tensor,
    f1: Tensor,
    act: Tensor,
    mask_hidden: DropoutMask,
    mask_out: DropoutMask,
}

/// Activations kept for the backward pass of one sample.
pub struct VitCache {
    cols: Tensor,
    mask_pos: DropoutMask,
    blocks: Vec<BlockCache>,
    z_final: Tensor,
}

impl VitCache {
    /// Attention weights `[N, N]` of head `h` in block `block`.
    pub fn attention(&self, block: usize, h: usize) -> &[f64] {
        self.blocks[block].attn.attention(h)
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| std * rng.normal()).collect())
        .expect("shape matches length")
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    normal_tensor(
        &[fan_in, fan_out],
        (2.0 / (fan_in + fan_out) as f64).sqrt(),
        rng,
    )
}

fn check(t: &Tensor, layer: impl FnOnce() -> String) -> Result<(), NnError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(layer()))
    }
}

impl Vit {
    /// Registers freshly initialized parameters in `store` under `prefix`.
    pub fn new(
        cfg: VitConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut RngStream,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let geom_in = cfg.input_geometry();
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_ratio * d;
        let n = geom_in.n_tokens();
        let residual_scale = 1.0 / (2.0 * cfg.depth as f64).sqrt();
        let name = |s: &str| format!("{prefix}{s}");

        let patch_w = store.add(name("patch.w"), xavier(geom_in.patch_dim(), d, rng));
        let patch_b = store.add(name("patch.b"), Tensor::zeros(&[d]));
        let pos = store.add(name("pos"), normal_tensor(&[n, d], 0.02, rng));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let b = |s: &str| name(&format!("block{l}.{s}"));
            let mut w_o = xavier(d, d, rng);
            w_o.data_mut().iter_mut().for_each(|v| *v *= residual_scale);
            let w_qkv = xavier(d, 3 * d, rng);
            let w_fc1 = xavier(d, hidden, rng);
            let mut w_fc2 = xavier(hidden, d, rng);
            w_fc2
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= residual_scale);
            blocks.push(BlockIds {
                ln1_g: store.add(b("ln1.g"), Tensor::filled(&[d], 1.0)),
                ln1_b: store.add(b("ln1.b"), Tensor::zeros(&[d])),
                w_qkv: store.add(b("attn.w_qkv"), w_qkv),
                b_qkv: store.add(b("attn.b_qkv"), Tensor::zeros(&[3 * d])),
                w_o: store.add(b("attn.w_o"), w_o),
                b_o: store.add(b("attn.b_o"), Tensor::zeros(&[d])),
                ln2_g: store.add(b("ln2.g"), Tensor::filled(&[d], 1.0)),
                ln2_b: store.add(b("ln2.b"), Tensor::zeros(&[d])),
                w_fc1: store.add(b("ffn.w1"), w_fc1),
                b_fc1: store.add(b("ffn.b1"), Tensor::zeros(&[hidden])),
                w_fc2: store.add(b("ffn.w2"), w_fc2),
                b_fc2: store.add(b("ffn.b2"), Tensor::zeros(&[d])),
            });
        }
        let (geom_out, head_w, head_b) = match cfg.head {
            Head::Image { channels } => {
                let g = geom_in.with_channels(channels);
                let w = store.add(name("decoder.w"), xavier(d, g.patch_dim(), rng));
                let b = store.add(name("decoder.b"), Tensor::zeros(&[g.patch_dim()]));
                (Some(g), w, b)
            }
            Head::Scalar => {
                let w = store.add(name("head.w"), xavier(d, 1, rng));
                let b = store.add(name("head.b"), Tensor::zeros(&[1]));
                (None, w, b)
            }
        };
        Ok(Self {
            cfg,
            geom_in,
            geom_out,
            patch_w,
            patch_b,
            pos,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn n_tokens(&self) -> usize {
        self.geom_in.n_tokens()
    }

    /// Length of the output vector: `C_out * H * W` or 1.
    pub fn output_len(&self) -> usize {
        self.geom_out.as_ref().map_or(1, PatchGeometry::image_len)
    }

    /// `img` is channel-major `[C_in, H, W]`. Random draws happen in a fixed
    /// order (positional dropout, then per block: attention output, FFN
    /// hidden, FFN output), so a given stream always yields the same masks.
    pub fn forward(
        &self,
        store: &ParamStore,
        img: &[f64],
        mode: DropoutMode,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, VitCache), NnError> {
        let p = self.cfg.dropout_p;
        let cols = patchify(img, &self.geom_in)?;
        let mut z = affine(&cols, store.value(self.patch_w), store.value(self.patch_b))?;
        z.add_assign(store.value(self.pos));
        let mask_pos = dropout_in_place(&mut z, p, mode, rng);
        check(&z, || "patch embedding".into())?;

        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, ids) in self.blocks.iter().enumerate() {
            let v = |id: ParamId| store.value(id);
            let (h1, ln1) = layer_norm(&z, v(ids.ln1_g), v(ids.ln1_b))?;
            let weights = MhsaWeights {
                w_qkv: v(ids.w_qkv),
                b_qkv: v(ids.b_qkv),
                w_o: v(ids.w_o),
                b_o: v(ids.b_o),
            };
            let (a, attn) = mhsa(&h1, &weights, self.cfg.n_heads, p, mode, rng)?;
            check(&a, || format!("block {l} attention"))?;
            let (h2, ln2) = layer_norm(&z, v(ids.ln2_g), v(ids.ln2_b))?;
            let f1 = affine(&h2, v(ids.w_fc1), v(ids.b_fc1))?;
            let mut act = gelu(&f1);
            let mask_hidden = dropout_in_place(&mut act, p, mode, rng);
            let mut f2 = affine(&act, v(ids.w_fc2), v(ids.b_fc2))?;
            let mask_out = dropout_in_place(&mut f2, p, mode, rng);
            check(&f2, || format!("block {l} feed-forward"))?;
            z.add_assign(&a);
            z.add_assign(&f2);
            caches.push(BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                f1,
                act,
                mask_hidden,
                mask_out,
            });
        }

        let out = match &self.geom_out {
            Some(g) => {
                let dec = affine(&z, store.value(self.head_w), store.value(self.head_b))?;
                unpatchify(&dec, g)?
            }
            None => {
                let pooled = mean_rows(&z);
                affine(&pooled, store.value(self.head_w), store.value(self.head_b))?.into_data()
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite("output head".into()));
        }
        Ok((
            out,
            VitCache {
                cols,
                mask_pos,
                blocks: caches,
                z_final: z,
            },
        ))
    }

    /// Forward pass without keeping activations.
    pub fn infer(
        &self,
        store: &ParamStore,
        img: &[f64],
        mode: DropoutMode,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>, NnError> {
        self.forward(store, img, mode, rng).map(|(out, _)| out)
    }

    /// Accumulates parameter gradients of `<dout, output>` into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &VitCache,
        dout: &[f64],
        grads: &mut GradBuffer,
    ) -> Result<(), NnError> {
        if dout.len() != self.output_len() {
            return Err(NnError::Shape(format!(
                "output gradient has {} values, expected {}",
                dout.len(),
                self.output_len()
            )));
        }
        let z = &cache.z_final;
        let mut dz = match &self.geom_out {
            Some(g) => {
                let dcols = unpatchify_backward(dout, g);
                let [dw, db] = grads.many_mut([self.head_w, self.head_b]);
                affine_backward(z, store.value(self.head_w), &dcols, dw, db)
            }
            None => {
                let pooled = mean_rows(z);
                let dy = Tensor::from_vec(&[1, 1], dout.to_vec())?;
                let [dw, db] = grads.many_mut([self.head_w, self.head_b]);
                let dpooled = affine_backward(&pooled, store.value(self.head_w), &dy, dw, db);
                let n = z.rows();
                let mut dz = Tensor::zeros(z.shape());
                for i in 0..n {
                    for (o, d) in dz.row_mut(i).iter_mut().zip(dpooled.data()) {
                        *o = d / n as f64;
                    }
                }
                dz
            }
        };

        for (ids, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let v = |id: ParamId| store.value(id);
            let [g_qkv, gb_qkv, g_o, gb_o, g_ln1, gb_ln1, g_fc1, gb_fc1, g_fc2, gb_fc2, g_ln2, gb_ln2] =
                grads.many_mut([
                    ids.w_qkv, ids.b_qkv, ids.w_o, ids.b_o, ids.ln1_g, ids.ln1_b, ids.w_fc1,
                    ids.b_fc1, ids.w_fc2, ids.b_fc2, ids.ln2_g, ids.ln2_b,
                ]);

            let weights = MhsaWeights {
                w_qkv: v(ids.w_qkv),
                b_qkv: v(ids.b_qkv),
                w_o: v(ids.w_o),
                b_o: v(ids.b_o),
            };
            let dh1 = mhsa_backward(
                &c.attn,
                &weights,
                &dz,
                MhsaGrads {
                    w_qkv: g_qkv,
                    b_qkv: gb_qkv,
                    w_o: g_o,
                    b_o: gb_o,
                },
            );
            let dz_attn = layer_norm_backward(&c.ln1, v(ids.ln1_g), &dh1, g_ln1, gb_ln1);

            let mut df2 = dz.clone();
            c.mask_out.apply_backward(&mut df2);
            let mut dact = affine_backward(&c.act, v(ids.w_fc2), &df2, g_fc2, gb_fc2);
            c.mask_hidden.apply_backward(&mut dact);
            let df1 = gelu_backward(&c.f1, &dact);
            let dh2 = affine_backward(&c.h2, v(ids.w_fc1), &df1, g_fc1, gb_fc1);
            let dz_ffn = layer_norm_backward(&c.ln2, v(ids.ln2_g), &dh2, g_ln2, gb_ln2);

            dz.add_assign(&dz_attn);
            dz.add_assign(&dz_ffn);
        }

        cache.mask_pos.apply_backward(&mut dz);
        for (g, d) in grads.get_mut(self.pos).iter_mut().zip(dz.data()) {
            *g += d;
        }
        let [dw, db] = grads.many_mut([self.patch_w, self.patch_b]);
        affine_backward(&cache.cols, store.value(self.patch_w), &dz, dw, db);
        Ok(())
    }
}

fn mean_rows(z: &Tensor) -> Tensor {
    let (n, d) = (z.rows(), z.cols());
    let mut m = Tensor::zeros(&[1, d]);
    for i in 0..n {
        for (o, v) in m.data_mut().iter_mut().zip(z.row(i)) {
            *o += v;
        }
    }
    m.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: Head, dropout_p: f64) -> VitConfig {
        VitConfig {
            in_channels: 2,
            height: 7,
            width: 8,
            patch: 3,
            embed_dim: 8,
            depth: 2,
            n_heads: 2,
            mlp_ratio: 2,
            dropout_p,
            head,
        }
    }

    #[test]
    fn output_matches_input_grid() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, 0);
        let vit = Vit::new(
            tiny(Head::Image { channels: 3 }, 0.0),
            &mut store,
            "",
            &mut rng,
        )
        .unwrap();
        let img: Vec<f64> = (0..2 * 56).map(|k| (k as f64 * 0.1).sin()).collect();
        let out = vit.infer(&store, &img, DropoutMode::Off, &mut rng).unwrap();
        assert_eq!(out.len(), 3 * 56);
        assert_eq!(vit.n_tokens(), 9);
    }

    #[test]
    fn rejects_even_patch_and_bad_heads() {
        let mut c = tiny(Head::Scalar, 0.0);
        c.patch = 4;
        assert!(c.validate().is_err());
        let mut c = tiny(Head::Scalar, 0.0);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    fn grad_check(head: Head, dropout_p: f64) {
        let cfg = tiny(head, dropout_p);
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(5, 0);
        let vit = Vit::new(cfg, &mut store, "", &mut rng).unwrap();
        let img: Vec<f64> = (0..2 * 56).map(|_| rng.normal()).collect();
        let weights: Vec<f64> = (0..vit.output_len()).map(|_| rng.normal()).collect();
        let loss = |s: &ParamStore| {
            let mut r = RngStream::new(9, 3);
            let out = vit.infer(s, &img, DropoutMode::On, &mut r).unwrap();
            out.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut r = RngStream::new(9, 3);
        let (_, cache) = vit.forward(&store, &img, DropoutMode::On, &mut r).unwrap();
        let mut grads = store.grad_buffer();
        vit.backward(&store, &cache, &weights, &mut grads).unwrap();
        let h = 1e-5;
        for pid in 0..store.len() {
            let id = ParamId(pid);
            for k in [0, store.value(id).len() / 2, store.value(id).len() - 1] {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[k] += h;
                let up = loss(&s);
                s.value_mut(id).data_mut()[k] -= 2.0 * h;
                let down = loss(&s);
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id)[k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    err < 1e-4,
                    "{} [{k}]: fd {fd} vs {an}",
                    store.param(id).name
                );
            }
        }
    }

    #[test]
    fn image_head_gradients_match_finite_differences() {
        grad_check(Head::Image { channels: 2 }, 0.0);
        grad_check(Head::Image { channels: 2 }, 0.2);
    }

    #[test]
    fn scalar_head_gradients_match_finite_differences() {
        grad_check(Head::Scalar, 0.0);
        grad_check(Head::Scalar, 0.2);
    }
}
