//! Patch embedding geometry with circular padding.
//!
//! An image `[C, H, W]` is padded periodically up to `H' x W'`, the next
//! multiples of the patch size `P`, then cut into `N = (H'/P)(W'/P)`
//! non-overlapping patches in row-major patch order. Each patch flattens to
//! a `C*P*P` column ordered `(channel, row, col)`. A kernel-size = stride = P
//! convolution is then an affine map of these columns.

use serde::{Deserialize, Serialize};

use super::ops::{affine, affine_backward};
use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        patch: usize,
    ) -> Result<Self, NnError> {
        if channels == 0 || height == 0 || width == 0 || patch == 0 {
            return Err(NnError::Shape(format!(
                "degenerate patch geometry C={channels} H={height} W={width} P={patch}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            patch,
        })
    }

    pub fn padded_height(&self) -> usize {
        self.height.div_ceil(self.patch) * self.patch
    }

    pub fn padded_width(&self) -> usize {
        self.width.div_ceil(self.patch) * self.patch
    }

    pub fn patches_y(&self) -> usize {
        self.padded_height() / self.patch
    }

    pub fn patches_x(&self) -> usize {
        self.padded_width() / self.patch
    }

    pub fn n_tokens(&self) -> usize {
        self.patches_y() * self.patches_x()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    /// Calls `f(token, column, image_index)` for every padded pixel; the
    /// image index wraps periodically into the unpadded image.
    fn for_each_pixel(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.patch;
        let (h, w) = (self.height, self.width);
        for py in 0..self.patches_y() {
            for px in 0..self.patches_x() {
                let tok = py * self.patches_x() + px;
                for c in 0..self.channels {
                    for dy in 0..p {
                        let y = (py * p + dy) % h;
                        for dx in 0..p {
                            let x = (px * p + dx) % w;
                            f(tok, (c * p + dy) * p + dx, (c * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }

    /// Same as `for_each_pixel` but only for pixels inside the unpadded
    /// image (no wrap-around duplicates).
    fn for_each_cropped(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.patch;
        let (h, w) = (self.height, self.width);
        for py in 0..self.patches_y() {
            for px in 0..self.patches_x() {
                let tok = py * self.patches_x() + px;
                for c in 0..self.channels {
                    for dy in 0..p {
                        let y = py * p + dy;
                        if y >= h {
                            break;
                        }
                        for dx in 0..p {
                            let x = px * p + dx;
                            if x >= w {
                                break;
                            }
                            f(tok, (c * p + dy) * p + dx, (c * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
}

/// Circular pad and im2col: image `[C, H, W]` to columns `[N, C*P*P]`.
pub fn patchify(img: &[f64], g: &PatchGeometry) -> Result<Tensor, NnError> {
    if img.len() != g.image_len() {
        return Err(NnError::Shape(format!(
            "image has {} values, geometry expects {}",
            img.len(),
            g.image_len()
        )));
    }
    let dim = g.patch_dim();
    let mut cols = Tensor::zeros(&[g.n_tokens(), dim]);
    let data = cols.data_mut();
    g.for_each_pixel(|tok, col, idx| data[tok * dim + col] = img[idx]);
    Ok(cols)
}

/// Adjoint of [`patchify`]: wrapped duplicates accumulate.
pub fn patchify_backward(dcols: &Tensor, g: &PatchGeometry) -> Vec<f64> {
    let dim = g.patch_dim();
    let mut dimg = vec![0.0; g.image_len()];
    let d = dcols.data();
    g.for_each_pixel(|tok, col, idx| dimg[idx] += d[tok * dim + col]);
    dimg
}

/// Assembles columns `[N, C*P*P]` into the padded image and crops to `[C, H, W]`.
pub fn unpatchify(cols: &Tensor, g: &PatchGeometry) -> Result<Vec<f64>, NnError> {
    if cols.shape() != [g.n_tokens(), g.patch_dim()] {
        return Err(NnError::Shape(format!(
            "columns {:?} do not match {} tokens of width {}",
            cols.shape(),
            g.n_tokens(),
            g.patch_dim()
        )));
    }
    let dim = g.patch_dim();
    let mut img = vec![0.0; g.image_len()];
    let d = cols.data();
    g.for_each_cropped(|tok, col, idx| img[idx] = d[tok * dim + col]);
    Ok(img)
}

/// Adjoint of [`unpatchify`]: cropped-away pixels get zero gradient.
pub fn unpatchify_backward(dimg: &[f64], g: &PatchGeometry) -> Tensor {
    let dim = g.patch_dim();
    let mut dcols = Tensor::zeros(&[g.n_tokens(), dim]);
    let d = dcols.data_mut();
    g.for_each_cropped(|tok, col, idx| d[tok * dim + col] = dimg[idx]);
    dcols
}

/// Patch convolution (kernel = stride = P) of a circularly padded image.
/// `kernel` is `[C*P*P, D]`. Returns tokens `[N, D]`.
pub fn conv_patch(
    img: &[f64],
    g: &PatchGeometry,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, NnError> {
    affine(&patchify(img, g)?, kernel, bias)
}

/// Transposed patch convolution: tokens `[N, D]` through `kernel`
/// `[D, C*P*P]`, reassembled and cropped to `[C, H, W]`.
pub fn deconv_patch(
    tokens: &Tensor,
    g: &PatchGeometry,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<Vec<f64>, NnError> {
    unpatchify(&affine(tokens, kernel, bias)?, g)
}

/// Gradients of [`deconv_patch`]; returns the token gradient.
pub fn deconv_patch_backward(
    tokens: &Tensor,
    g: &PatchGeometry,
    kernel: &Tensor,
    dimg: &[f64],
    dkernel: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let dcols = unpatchify_backward(dimg, g);
    affine_backward(tokens, kernel, &dcols, dkernel, dbias)
}
