//! Single-level 2-D orthonormal Haar transform.
//!
//! Each 2x2 block `[a b; c d]` maps to four subbands with scale 1/2:
//!
//! ```text
//! LL = ( a + b + c + d) / 2      LH = (-a - b + c + d) / 2
//! HL = (-a + b - c + d) / 2      HH = ( a - b - c + d) / 2
//! ```
//!
//! Output channels are laid out blockwise as `[LL | LH | HL | HH]`, each block
//! holding the C input channels in order. The transform matrix is symmetric
//! and orthogonal, so the inverse uses the same butterflies and is also the
//! adjoint used for backpropagation.
//!
//! Graph-level versions are [`Graph::dwt2d`](crate::Graph::dwt2d) and
//! [`Graph::idwt2d`](crate::Graph::idwt2d).

use crate::tensor::{Element, Result, Tensor, TensorError};

/// N x C x H x W -> N x 4C x H/2 x W/2. H and W must be even.
pub fn dwt2d<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("dwt2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddSpatial { op: "dwt2d", h, w });
    }
    let (hh, hw) = (h / 2, w / 2);
    let half = T::lit(0.5);
    let band = c * hh * hw;
    let mut out = vec![T::zero(); n * 4 * band];
    let src = input.data();
    for s in 0..n {
        let dst = &mut out[s * 4 * band..(s + 1) * 4 * band];
        for ch in 0..c {
            let plane = &src[((s * c) + ch) * h * w..((s * c) + ch + 1) * h * w];
            for y in 0..hh {
                for x in 0..hw {
                    let a = plane[2 * y * w + 2 * x];
                    let b = plane[2 * y * w + 2 * x + 1];
                    let cc = plane[(2 * y + 1) * w + 2 * x];
                    let d = plane[(2 * y + 1) * w + 2 * x + 1];
                    let o = (ch * hh + y) * hw + x;
                    dst[o] = (a + b + cc + d) * half;
                    dst[band + o] = (cc + d - a - b) * half;
                    dst[2 * band + o] = (b + d - a - cc) * half;
                    dst[3 * band + o] = (a + d - b - cc) * half;
                }
            }
        }
    }
    Tensor::new([n, 4 * c, hh, hw], out)
}

/// N x 4C x h x w -> N x C x 2h x 2w, exact inverse of [`dwt2d`].
pub fn idwt2d<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c4, hh, hw] = input.dims4("idwt2d")?;
    if c4 % 4 != 0 {
        return Err(TensorError::ChannelDivisibility { op: "idwt2d", channels: c4, divisor: 4 });
    }
    let c = c4 / 4;
    let (h, w) = (2 * hh, 2 * hw);
    let half = T::lit(0.5);
    let band = c * hh * hw;
    let mut out = vec![T::zero(); n * c * h * w];
    let src = input.data();
    for s in 0..n {
        let sb = &src[s * 4 * band..(s + 1) * 4 * band];
        for ch in 0..c {
            let plane = &mut out[((s * c) + ch) * h * w..((s * c) + ch + 1) * h * w];
            for y in 0..hh {
                for x in 0..hw {
                    let o = (ch * hh + y) * hw + x;
                    let (ll, lh, hl, hh_) = (sb[o], sb[band + o], sb[2 * band + o], sb[3 * band + o]);
                    plane[2 * y * w + 2 * x] = (ll - lh - hl + hh_) * half;
                    plane[2 * y * w + 2 * x + 1] = (ll - lh + hl - hh_) * half;
                    plane[(2 * y + 1) * w + 2 * x] = (ll + lh - hl - hh_) * half;
                    plane[(2 * y + 1) * w + 2 * x + 1] = (ll + lh + hl + hh_) * half;
                }
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}
