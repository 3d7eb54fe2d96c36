//! Stride-1 zero-padded 2-D cross-correlation.
//!
//! `conv2d_direct` is the straightforward nested-loop definition. The graph
//! uses the im2col + GEMM route in `forward_sample` / `backward_sample`.

use super::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// Validates `input` (N x Cin x H x W) against `weight` (Cout x Cin x k x k)
    /// and `bias` (Cout). Returns the geometry and batch size.
    pub fn infer<T: Element>(
        op: &'static str,
        input: &Tensor<T>,
        weight_shape: &[usize],
        bias_len: usize,
        pad: usize,
    ) -> Result<(Self, usize)> {
        let [n, cin, h, w] = input.dims4(op)?;
        let [cout, wcin, kh, kw] = match *weight_shape {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(TensorError::Rank { op, rank: 4, got: weight_shape.to_vec() }),
        };
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: vec![cout, cin, kh, kw],
                got: weight_shape.to_vec(),
            });
        }
        if kh != kw || kh == 0 {
            return Err(TensorError::Invalid(format!("{op}: kernel must be square and non-empty, got {kh}x{kw}")));
        }
        if bias_len != cout {
            return Err(TensorError::ShapeMismatch { op, expected: vec![cout], got: vec![bias_len] });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid(format!(
                "{op}: kernel {kh}x{kw} larger than padded input {h}x{w} (+{pad})"
            )));
        }
        Ok((Self { cin, cout, h, w, k: kh, pad }, n))
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    cols.clear();
    cols.resize(g.patch_len() * plane, T::zero());
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.k {
            for dx in 0..g.k {
                let row = (c * g.k + dy) * g.k + dx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                // valid output x-range for this horizontal offset
                let x0 = g.pad.saturating_sub(dx);
                let x1 = (g.w + g.pad).saturating_sub(dx).min(ow);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..oh {
                    let iy = y + dy;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let ix0 = x0 + dx - g.pad;
                    dst[y * ow + x0..y * ow + x1].copy_from_slice(&src[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, dx_out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.cin {
        let dst = &mut dx_out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.k {
            for dx in 0..g.k {
                let row = (c * g.k + dy) * g.k + dx;
                let src = &cols[row * plane..(row + 1) * plane];
                let x0 = g.pad.saturating_sub(dx);
                let x1 = (g.w + g.pad).saturating_sub(dx).min(ow);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..oh {
                    let iy = y + dy;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let ix0 = x0 + dx - g.pad;
                    let d = &mut dst[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)];
                    for (o, s) in d.iter_mut().zip(&src[y * ow + x0..y * ow + x1]) {
                        *o = *o + *s;
                    }
                }
            }
        }
    }
}

/// One sample: `out` (Cout x OH x OW) = weight * x + bias.
pub(crate) fn forward_sample<T: Element>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let plane = g.out_h() * g.out_w();
    for (o, chunk) in out.chunks_exact_mut(plane).enumerate() {
        chunk.fill(bias[o]);
    }
    let kk = g.patch_len();
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        im2col(x, g, scratch);
        scratch
    };
    T::gemm(
        g.cout,
        kk,
        plane,
        T::one(),
        (weight, kk as isize, 1),
        (cols, plane as isize, 1),
        T::one(),
        (out, plane as isize, 1),
    );
}

/// Accumulates input, weight and bias gradients for one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_sample<T: Element>(
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let plane = g.out_h() * g.out_w();
    let kk = g.patch_len();
    if let Some(db) = db {
        for (o, chunk) in dout.chunks_exact(plane).enumerate() {
            db[o] = db[o] + chunk.iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, scratch);
            scratch
        };
        // dW (Cout x kk) += dout (Cout x P) * cols^T (P x kk)
        T::gemm(
            g.cout,
            plane,
            kk,
            T::one(),
            (dout, plane as isize, 1),
            (cols, 1, plane as isize),
            T::one(),
            (dw, kk as isize, 1),
        );
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            T::gemm(
                kk,
                g.cout,
                plane,
                T::one(),
                (weight, 1, kk as isize),
                (dout, plane as isize, 1),
                T::one(),
                (dx, plane as isize, 1),
            );
        } else {
            scratch.clear();
            scratch.resize(kk * plane, T::zero());
            // dcols (kk x P) = W^T (kk x Cout) * dout (Cout x P)
            T::gemm(
                kk,
                g.cout,
                plane,
                T::one(),
                (weight, 1, kk as isize),
                (dout, plane as isize, 1),
                T::zero(),
                (scratch, plane as isize, 1),
            );
            col2im_add(scratch, g, dx);
        }
    }
}

/// Reference convolution: output[n,o,y,x] = bias[o] + sum input[n,c,y+dy-p,x+dx-p] * weight[o,c,dy,dx].
pub fn conv2d_direct<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (g, n) = ConvGeom::infer("conv2d", input, weight.shape(), bias.numel(), padding)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Tensor::zeros([n, g.cout, oh, ow]);
    let od = out.data_mut();
    for b in 0..n {
        for o in 0..g.cout {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.data()[o];
                    for c in 0..g.cin {
                        for dy in 0..g.k {
                            for dx in 0..g.k {
                                let iy = (y + dy) as isize - g.pad as isize;
                                let ix = (x + dx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let v = input.at4(b, c, iy as usize, ix as usize);
                                acc = acc + v * weight.at4(o, c, dy, dx);
                            }
                        }
                    }
                    od[((b * g.cout + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// im2col + GEMM convolution outside of any graph.
pub fn conv2d_fast<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (g, n) = ConvGeom::infer("conv2d", input, weight.shape(), bias.numel(), padding)?;
    let mut out = Tensor::zeros([n, g.cout, g.out_h(), g.out_w()]);
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.out_h() * g.out_w();
    let mut scratch = Vec::new();
    for b in 0..n {
        forward_sample(
            &input.data()[b * in_len..(b + 1) * in_len],
            weight.data(),
            bias.data(),
            &g,
            &mut out.data_mut()[b * out_len..(b + 1) * out_len],
            &mut scratch,
        );
    }
    Ok(out)
}
