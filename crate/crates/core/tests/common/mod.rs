//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use mwdcnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Plain nested loops over (n, o, y, x, c, dy, dx) with zero padding.
pub fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], pad: usize) -> Vec<f64> {
    let [n, cin, h, wd] = xs;
    let [cout, wcin, k, _] = ws;
    assert_eq!(cin, wcin);
    let mut out = vec![0.0; n * cout * h * wd];
    for s in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = y as isize + dy as isize - pad as isize;
                                let ix = xx as isize + dx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * cin + c) * k + dy) * k + dx];
                            }
                        }
                    }
                    out[((s * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let xs: [usize; 4] = x.shape().try_into().unwrap();
    let ws: [usize; 4] = w.shape().try_into().unwrap();
    let out = naive_conv(x.data(), xs, w.data(), ws, b.data(), ws[2] / 2);
    Tensor::new([xs[0], ws[0], xs[2], xs[3]], out).unwrap()
}

pub fn relu_t(x: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i].max(0.0))
}

pub fn add_t(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + b.data()[i])
}

/// Channel concatenation of N x C_i x H x W tensors.
pub fn concat_t(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let [n, _, h, w]: [usize; 4] = parts[0].shape().try_into().unwrap();
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * total * h * w);
    for s in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[s * c * h * w..(s + 1) * c * h * w]);
        }
    }
    Tensor::new([n, total, h, w], data).unwrap()
}

/// Haar analysis straight from the 2x2 block formulas.
pub fn haar(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, 4 * c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let a = x.at4(s, ch, 2 * y, 2 * xx);
                    let b = x.at4(s, ch, 2 * y, 2 * xx + 1);
                    let cc = x.at4(s, ch, 2 * y + 1, 2 * xx);
                    let d = x.at4(s, ch, 2 * y + 1, 2 * xx + 1);
                    let bands = [
                        (a + b + cc + d) / 2.0,
                        (-a - b + cc + d) / 2.0,
                        (-a + b - cc + d) / 2.0,
                        (a - b - cc + d) / 2.0,
                    ];
                    for (k, v) in bands.into_iter().enumerate() {
                        out.data_mut()[((s * 4 * c + k * c + ch) * oh + y) * ow + xx] = v;
                    }
                }
            }
        }
    }
    out
}

/// Haar synthesis straight from the inverse formulas.
pub fn inverse_haar(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c4, oh, ow]: [usize; 4] = x.shape().try_into().unwrap();
    let c = c4 / 4;
    let mut out = Tensor::zeros([n, c, 2 * oh, 2 * ow]);
    let (h, w) = (2 * oh, 2 * ow);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let ll = x.at4(s, ch, y, xx);
                    let lh = x.at4(s, c + ch, y, xx);
                    let hl = x.at4(s, 2 * c + ch, y, xx);
                    let hh = x.at4(s, 3 * c + ch, y, xx);
                    let px = [
                        (2 * y, 2 * xx, (ll - lh - hl + hh) / 2.0),
                        (2 * y, 2 * xx + 1, (ll - lh + hl - hh) / 2.0),
                        (2 * y + 1, 2 * xx, (ll + lh - hl - hh) / 2.0),
                        (2 * y + 1, 2 * xx + 1, (ll + lh + hl + hh) / 2.0),
                    ];
                    for (yy, xi, v) in px {
                        out.data_mut()[((s * c + ch) * h + yy) * w + xi] = v;
                    }
                }
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
