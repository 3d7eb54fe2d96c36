//! Finite-difference checks over every primitive, every block and a whole
//! small network, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::layers::{DynamicConv, ParamSet, ResidualDenseBlock, WeightGenerator};
use crate::model::Mwdcnn;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradReport};
use crate::tensor::{Graph, Result, Tensor, Var};

/// Knobs for [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    /// Random draws per primitive.
    pub primitive_seeds: u64,
    /// Base channels of the block and network checks.
    pub base_channels: usize,
    /// Input side length of the network check.
    pub input_size: usize,
    /// Element cap per tensor for block and network checks.
    pub block_sample: Option<usize>,
    /// Replace ReLU's backward rule with a wrong one.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            check: GradCheckOptions::default(),
            primitive_seeds: 20,
            base_channels: 8,
            input_size: 8,
            block_sample: Some(24),
            inject_fault: false,
        }
    }
}

/// Fixed pseudo-random weights that turn any output into a scalar loss
/// without the symmetry of a plain sum.
pub fn projection(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| {
        // splitmix64 finalizer
        let mut z = (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

/// `sum(out * projection(shape(out)))`
pub fn project<T: crate::tensor::Element>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    let w = projection(g.shape(out)).cast::<T>();
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Uniform values in [-1, 1] with magnitude at least `gap`, keeping random
/// samples clear of ReLU's kink.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn relu_with_fault(g: &mut Graph<f64>, x: Var, fault: bool) -> Var {
    if !fault {
        return g.relu(x);
    }
    let out = Tensor::from_fn(g.shape(x).to_vec(), |i| g.value(x).data()[i].max(0.0));
    // wrong rule: passes the upstream gradient through unmasked
    g.custom(&[x], out, Box::new(|_inputs, up| vec![Some(up.to_vec())]))
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn primitive_checks(opts: &SuiteOptions, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let co = GradCheckOptions { seed, ..opts.check.clone() };
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, rng);
    let mut out = Vec::new();
    let tag = |name: &str| format!("{name} (seed {seed})");

    let ks = [1, 3, 5][rng.random_range(0..3)];
    let (n, cin, cout, h, w) = (
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(3..7),
        rng.random_range(3..7),
    );
    let conv_params = named(vec![
        ("x", r(&[n, cin, h, w], &mut rng)),
        ("weight", r(&[cout, cin, ks, ks], &mut rng)),
        ("bias", r(&[cout], &mut rng)),
    ]);
    out.push(grad_check(
        &tag("conv2d"),
        &conv_params,
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], ks / 2)?;
            project(g, y)
        },
        &co,
    )?);

    let k = rng.random_range(1..4);
    let logits = r(&[n, k], &mut rng);
    let dyn_params = named(vec![
        ("x", r(&[n, cin, h, w], &mut rng)),
        ("logits", logits),
        ("kernels", r(&[k, cout, cin, ks, ks], &mut rng)),
        ("biases", r(&[k, cout], &mut rng)),
    ]);
    out.push(grad_check(
        &tag("dynamic_conv2d"),
        &dyn_params,
        |g, v| {
            let a = g.softmax(v[1])?;
            let y = g.dynamic_conv2d(v[0], a, v[2], v[3], ks / 2)?;
            project(g, y)
        },
        &co,
    )?);

    let fault = opts.inject_fault;
    out.push(grad_check(
        &tag("relu"),
        &named(vec![("x", away_from_zero(&[2, 3, 4], 1e-2, &mut rng))]),
        move |g, v| {
            let y = relu_with_fault(g, v[0], fault);
            project(g, y)
        },
        &co,
    )?);

    out.push(grad_check(
        &tag("softmax"),
        &named(vec![("x", r(&[3, 5], &mut rng).map(|v| 3.0 * v))]),
        |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y)
        },
        &co,
    )?);

    out.push(grad_check(
        &tag("global_avg_pool"),
        &named(vec![("x", r(&[2, 3, 4, 5], &mut rng))]),
        |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y)
        },
        &co,
    )?);

    let ab = named(vec![("a", r(&[2, 3, 4], &mut rng)), ("b", r(&[2, 3, 4], &mut rng))]);
    out.push(grad_check(
        &tag("add/sub/mul/scale"),
        &ab,
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(s, d)?;
            let m = g.scale(m, 1.7);
            let t = g.add_n(&[m, v[0], v[0]])?;
            project(g, t)
        },
        &co,
    )?);

    out.push(grad_check(
        &tag("concat/reshape"),
        &named(vec![("a", r(&[2, 1, 2, 3], &mut rng)), ("b", r(&[2, 3, 2, 3], &mut rng))]),
        |g, v| {
            let c = g.concat_channels(&[v[0], v[1], v[0]])?;
            let c = g.reshape(c, &[2, 30])?;
            project(g, c)
        },
        &co,
    )?);

    out.push(grad_check(
        &tag("dwt2d/idwt2d"),
        &named(vec![("x", r(&[2, 2, 4, 6], &mut rng)), ("bands", r(&[1, 4, 3, 2], &mut rng))]),
        |g, v| {
            let a = g.dwt2d(v[0])?;
            let b = g.idwt2d(v[1])?;
            let la = project(g, a)?;
            let lb = project(g, b)?;
            g.add(la, lb)
        },
        &co,
    )?);

    // residuals within a few eps of zero put Charbonnier's curvature (~1/eps)
    // beyond what an h = 1e-4 central difference resolves
    let pred = r(&[2, 1, 3, 3], &mut rng);
    let offset = away_from_zero(&[2, 1, 3, 3], 0.05, &mut rng);
    let target = Tensor::from_fn([2, 1, 3, 3], |i| pred.data()[i] + offset.data()[i]);
    let pt = named(vec![("pred", pred), ("target", target)]);
    out.push(grad_check(&tag("squared_error"), &pt, |g, v| g.squared_error(v[0], v[1], 0.25), &co)?);
    out.push(grad_check(&tag("charbonnier"), &pt, |g, v| g.charbonnier(v[0], v[1], 1e-3), &co)?);
    Ok(out)
}

trait MapValues {
    fn map(self, f: impl Fn(f64) -> f64) -> Self;
}

impl MapValues for Tensor<f64> {
    fn map(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// Parameters plus a trailing input tensor, ready for [`grad_check`].
fn with_input(ps: &ParamSet<f64>, x: Tensor<f64>) -> Vec<(String, Tensor<f64>)> {
    let mut v: Vec<_> = ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    v.push(("input".into(), x));
    v
}

/// Small non-zero biases so no unit sits exactly at a ReLU kink.
fn jitter_biases(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..ps.len() {
        let id = crate::layers::ParamId(i);
        if ps.name(id).ends_with("bias") || ps.name(id).ends_with("biases") {
            for v in ps.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
}

fn block_checks(opts: &SuiteOptions) -> Result<Vec<GradReport>> {
    let c = opts.base_channels;
    let s = opts.input_size;
    let co = GradCheckOptions { max_elements_per_tensor: opts.block_sample, ..opts.check.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.check.seed ^ 0xB10C);
    let mut out = Vec::new();
    let input =
        |ch: usize, side: usize, rng: &mut ChaCha8Rng| Tensor::rand_uniform([1, ch, side, side], -1.0, 1.0, rng);

    let mut ps = ParamSet::default();
    let wg = WeightGenerator::new(&mut ps, "wg", c, 4, 1.0, &mut rng);
    jitter_biases(&mut ps, &mut rng);
    let n = ps.len();
    out.push(grad_check(
        "weight_generator",
        &with_input(&ps, input(c, s, &mut rng)),
        |g, v| {
            let y = wg.forward(g, &v[..n], v[n])?;
            project(g, y)
        },
        &co,
    )?);

    let mut ps = ParamSet::default();
    let dc = DynamicConv::new(&mut ps, "dynamic", c, c, 5, 4, 1.0, &mut rng);
    jitter_biases(&mut ps, &mut rng);
    let n = ps.len();
    out.push(grad_check(
        "dynamic_conv",
        &with_input(&ps, input(c, s, &mut rng)),
        |g, v| {
            let y = dc.forward(g, &v[..n], v[n])?;
            project(g, y)
        },
        &co,
    )?);

    let mut ps = ParamSet::default();
    let rdb = ResidualDenseBlock::new(&mut ps, "rdb", c, c, 5, &mut rng);
    jitter_biases(&mut ps, &mut rng);
    let n = ps.len();
    out.push(grad_check(
        "residual_dense_block",
        &with_input(&ps, input(c, s, &mut rng)),
        |g, v| {
            let y = rdb.forward(g, &v[..n], v[n])?;
            project(g, y)
        },
        &co,
    )?);

    let mut model = Mwdcnn::<f64>::new(ModelConfig { seed: opts.check.seed, ..ModelConfig::toy(c) })
        .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
    jitter_biases(model.params_mut(), &mut rng);
    let model = &model;
    let n = model.params().len();
    let noisy = input(1, s, &mut rng).map(|v| 0.5 + 0.5 * v);

    out.push(grad_check(
        "dcb",
        &with_input(model.params(), noisy.clone()),
        |g, v| {
            let y = model.dcb_forward(g, &v[..n], v[n])?;
            project(g, y)
        },
        &co,
    )?);
    out.push(grad_check(
        "web",
        &with_input(model.params(), input(c, s, &mut rng)),
        |g, v| {
            let y = model.web_forward(g, &v[..n], 1, v[n])?;
            project(g, y)
        },
        &co,
    )?);
    let mut rb_params = with_input(model.params(), input(c, s, &mut rng));
    rb_params.push(("noisy".into(), noisy.clone()));
    out.push(grad_check(
        "rb",
        &rb_params,
        |g, v| {
            let y = model.rb_forward(g, &v[..n], v[n], v[n + 1])?;
            project(g, y)
        },
        &co,
    )?);

    let mut full = with_input(model.params(), noisy);
    full.push(("clean".into(), input(1, s, &mut rng).map(|v| 0.5 + 0.5 * v)));
    out.push(grad_check(
        &format!("mwdcnn (base {c}, 1x1x{s}x{s}, mse)"),
        &full,
        |g, v| {
            let y = model.forward(g, &v[..n], v[n])?;
            crate::training::mse_loss(g, y, v[n + 1], 1)
        },
        &co,
    )?);
    Ok(out)
}

/// Every primitive over `primitive_seeds` draws, then WG, dynamic conv, RDB,
/// DCB, WEB, RB and the whole network.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    for seed in 0..opts.primitive_seeds {
        reports.extend(primitive_checks(opts, opts.check.seed.wrapping_add(seed))?);
    }
    reports.extend(block_checks(opts)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_primitives_pass() {
        let opts = SuiteOptions::default();
        for r in primitive_checks(&opts, 3).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = SuiteOptions { inject_fault: true, ..SuiteOptions::default() };
        let reports = primitive_checks(&opts, 0).unwrap();
        let relu = reports.iter().find(|r| r.label.starts_with("relu")).unwrap();
        assert!(!relu.passed(), "{relu}");
    }
}
