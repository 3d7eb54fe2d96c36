//! Central finite-difference verification of analytic gradients (64-bit).

use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the per-tensor maximum relative error.
    pub tolerance: f64,
    /// Check at most this many (seeded, uniformly chosen) elements per tensor.
    pub max_elements_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-5, max_elements_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub label: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} [{}] max rel err {:.3e} (tol {:.0e})",
            self.label,
            if self.passed() { "ok" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<28} {:>7}/{:<7} rel {:.3e} abs {:.3e}",
                t.name, t.checked, t.numel, t.max_rel_error, t.max_abs_error
            )?;
        }
        Ok(())
    }
}

/// |a - b| / max(1e-8, |a| + |b|)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_loss<F>(build: &F, params: &[(String, Tensor<f64>)]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, for every tensor in `params`.
pub fn grad_check<F>(
    label: &str,
    params: &[(String, Tensor<f64>)],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf").to_vec()).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (ti, (name, t)) in params.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = match opts.max_elements_per_tensor {
            Some(m) if m < n => index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut check =
            TensorCheck { name: name.clone(), numel: n, checked: picks.len(), max_rel_error: 0.0, max_abs_error: 0.0 };
        for &i in &picks {
            let orig = t.data()[i];
            work[ti].1.data_mut()[i] = orig + opts.step;
            let plus = eval_loss(&build, &work)?;
            work[ti].1.data_mut()[i] = orig - opts.step;
            let minus = eval_loss(&build, &work)?;
            work[ti].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti][i];
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        tensors.push(check);
    }
    Ok(GradReport { label: label.to_string(), tolerance: opts.tolerance, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_is_exact() {
        let params = vec![("x".to_string(), Tensor::zeros([3]))];
        let report = grad_check("identity", &params, |g, v| Ok(g.sum(v[0])), &Default::default()).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
        assert!(report.passed());
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let params = vec![("x".to_string(), Tensor::new([2], vec![0.5, -1.5]).unwrap())];
        let report = grad_check(
            "doubled",
            &params,
            |g, v| {
                let out = g.value(v[0]).clone();
                // forward is identity, backward claims slope 2
                let y = g.custom(&[v[0]], out, Box::new(|_, up| vec![Some(up.iter().map(|u| 2.0 * u).collect())]));
                Ok(g.sum(y))
            },
            &Default::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error() - 1.0 / 3.0).abs() < 1e-6);
    }
}
