//! Central finite differences: the oracle every analytic gradient is checked
//! against. All arithmetic here is 64-bit.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Step used by the gradient suites.
pub const GRADCHECK_EPS: f64 = 1e-3;
/// Acceptance threshold on [`relative_error`].
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Norm floor below which gradients are compared absolutely.
const NORM_FLOOR: f64 = 1e-6;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let partials = finite_diff_at(&f, x, eps, &coords)?;
    Tensor::new(x.shape().to_vec(), partials)
}

/// Central differences restricted to `coords`.
pub fn finite_diff_at<F>(f: &F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rel_err <= GRADCHECK_TOL
    }
}

/// A scalar function of one input tensor, expressed on a graph.
pub type InputFn<'a> = dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var> + 'a;

/// Compares the graph gradient of `f` w.r.t. its input at `x` with central
/// differences.
pub fn check_input(name: &str, f: &InputFn<'_>, x: &Tensor<f64>, eps: f64) -> Result<GradReport> {
    check_input_in(name, f, x, eps, None)
}

/// [`check_input`] for functions that also read parameters from `store`,
/// which stay fixed.
pub fn check_input_in(
    name: &str,
    f: &InputFn<'_>,
    x: &Tensor<f64>,
    eps: f64,
    store: Option<&ParamStore<f64>>,
) -> Result<GradReport> {
    let graph = || store.map_or_else(Graph::new, Graph::with_params);
    let mut g = graph();
    let xv = g.input(x.clone().with_grad());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).expect("input requires grad").to_vec();
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = graph();
        let v = g.input(t.clone());
        let out = f(&mut g, v)?;
        g.value(out).item()
    };
    let numeric = finite_diff_grad(eval, x, eps)?;
    Ok(GradReport {
        name: name.to_string(),
        rel_err: relative_error(&analytic, numeric.data()),
        checked: x.numel(),
    })
}

/// A scalar function of the parameters in a store.
pub type ParamFn<'a> = dyn Fn(&mut Graph<'_, f64>) -> Result<Var> + 'a;

/// Checks the gradient of every parameter tensor in `store`, probing at most
/// `max_coords` randomly chosen coordinates per tensor.
pub fn check_params<R: Rng>(
    prefix: &str,
    f: &ParamFn<'_>,
    store: &ParamStore<f64>,
    eps: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<Vec<GradReport>> {
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    g.backward(loss)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = g
        .param_leaves()
        .map(|(id, v)| (id, g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect();
    drop(g);

    let mut reports = Vec::new();
    for (id, grad) in analytic {
        if grad.is_empty() {
            continue;
        }
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let base = store.get(id)?.clone();
        let eval = |t: &Tensor<f64>| -> Result<f64> {
            let mut probe = store.clone();
            probe.set(id, t.clone())?;
            let mut g = Graph::with_params(&probe);
            let out = f(&mut g)?;
            g.value(out).item()
        };
        let numeric = finite_diff_at(&eval, &base, eps, &coords)?;
        let picked: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        reports.push(GradReport {
            name: format!("{prefix}:{}", store.name(id)),
            rel_err: relative_error(&picked, &numeric),
            checked: coords.len(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one() {
        let x = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exp_at_zero() {
        let x = Tensor::from_f64(vec![1], &[0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v.exp()).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let a = relative_error(&[1.0, 0.0], &[1.001, 0.0]);
        let b = relative_error(&[1000.0, 0.0], &[1001.0, 0.0]);
        assert!((a - b).abs() < 1e-12);
    }
}
