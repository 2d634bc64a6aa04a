//! Central finite-difference gradient checking.
//!
//! The error reported per input is the norm-wise relative error
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`, with the
//! denominator floored at `floor` so an input with (near) zero gradient is
//! judged on absolute error instead.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, tol: 1e-4, floor: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error over all inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Dimension(format!("grad_check needs a scalar output, got {:?}", v.shape())));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::Numeric(format!("non-finite function value {s}")));
    }
    Ok(s)
}

/// Compares the tape gradient of scalar `f` with central differences with
/// respect to every tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    for (a, t) in analytic.iter().zip(inputs) {
        if a.shape() != t.shape() {
            return Err(Error::Dimension("gradient shape differs from its value".into()));
        }
        if !a.is_finite() {
            return Err(Error::Numeric("non-finite analytic gradient".into()));
        }
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.eps;
            let plus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - cfg.eps;
            let minus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * cfg.eps);
        }
        numeric.push(g);
    }

    let per_input: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a.zip_map(n, |x, y| x - y).expect("same shape").norm();
            diff / a.norm().max(n.norm()).max(cfg.floor)
        })
        .collect();
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport { max_rel_error, passed: max_rel_error < cfg.tol, per_input, analytic, numeric })
}

/// Gradient check of a model loss with respect to the named parameters.
///
/// `f` receives a tape on which every name in `names` is already bound to a
/// leaf, and must build the scalar loss by looking parameters up through
/// [`Tape::param`]. Parameters not listed are read from `store` as usual.
pub fn grad_check_params<F>(
    store: &ParamStore,
    names: &[String],
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| store.value(n).cloned())
        .collect::<Result<_>>()?;
    grad_check(
        |tape, vars| {
            for (n, v) in names.iter().zip(vars) {
                tape.bind(n, *v);
            }
            f(tape, store)
        },
        &inputs,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::row_vector(&[1.0, 2.0]);
        let r = grad_check(
            |t, v| {
                let s = t.square(v[0]);
                Ok(t.sum_all(s))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.analytic[0].data(), &[2.0, 4.0]);
        assert!(r.numeric[0].max_abs_diff(&r.analytic[0]) < 1e-6);
        assert!(r.passed);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::row_vector(&[1.0, -3.0]);
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.analytic[0].data().iter().all(|&v| v == 0.0));
        assert!(r.numeric[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_values_are_numeric_errors() {
        let x = Tensor::row_vector(&[0.0]);
        let r = grad_check(
            |t, v| {
                let s = t.scale(v[0], f64::INFINITY);
                Ok(t.sum_all(s))
            },
            &[x],
            GradCheckConfig::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu has a kink at zero: analytic 0, central difference 0.5.
        let x = Tensor::row_vector(&[0.0]);
        let r = grad_check(
            |t, v| {
                let a = t.relu(v[0]);
                Ok(t.sum_all(a))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed);
    }
}
