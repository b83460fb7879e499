//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::Bound;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Added to every analytic gradient entry before comparison; used to
    /// confirm the checker notices a wrong gradient.
    pub inject_fault: Option<f64>,
    /// Lower bound on the relative-error denominator.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            inject_fault: None,
            denominator_floor: REL_ERROR_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(forward: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = forward(&mut g, &vars)?;
    let t = g.value(loss);
    if !t.is_scalar() {
        return Err(Error::NotScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Maximum relative error between reverse-mode gradients and central
/// differences over every entry of every parameter.
pub fn grad_check<F>(forward: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        epsilon,
        ..Default::default()
    };
    grad_check_with(forward, params, opts).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(forward: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = forward(&mut g, &vars)?;
    let base = g.value(loss).item();
    g.backward(loss)?;
    let analytic = Bound::from_vars(vars).grads(&g);
    drop(g);

    let again = evaluate(&forward, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + opts.epsilon;
            let plus = evaluate(&forward, &work)?;
            work[p].data_mut()[i] = orig - opts.epsilon;
            let minus = evaluate(&forward, &work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[p][i] + opts.inject_fault.unwrap_or(0.0);
            let err = relative_error_floored(a, numeric, opts.denominator_floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (p, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
