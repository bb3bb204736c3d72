//! Central finite-difference verification of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor in the relative error `|a - n| / (|a| + REL_FLOOR)`.
/// Central differences at a step of 1e-5 carry rounding noise near
/// `1e-16 |f| / 1e-5`, so gradients smaller than this are compared in
/// absolute terms instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-smooth boundary.
    pub skipped: usize,
}

fn eval_scalar<S>(
    f: &impl Fn(&mut Tape, Var) -> Result<(Var, S)>,
    x: &Matrix,
) -> Result<(f64, S)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, sig) = f(&mut tape, xv)?;
    let value = tape.value(out);
    if value.shape() != (1, 1) {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Domain(format!("function value {v} is not finite")));
    }
    Ok((v, sig))
}

/// Maximum entrywise relative error between the tape gradient of `f` at `x`
/// and central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let wrapped = |t: &mut Tape, v: Var| f(t, v).map(|out| (out, ()));
    grad_check_guarded(wrapped, x, eps, None).map(|r| r.max_rel_error)
}

/// Like [`grad_check`], but `f` also returns a signature of its discrete
/// state (active sets, selections, indicator patterns). Coordinates where
/// either perturbation changes the signature are skipped. `coords`
/// restricts the check to a subset of flat indices.
pub fn grad_check_guarded<F, S>(
    f: F,
    x: &Matrix,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<(Var, S)>,
    S: PartialEq,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (out, base_sig) = f(&mut tape, xv)?;
    if !tape.value(out).is_finite() {
        return Err(Error::Domain("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (fp, sp) = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let (fm, sm) = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + REL_FLOOR);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
