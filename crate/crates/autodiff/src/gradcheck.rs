//! Central finite-difference verification of tape gradients.

use std::fmt::Display;

use crate::{AutodiffError, Tape, Tensor, Var};

/// Settings for [`finite_diff_check_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Skip entries whose perturbation within `±10·step` changes a branch
    /// decision (sign at an `abs`/leaky-ReLU/clamp input, a max-pool winner or
    /// a data-dependent index list).
    pub kink_exclusion: bool,
    /// Restrict the check to these flat parameter positions.
    pub entries: Option<Vec<usize>>,
    /// Smallest denominator of the relative error, so that an exactly zero
    /// gradient is not compared against rounding noise.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink_exclusion: true,
            entries: None,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_entry: Option<usize>,
    pub checked: usize,
    pub excluded: usize,
}

/// `|a - c| / max(|a| + |c|, floor)`.
pub fn relative_error(analytic: f64, central: f64, floor: f64) -> f64 {
    (analytic - central).abs() / (analytic.abs() + central.abs()).max(floor)
}

fn evaluate<F, E>(f: &mut F, params: &Tensor) -> Result<(f64, u64, Tape, Var, Var), AutodiffError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, E>,
    E: Display,
{
    let mut tape = Tape::new();
    let p = tape.param(params.clone());
    let out = f(&mut tape, p).map_err(|e| AutodiffError::Objective(e.to_string()))?;
    if tape.value(out).numel() != 1 {
        return Err(AutodiffError::NonScalarOutput(tape.shape(out).to_vec()));
    }
    let v = tape.item(out);
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite(format!("objective value {v}")));
    }
    Ok((v, tape.branch_signature(), tape, out, p))
}

/// Maximum relative error between the tape gradient and central differences
/// at `step`, with kink exclusion enabled.
pub fn finite_diff_check<F, E>(f: F, params: &Tensor, step: f64) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, E>,
    E: Display,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    finite_diff_check_with(f, params, &opts).map(|r| r.max_relative_error)
}

pub fn finite_diff_check_with<F, E>(
    mut f: F,
    params: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, E>,
    E: Display,
{
    if !(opts.step > 0.0) || !opts.step.is_finite() {
        return Err(AutodiffError::Objective(format!(
            "step must be positive, got {}",
            opts.step
        )));
    }
    let (_, sig0, mut tape, out, p) = evaluate(&mut f, params)?;
    tape.backward(out)?;
    let analytic = tape.grad(p);
    drop(tape);

    let entries: Vec<usize> = match &opts.entries {
        Some(e) => e.clone(),
        None => (0..params.numel()).collect(),
    };
    let h = opts.step;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_entry: None,
        checked: 0,
        excluded: 0,
    };
    let mut work = params.clone();
    for &k in &entries {
        if k >= params.numel() {
            return Err(AutodiffError::IndexOutOfRange {
                index: k,
                len: params.numel(),
            });
        }
        let base = params.data()[k];
        let mut at = |offset: f64, f: &mut F| -> Result<(f64, u64), AutodiffError> {
            work.data_mut()[k] = base + offset;
            let (v, s, ..) = evaluate(f, &work)?;
            work.data_mut()[k] = base;
            Ok((v, s))
        };
        let (fp, sp) = at(h, &mut f)?;
        let (fm, sm) = at(-h, &mut f)?;
        if opts.kink_exclusion {
            let mut crosses = sp != sig0 || sm != sig0;
            if !crosses {
                let (_, s_far_p) = at(10.0 * h, &mut f)?;
                let (_, s_far_m) = at(-10.0 * h, &mut f)?;
                crosses = s_far_p != sig0 || s_far_m != sig0;
            }
            if crosses {
                report.excluded += 1;
                continue;
            }
        }
        let central = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[k], central, opts.abs_floor);
        report.checked += 1;
        if err > report.max_relative_error || report.worst_entry.is_none() {
            report.max_relative_error = err;
            report.worst_entry = Some(k);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]);
        let err = finite_diff_check(
            |t: &mut Tape, p| -> Result<Var, AutodiffError> {
                let s = t.square(p);
                let s = t.scale(s, 1.5);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn kink_entries_are_excluded() {
        let x = Tensor::vector(vec![1e-6, 0.5, -0.25]);
        let opts = GradCheckOptions::default();
        let r = finite_diff_check_with(
            |t: &mut Tape, p| -> Result<Var, AutodiffError> {
                let a = t.abs(p);
                Ok(t.sum(a))
            },
            &x,
            &opts,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_relative_error < 1e-9);
    }

    #[test]
    fn non_finite_perturbation_is_error() {
        let x = Tensor::vector(vec![1e-7]);
        let err = finite_diff_check(
            |t: &mut Tape, p| -> Result<Var, AutodiffError> {
                let l = t.log(p);
                Ok(t.sum(l))
            },
            &x,
            1e-5,
        );
        assert!(matches!(err, Err(AutodiffError::NonFinite(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::vector(vec![0.4, 0.9]);
        // exp(x) through a fixed-value constant breaks the gradient path
        let err = finite_diff_check(
            |t: &mut Tape, p| -> Result<Var, AutodiffError> {
                let v = t.value(p).clone();
                let c = t.constant(v);
                let e = t.exp(c);
                let s = t.mul(e, p)?;
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-3);
    }
}
