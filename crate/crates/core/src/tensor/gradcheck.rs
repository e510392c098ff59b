use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitude below which gradient entries are compared absolutely.
const ABS_FLOOR: f64 = 1e-6;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compare the reverse-mode gradient of `f` at `params` with central
/// differences of step `step`, entry by entry.
///
/// The numeric derivative uses the fourth-order central stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, so truncation error
/// stays well below the tolerance even for points near the ball boundary.
///
/// Piecewise primitives (ReLU, clamps, norm guards, argmax, ball
/// rescaling) are pinned to the branch taken at `params` for every
/// perturbed evaluation, so the numeric derivative is that of the same
/// smooth piece the reverse pass differentiates, even when a kink lies
/// within `2 * step`.
///
/// `f` builds a scalar on the tape it is handed from the leaves it is
/// handed, in `params` order. It always receives an evaluation-mode tape,
/// so dropout is inactive. The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    if let Some(p) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("parameter {p} is not finite")));
    }

    let mut tape = Tape::recording_branches();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    let branches = tape.branch_log();
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::replaying(&branches);
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut worst_pair = (0.0, 0.0);
    let mut checked = 0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        for (ei, a) in analytic.iter().enumerate() {
            let orig = params[pi].data()[ei];
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[ei] = orig + offset;
                eval(&work)
            };
            let (p1, m1) = (at(step)?, at(-step)?);
            let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
            work[pi].data_mut()[ei] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((pi, ei));
                worst_pair = (*a, numeric);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        worst_pair,
        checked,
        tol,
        passed: max_rel < tol,
    })
}
