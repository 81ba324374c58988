//! Finite-difference gradient checking.
//!
//! The checker re-evaluates a user-supplied loss builder with each
//! parameter element perturbed by ±step and compares the central
//! difference against the tape's analytic gradient. Graphs whose
//! forward pass ran a max-family reduction (or ReLU) within 2·step of
//! a tie are reported unreliable-at-tie and excluded from pass/fail:
//! the finite difference straddles a subgradient kink there.

use super::tape::{NumericsError, Tape, VarId};
use super::tensor::Tensor;

/// A named parameter to check. Frozen parameters are reported as
/// skipped rather than differenced.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamStatus {
    /// Max relative error over the parameter's elements.
    Checked { max_rel_err: f64 },
    Skipped,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub status: ParamStatus,
}

/// Outcome of a whole-graph check at a given tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckOutcome {
    Pass,
    Fail { max_rel_err: f64 },
    /// A max-reduce (or ReLU) ran at or near a tie point; finite
    /// differences are meaningless there.
    UnreliableAtTie,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub unreliable_at_tie: bool,
    /// Smallest kink gap seen over all evaluations, when any.
    pub min_kink_gap: Option<f64>,
}

impl GradCheckReport {
    /// Max relative error over all checked parameters (0 when none).
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| match p.status {
                ParamStatus::Checked { max_rel_err } => Some(max_rel_err),
                ParamStatus::Skipped => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn outcome(&self, rel_tol: f64) -> CheckOutcome {
        if self.unreliable_at_tie {
            return CheckOutcome::UnreliableAtTie;
        }
        let e = self.max_rel_err();
        if e <= rel_tol {
            CheckOutcome::Pass
        } else {
            CheckOutcome::Fail { max_rel_err: e }
        }
    }
}

/// Relative error used throughout: |a - n| / max(|n|, 1e-8).
///
/// When both sides are below 1e-9 they agree: a central difference of
/// an exactly-zero derivative is pure rounding noise (~eps·|loss|/step,
/// well under 1e-9 here), and dividing that noise by the 1e-8 floor
/// would manufacture spurious relative error.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() <= 1e-9 && numeric.abs() <= 1e-9 {
        return 0.0;
    }
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Checks the analytic gradient of a scalar loss against central
/// finite differences with the given step.
///
/// `build_loss` receives a fresh tape and the leaf ids of the
/// parameters (in `params` order) and must return a scalar loss node.
/// Step must lie in (0, 1e-2].
pub fn grad_check<F>(
    params: &[ParamSpec],
    build_loss: F,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId, NumericsError>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(NumericsError::Invalid {
            op: "grad_check",
            detail: format!("step {step} outside (0, 1e-2]"),
        });
    }
    if rel_tol <= 0.0 {
        return Err(NumericsError::Invalid {
            op: "grad_check",
            detail: format!("rel_tol {rel_tol} must be positive"),
        });
    }

    let eval = |values: &[Tensor]| -> Result<(f64, Option<f64>), NumericsError> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build_loss(&mut tape, &ids)?;
        if !tape.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: tape.value(loss).shape().to_vec(),
            });
        }
        Ok((tape.value(loss).item(), tape.min_kink_gap()))
    };

    // Analytic pass.
    let base_values: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    let mut tape = Tape::new();
    let ids: Vec<VarId> = base_values.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build_loss(&mut tape, &ids)?;
    if !tape.value(loss).is_scalar() {
        return Err(NumericsError::NonScalarLoss {
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    let grads = tape.backward(loss)?;
    let mut min_gap = tape.min_kink_gap();

    let mut reports = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        if !param.trainable {
            reports.push(ParamReport {
                name: param.name.clone(),
                status: ParamStatus::Skipped,
            });
            continue;
        }
        let analytic = grads.wrt(ids[pi]);
        let mut max_rel = 0.0f64;
        for ei in 0..param.value.len() {
            let mut values = base_values.clone();
            let orig = values[pi].data()[ei];
            values[pi].data_mut()[ei] = orig + step;
            let (up, gap_up) = eval(&values)?;
            values[pi].data_mut()[ei] = orig - step;
            let (down, gap_down) = eval(&values)?;
            for g in [gap_up, gap_down].into_iter().flatten() {
                min_gap = Some(min_gap.map_or(g, |m: f64| m.min(g)));
            }
            let numeric = (up - down) / (2.0 * step);
            max_rel = max_rel.max(rel_err(analytic.data()[ei], numeric));
        }
        reports.push(ParamReport {
            name: param.name.clone(),
            status: ParamStatus::Checked { max_rel_err: max_rel },
        });
    }

    let unreliable = min_gap.is_some_and(|g| g <= 2.0 * step);
    Ok(GradCheckReport {
        params: reports,
        unreliable_at_tie: unreliable,
        min_kink_gap: min_gap,
    })
}
