use super::tape::{ParamId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat element index of the worst disagreement.
    pub worst: Option<(ParamId, usize)>,
    pub checked: usize,
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// Relative error per element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`;
/// the report carries the maximum over every element of every parameter.
/// The floor keeps round-off in structurally zero gradients (for example a
/// key bias under softmax) from reading as a large relative error.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let out = f(&tape, &vars)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective = {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pid, param) in params.iter().enumerate() {
        let zeros;
        let grad = match analytic.get(pid) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(param.shape());
                &zeros
            }
        };
        for i in 0..param.numel() {
            let orig = param.data()[i];
            work[pid].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[pid].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[pid].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((pid, i));
                }
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
