//! Central-difference gradient checker.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst relative error seen for one checked parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub index: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// One entry per trainable parameter; frozen parameters are absent.
    pub params: Vec<ParamError>,
}

fn evaluate<F>(params: &[Tensor], trainable: &[bool], f: &mut F) -> Result<(Tape, Var, Vec<Var>)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .zip(trainable)
        .map(|(p, &rg)| tape.leaf(p.clone(), rg))
        .collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, loss, vars))
}

fn loss_value<F>(params: &[Tensor], trainable: &[bool], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, loss, _) = evaluate(params, trainable, f)?;
    tape.value(loss).item()
}

/// Compares the tape's analytic gradients with central differences.
///
/// `f` builds a scalar loss from leaves bound to `params` (same order).
/// The error per entry is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Parameters with `trainable[i] == false` are bound as constant leaves and
/// skipped. The base point is evaluated twice; any bitwise difference means
/// `f` is not deterministic and is reported as [`Error::Oracle`].
pub fn grad_check<F>(
    params: &mut [Tensor],
    trainable: &[bool],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    if params.len() != trainable.len() {
        return Err(Error::contract("one trainable flag per parameter"));
    }

    let (tape, loss, vars) = evaluate(params, trainable, &mut f)?;
    let base = tape.value(loss).item()?;
    let again = loss_value(params, trainable, &mut f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::new(),
    };
    for index in 0..params.len() {
        if !trainable[index] {
            continue;
        }
        let grad = analytic[index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(params[index].shape()));
        let mut worst = 0.0f64;
        for j in 0..params[index].numel() {
            let orig = params[index].data()[j];
            params[index].data_mut()[j] = orig + h;
            let plus = loss_value(params, trainable, &mut f);
            params[index].data_mut()[j] = orig - h;
            let minus = loss_value(params, trainable, &mut f);
            params[index].data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = grad.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamError {
            index,
            max_rel_error: worst,
        });
    }
    Ok(report)
}
