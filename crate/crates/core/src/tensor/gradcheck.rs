//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Seed of the fixed projection that contracts non-scalar outputs.
const PROJECTION_SEED: u64 = 0x6772_6164;

fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let weights = Tensor::randn(shape, 1.0, &mut Rng::seed(PROJECTION_SEED));
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    Ok(tape.value(s).item())
}

/// Maximum over all input coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// Non-scalar outputs are contracted against a fixed Gaussian projection
/// first, so every output coordinate contributes.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("grad_check", "non-finite input"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x - eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
