use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Runs `program` on fresh leaves holding `inputs` and returns the scalar
/// output together with its gradient with respect to every input.
pub fn grad<F>(program: F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = program(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let value = tape.scalar(out);
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn eval<F>(program: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = program(&mut tape, &vars)?;
    if tape.value(out).shape() != (1, 1) {
        let (rows, cols) = tape.value(out).shape();
        return Err(crate::Error::NonScalarOutput { rows, cols });
    }
    Ok(tape.scalar(out))
}

/// Largest relative discrepancy between the reverse-mode gradient and a
/// central difference with the given step, over every input coordinate.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check<F>(program: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let (_, analytic) = grad(&program, inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = eval(&program, &probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = eval(&program, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
        }
    }
    Ok(worst)
}
