use super::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function value is not finite at coordinate {coordinate:?}")]
    NonFinite { coordinate: Option<(usize, usize)> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Max relative error between reverse-mode and central-difference gradients
/// of `f` at `x`, measured as `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let coords: Vec<(usize, usize)> = xs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    grad_check_sampled(f, xs, step, &coords)
}

/// [`grad_check_many`] restricted to `(input, element)` coordinates.
pub fn grad_check_sampled<F>(f: F, xs: &[Tensor], step: f64, coords: &[(usize, usize)]) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |inputs: &[Tensor], coordinate: Option<(usize, usize)>| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| match e {
            TensorError::NonFinite { .. } => GradCheckError::NonFinite { coordinate },
            e => GradCheckError::Tensor(e),
        })?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GradCheckError::NonFinite { coordinate })
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| match e {
        TensorError::NonFinite { .. } => GradCheckError::NonFinite { coordinate: None },
        e => GradCheckError::Tensor(e),
    })?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for &(t, i) in coords {
        let orig = probe[t].data()[i];
        probe[t].data_mut()[i] = orig + step;
        let plus = eval(&probe, Some((t, i)))?;
        probe[t].data_mut()[i] = orig - step;
        let minus = eval(&probe, Some((t, i)))?;
        probe[t].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.get(vars[t]).map_or(0.0, |g| g.data()[i]);
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
