use super::{NumError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(1, |numeric|)` over every coordinate of every
/// input.
///
/// `f` receives a fresh tape and one leaf per input each time it is called.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumError::Domain(format!("finite-difference step {h} outside [1e-7, 1e-3]")).into());
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect::<Result<_, _>>()?;

    let eval = |probe: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item()?)
    };

    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for k in 0..probe[which].numel() {
            let orig = probe[which].data()[k];
            probe[which].data_mut()[k] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[k] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(NumError::NonFinite(format!("central difference at input {which}, index {k}")).into());
            }
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<NumError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}
