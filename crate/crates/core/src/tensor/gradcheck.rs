//! Central finite-difference checks of tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Finite-difference step used by every registered check.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing tape gradients to finite differences for one function.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)` over all
    /// inputs, floored at 1e-12 in the denominator.
    pub max_rel_error: f64,
    pub evaluations: usize,
}

/// Builds the scalar loss on a fresh tape from the given input handles.
pub trait LossFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> LossFn for F {}

fn eval(inputs: &[Tensor], f: &impl LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::Contract(
            "gradcheck loss must be scalar".into(),
        ));
    }
    Ok(v.item())
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic(inputs: &[Tensor], f: &impl LossFn) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get_or_zeros(v)).collect())
}

/// Central differences with step `h` for every element of every input.
pub fn numeric(inputs: &[Tensor], f: &impl LossFn, h: f64) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..work.len() {
        let mut g = Tensor::zeros(work[i].shape());
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = a
                .data()
                .iter()
                .zip(n.data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            diff / a.max_abs().max(n.max_abs()).max(1e-12)
        })
        .fold(0.0, f64::max)
}

/// Compares tape gradients against central differences.
pub fn check(inputs: &[Tensor], f: impl LossFn) -> Result<GradCheck> {
    let a = analytic(inputs, &f)?;
    let n = numeric(inputs, &f, FD_STEP)?;
    Ok(GradCheck {
        max_rel_error: relative_error(&a, &n),
        evaluations: 2 * inputs.iter().map(Tensor::len).sum::<usize>(),
    })
}
