use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

const REL_FLOOR: f64 = 1e-6;

/// Compare tape gradients of the scalar `f(params)` with central finite
/// differences of step `eps`; returns the largest per-element relative error.
///
/// `f` receives the parameters as tape leaves in the order given.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, NnError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, NnError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, NnError> {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            probe[pi].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric, REL_FLOOR));
        }
    }
    Ok(worst)
}
