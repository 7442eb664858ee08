use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Denominator floor for relative errors, so coordinates whose gradient is
/// essentially zero are compared on an absolute scale of this size.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// (store tag, parameter name, element index) of the worst coordinate.
    pub worst: Option<(String, String, usize)>,
    pub checked: usize,
    pub failures: usize,
}

fn eval_loss<F>(stores: &[ParamStore], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ParamStore]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, stores)?;
    Ok(tape.scalar(loss))
}

/// Fill every store's gradient slots with the reverse-mode gradient of `f`.
pub fn analytic_gradients<F>(stores: &mut [ParamStore], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ParamStore]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, stores)?;
    let grads = tape.backward(loss)?;
    for s in stores.iter_mut() {
        s.zero_grad();
        s.accumulate(&tape, &grads)?;
    }
    Ok(tape.scalar(loss))
}

/// Compare the gradients currently held in `stores` against central
/// differences of `f` with the given `step`.
pub fn compare_gradients<F>(
    stores: &mut [ParamStore],
    f: &F,
    step: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[ParamStore]) -> Result<Var>,
{
    let mut report = GradReport {
        passed: true,
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        failures: 0,
    };
    for s in 0..stores.len() {
        let analytic = stores[s].flat_grads();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = *stores[s].value_at_mut(i).expect("index within store");
            *stores[s].value_at_mut(i).unwrap() = orig + step;
            let plus = eval_loss(stores, f)?;
            *stores[s].value_at_mut(i).unwrap() = orig - step;
            let minus = eval_loss(stores, f)?;
            *stores[s].value_at_mut(i).unwrap() = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if !(rel <= tol) {
                report.failures += 1;
                report.passed = false;
            }
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                let (name, idx) = stores[s].locate(i).unwrap();
                report.worst = Some((stores[s].tag().to_string(), name.to_string(), idx));
            }
        }
    }
    Ok(report)
}

/// Central finite-difference check of reverse-mode gradients of `f` with
/// respect to every coordinate of every store.
pub fn finite_diff_check<F>(
    stores: &mut [ParamStore],
    f: F,
    step: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[ParamStore]) -> Result<Var>,
{
    analytic_gradients(stores, &f)?;
    compare_gradients(stores, &f, step, tol)
}
