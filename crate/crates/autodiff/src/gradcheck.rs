use crate::{AutodiffError, NArray, Result, Tape, Var};

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must return
/// a scalar. The result is the largest per-coordinate relative error
/// `|analytic - numeric| / max(floor, |analytic| + |numeric|)`.
///
/// Central differences carry an absolute error of roughly
/// `ulp(f) / eps + eps² |f'''|`, so coordinates whose gradient is near that
/// level can only be compared absolutely; `floor` sets where that starts.
pub fn grad_check<F>(f: F, params: &[NArray], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[NArray]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite(v));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(AutodiffError::NonFinite(base));
    }
    tape.backward(out)?;
    let analytic: Vec<NArray> = vars.iter().map(|v| tape.grad(*v)).collect();

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[p].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
