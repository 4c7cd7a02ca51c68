use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error
/// `|auto - numeric| / (|auto| + 1e-8)` over all entries of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !x.is_finite() {
        return Err(Error::Contract("finite_diff_check input is not finite".into()));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_grad());
    let out = f(&tape, leaf)?;
    tape.backward(out)?;
    let auto = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.leaf(probe);
        Ok(f(&t, v)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (auto[i] - numeric).abs() / (auto[i].abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
