//! Central finite-difference verification of taped gradients.

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Central differences of a scalar function at `x`, one coordinate at a time.
pub fn central_differences<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe)?;
        probe[i] = orig - eps;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-8)`.
pub fn max_relative_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Compares the taped gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let leaf = x.clone().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&leaf);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let shape = x.shape().to_vec();
    let numeric = central_differences(
        |values| {
            let t = Tensor::new(shape.clone(), values.to_vec())?;
            let mut tape = Tape::new();
            let v = tape.leaf(&t);
            let out = f(&mut tape, v)?;
            Ok(tape.scalar_value(out))
        },
        x.data(),
        eps,
    )?;
    Ok(max_relative_discrepancy(&analytic, &numeric))
}
