use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Relative gap between the softened-KL gradient and the squared-error
/// surrogate gradient with respect to the student logits.
///
/// Both gradients are taken through the tape:
///
/// * `g_kl = ∂/∂z [T² · KL(t, softmax(z, T))]`
/// * `g_mse = ∂/∂z [½ · mean_i ‖softmax(z_i, T) − t_i‖²]`, rescaled by
///   `C · T²` (the high-temperature limit where `q' → 1/C`).
///
/// Returns `‖g_kl − C T² g_mse‖_F / ‖g_kl‖_F` over the whole batch, and 0
/// when both gradients vanish (norm at rounding level). `logits` rows are
/// expected to be zero-mean.
pub fn mse_approximation_gap(targets: &Tensor, logits: &Tensor, temperature: f64) -> Result<f64> {
    if targets.shape() != logits.shape() || logits.shape().len() != 2 {
        return Err(Error::shape("mse_approximation_gap", targets.shape(), logits.shape()));
    }
    let classes = logits.shape()[1] as f64;
    let t2 = temperature * temperature;

    let kl_grad = {
        let mut tape = Tape::new();
        let z = tape.leaf(&logits.clone().with_grad());
        let t = tape.leaf(targets);
        let q = tape.softmax(z, temperature)?;
        let kl = tape.kl_divergence(t, q)?;
        let loss = tape.scale(kl, t2);
        tape.backward(loss)?.get(z).map(<[f64]>::to_vec).unwrap_or_default()
    };
    let mse_grad = {
        let mut tape = Tape::new();
        let z = tape.leaf(&logits.clone().with_grad());
        let t = tape.leaf(targets);
        let q = tape.softmax(z, temperature)?;
        let diff = tape.sub(q, t)?;
        let sq = tape.mul(diff, diff)?;
        let per_row = tape.sum_axis(sq, 1)?;
        let mean = tape.mean(per_row);
        let loss = tape.scale(mean, 0.5);
        tape.backward(loss)?.get(z).map(<[f64]>::to_vec).unwrap_or_default()
    };

    let scale = classes * t2;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in kl_grad.iter().zip(&mse_grad) {
        num += (a - scale * b).powi(2);
        den += a * a;
    }
    // Below this norm both gradients are rounding noise.
    const VANISHED: f64 = 1e-12;
    if den.sqrt() <= VANISHED {
        return Ok(if num.sqrt() <= VANISHED { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}
