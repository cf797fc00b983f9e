use super::masked::MaskedLinear;
use crate::error::{Error, Result};

/// One SGD step with L2 weight decay on the active entries of `layer`.
///
/// Masked weights stay at zero, dead-row biases stay at zero, and the
/// gradient buffers are cleared afterwards. `label` names the layer in the
/// error raised for a non-finite gradient.
pub fn sgd_step(layer: &mut MaskedLinear, lr: f64, weight_decay: f64, label: &str) -> Result<()> {
    if !layer.grads_finite() {
        return Err(Error::non_finite(format!("gradient of layer {label}")));
    }
    layer.step_active(lr, weight_decay);
    layer.zero_grad();
    Ok(())
}

/// Scale factor that brings a global gradient norm down to `max_norm`.
pub fn clip_factor(sq_norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(max) if max > 0.0 => {
            let norm = sq_norm.sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        _ => 1.0,
    }
}
