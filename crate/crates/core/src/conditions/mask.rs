use crate::error::{invalid, Result};
use crate::latent::LatentGrid;

/// Clamps frames `0..k` of `x_t` to `context` and returns per-frame loss
/// weights (zero on the clamped frames).
pub fn apply_first_k_mask(x_t: &LatentGrid, context: &LatentGrid, k: usize) -> Result<(LatentGrid, Vec<f64>)> {
    let frames = x_t.dims().frames;
    if k >= frames {
        return Err(invalid(format!("first-k mask with k={k} leaves no frame of {frames} for the loss")));
    }
    let mut out = x_t.clone();
    out.copy_frames_from(context, 0..k)?;
    let mask = (0..frames).map(|t| if t < k { 0.0 } else { 1.0 }).collect();
    Ok((out, mask))
}
