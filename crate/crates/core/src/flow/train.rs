use crate::backbone::Denoiser;
use crate::conditions::{apply_first_k_mask, nullify, sample_dropout, ConditionSet, SceneSpec};
use crate::error::{invalid, Result};
use crate::latent::LatentGrid;
use crate::rng::{self, Stream};

use super::guidance::VelocityField;

/// One clean clip and the scene it depicts.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub data: LatentGrid,
    pub scene: SceneSpec,
}

/// A noised training input with its regression target and per-frame weights.
#[derive(Clone, Debug)]
pub struct RfExample {
    pub x_s: LatentGrid,
    pub target: LatentGrid,
    pub frame_mask: Vec<f64>,
    pub s: f64,
}

/// `x_s = (1 − s)·data + s·noise`, target `data − noise`; with `first_k` the
/// leading frames are clamped to `data` and excluded from the loss.
pub fn rf_example(data: &LatentGrid, noise: &LatentGrid, s: f64, first_k: Option<usize>) -> Result<RfExample> {
    let mut x_s = data.scale(1.0 - s);
    x_s.axpy(s, noise)?;
    let target = data.sub(noise)?;
    let (x_s, frame_mask) = match first_k {
        Some(k) => apply_first_k_mask(&x_s, data, k)?,
        None => (x_s, vec![1.0; data.dims().frames]),
    };
    Ok(RfExample {
        x_s,
        target,
        frame_mask,
        s,
    })
}

/// Mean squared error over frames with non-zero weight, and its gradient with
/// respect to `pred`.
pub fn masked_mse(pred: &LatentGrid, target: &LatentGrid, frame_mask: &[f64]) -> Result<(f64, LatentGrid)> {
    let d = pred.dims();
    pred.tensor().check_same_shape(target.tensor(), "masked_mse")?;
    let active = frame_mask.iter().filter(|&&m| m != 0.0).count();
    if active == 0 || frame_mask.len() != d.frames {
        return Err(invalid("loss mask selects no frames"));
    }
    let count = (active * d.views * d.image_len()) as f64;
    let mut grad = LatentGrid::zeros(d);
    let mut loss = 0.0;
    for v in 0..d.views {
        for (t, &m) in frame_mask.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let (p, q) = (pred.image(v, t), target.image(v, t));
            let g = grad.image_mut(v, t);
            for i in 0..p.len() {
                let e = p[i] - q[i];
                loss += e * e;
                g[i] = 2.0 * e / count;
            }
        }
    }
    Ok((loss / count, grad))
}

/// Randomness for one training example: noise and a level `s ~ U[0, 1]`.
pub fn draw_noise(rng: &mut Stream, like: &LatentGrid) -> (LatentGrid, f64) {
    let noise = LatentGrid::new(rng::normal_tensor(rng, &like.dims().shape())).expect("noise dims");
    let s = rng::uniform(rng, 0.0, 1.0);
    (noise, s)
}

/// Loss of an arbitrary velocity field on one clip (no gradients).
pub fn rf_loss(model: &dyn VelocityField, data: &LatentGrid, cond: &ConditionSet, rng: &mut Stream, first_k: Option<usize>) -> Result<f64> {
    let (noise, s) = draw_noise(rng, data);
    let ex = rf_example(data, &noise, s, first_k)?;
    let pred = model.velocity(&ex.x_s, s, cond)?;
    Ok(masked_mse(&pred, &ex.target, &ex.frame_mask)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOptions {
    /// Probability of dropping every condition at once.
    pub p_drop_all: f64,
    /// Otherwise, probability of dropping each condition independently.
    pub p_drop_each: f64,
    /// Probability of training a sample with first-k masking.
    pub p_first_k: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            p_drop_all: 0.1,
            p_drop_each: 0.1,
            p_first_k: 0.0,
        }
    }
}

/// Rectified-flow regression on a batch. Accumulates the gradient of the mean
/// per-item loss into `model` and returns that mean loss.
pub fn rf_training_step(model: &mut Denoiser, batch: &[TrainItem], rng: &mut Stream, opts: &StepOptions) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let mut total = 0.0;
    for item in batch {
        let (cond, enc_cache) = model.encoder.encode(&item.scene)?;
        let mask = sample_dropout(rng, opts.p_drop_all, opts.p_drop_each);
        let cond = nullify(&cond, mask);
        let frames = item.data.dims().frames;
        let first_k = (frames > 1 && rng::uniform(rng, 0.0, 1.0) < opts.p_first_k)
            .then(|| 1 + (rng::uniform(rng, 0.0, (frames - 1) as f64) as usize).min(frames - 2));
        let (noise, s) = draw_noise(rng, &item.data);
        let ex = rf_example(&item.data, &noise, s, first_k)?;
        let (pred, cache) = model.forward_cached(&ex.x_s, s, &cond, None)?;
        let (loss, mut grad) = masked_mse(&pred, &ex.target, &ex.frame_mask)?;
        grad = grad.scale(1.0 / batch.len() as f64);
        let back = model.backward(&cache, &cond, &grad, None)?;
        model.encoder.backward(&enc_cache, cond.nulls, &back.dcond)?;
        total += loss;
    }
    Ok(total / batch.len() as f64)
}
