use crate::conditions::ConditionSet;
use crate::error::{invalid, Result};
use crate::latent::{GridDims, LatentGrid};
use crate::rng;

use super::guidance::{guided_velocity, GuidanceSpec, VelocityField};

/// Record of one sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerRun {
    pub steps: usize,
    pub seed: u64,
    pub nfe: usize,
    /// Noise levels visited, starting level first.
    pub levels: Vec<f64>,
}

/// `n + 1` uniformly spaced levels from `start` down to `end`.
pub fn noise_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| start + (end - start) * (i as f64 / n as f64)).collect()
}

/// The `N(0, I)` draw every sampler starts from.
pub fn initial_noise(dims: GridDims, seed: u64) -> LatentGrid {
    LatentGrid::new(rng::normal_tensor(&mut rng::substream(seed, 0, "initial-noise"), &dims.shape())).expect("noise dims")
}

/// Euler steps `x ← x + (l_i − l_{i+1}) v'(x, l_i)` over consecutive pairs of
/// `levels`. `hook` runs on the state before every evaluation and on the result.
pub fn euler_steps(
    model: &dyn VelocityField,
    mut x: LatentGrid,
    cond: &ConditionSet,
    spec: &GuidanceSpec,
    levels: &[f64],
    nfe: &mut usize,
    hook: &mut dyn FnMut(&mut LatentGrid) -> Result<()>,
) -> Result<LatentGrid> {
    for pair in levels.windows(2) {
        hook(&mut x)?;
        let v = guided_velocity(model, &x, pair[0], cond, spec, nfe)?;
        x.axpy(pair[0] - pair[1], &v)?;
    }
    hook(&mut x)?;
    Ok(x)
}

pub fn euler_sample(
    model: &dyn VelocityField,
    cond: &ConditionSet,
    spec: &GuidanceSpec,
    steps: usize,
    dims: GridDims,
    seed: u64,
) -> Result<(LatentGrid, SamplerRun)> {
    if steps == 0 {
        return Err(invalid("euler_sample needs at least one step"));
    }
    let levels = noise_grid(1.0, 0.0, steps);
    let mut nfe = 0;
    let x = euler_steps(model, initial_noise(dims, seed), cond, spec, &levels, &mut nfe, &mut |_| Ok(()))?;
    Ok((
        x,
        SamplerRun {
            steps,
            seed,
            nfe,
            levels,
        },
    ))
}

/// Generates a clip whose first `k` frames are the last `k` frames of
/// `prefix`, re-imposed before every step.
pub fn extend_video(
    model: &dyn VelocityField,
    prefix: &LatentGrid,
    k: usize,
    cond: &ConditionSet,
    spec: &GuidanceSpec,
    steps: usize,
    seed: u64,
) -> Result<(LatentGrid, SamplerRun)> {
    let dims = prefix.dims();
    if k == 0 || k >= dims.frames {
        return Err(invalid(format!("overlap k={k} must lie in 1..{}", dims.frames)));
    }
    if steps == 0 {
        return Err(invalid("extend_video needs at least one step"));
    }
    let context = prefix.frames(dims.frames - k..dims.frames)?;
    let levels = noise_grid(1.0, 0.0, steps);
    let mut nfe = 0;
    let x = euler_steps(model, initial_noise(dims, seed), cond, spec, &levels, &mut nfe, &mut |x| {
        x.copy_frames_from(&context, 0..k)
    })?;
    Ok((
        x,
        SamplerRun {
            steps,
            seed,
            nfe,
            levels,
        },
    ))
}

/// Appends the frames of `window` after its `k` overlap frames to `video`.
pub fn stitch(video: &LatentGrid, window: &LatentGrid, k: usize) -> Result<LatentGrid> {
    let t = window.dims().frames;
    if k >= t {
        return Err(invalid(format!("overlap k={k} leaves no new frames of {t}")));
    }
    LatentGrid::concat_frames(video, &window.frames(k..t)?)
}
