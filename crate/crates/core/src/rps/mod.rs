//! Resolution progressive sampling.
//!
//! Early steps run at low resolution. At the end of each stage the sampler
//! takes a one-step clean estimate, resizes it, and re-noises it at a level
//! raised by the resolution-aware shift before continuing at the next size.

use crate::conditions::ConditionSet;
use crate::error::{invalid, Result};
use crate::flow::{euler_steps, guided_velocity, initial_noise, noise_grid, GuidanceSpec, VelocityField};
use crate::latent::{GridDims, LatentGrid};
use crate::rng::{self, Stream};

/// `s' = s√r / (1 + s(√r − 1))`, which lowers log-SNR by exactly `ln r`.
/// Evaluated as `s√r / (s√r + 1 − s)` so both endpoints are fixed exactly.
pub fn noise_level_shift(s: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(invalid(format!("area ratio {r} must be positive")));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("noise level {s} outside [0, 1]")));
    }
    let a = s * r.sqrt();
    Ok((a / (a + (1.0 - s))).clamp(0.0, 1.0))
}

/// One-step clean estimate `x_s + s·v`.
pub fn straight_flow_estimate(x: &LatentGrid, s: f64, v: &LatentGrid) -> Result<LatentGrid> {
    let mut out = x.clone();
    out.axpy(s, v)?;
    Ok(out)
}

/// Half-pixel source coordinate and blend weight along one axis.
fn taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of every image (half-pixel centres, edge clamped).
pub fn latent_resize(x: &LatentGrid, height: usize, width: usize) -> Result<LatentGrid> {
    if height == 0 || width == 0 {
        return Err(invalid(format!("resize target {height}x{width} is empty")));
    }
    let d = x.dims();
    if (d.height, d.width) == (height, width) {
        return Ok(x.clone());
    }
    let (rows, cols) = (taps(height, d.height), taps(width, d.width));
    let c = d.channels;
    let mut out = LatentGrid::zeros(d.with_resolution(height, width));
    for v in 0..d.views {
        for t in 0..d.frames {
            let src = x.image(v, t);
            let dst = out.image_mut(v, t);
            let at = |i: usize, j: usize, k: usize| src[(i * d.width + j) * c + k];
            for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
                for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                    for k in 0..c {
                        let top = at(r0, c0, k) * (1.0 - fx) + at(r0, c1, k) * fx;
                        let bottom = at(r1, c0, k) * (1.0 - fx) + at(r1, c1, k) * fx;
                        dst[(i * width + j) * c + k] = top * (1.0 - fy) + bottom * fy;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(1 − s)·clean + s·ε` with fresh Gaussian `ε`.
pub fn renoise(clean: &LatentGrid, s: f64, rng: &mut Stream) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("noise level {s} outside [0, 1]")));
    }
    let eps = LatentGrid::new(rng::normal_tensor(rng, &clean.dims().shape()))?;
    let mut out = clean.scale(1.0 - s);
    out.axpy(s, &eps)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
}

impl Stage {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(invalid("schedule has no stages"));
        }
        for s in &stages {
            if s.steps == 0 || s.height == 0 || s.width == 0 {
                return Err(invalid(format!("stage {}x{}:{} is empty", s.height, s.width, s.steps)));
            }
        }
        if stages.windows(2).any(|w| w[1].area() < w[0].area()) {
            return Err(invalid("stage resolutions must not shrink"));
        }
        Ok(Self { stages })
    }

    /// One stage of `steps` at the target resolution.
    pub fn flat(height: usize, width: usize, steps: usize) -> Result<Self> {
        Self::new(vec![Stage { height, width, steps }])
    }

    /// Parses `"8x14:10,12x21:10,16x28:10"` (`×` also accepted).
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || invalid(format!("cannot parse schedule {text:?}"));
        let stages = text
            .split(',')
            .map(|part| {
                let (res, steps) = part.trim().split_once(':').ok_or_else(bad)?;
                let (h, w) = res.split_once(['x', '×']).ok_or_else(bad)?;
                Ok(Stage {
                    height: h.trim().parse().map_err(|_| bad())?,
                    width: w.trim().parse().map_err(|_| bad())?,
                    steps: steps.trim().parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn final_stage(&self) -> Stage {
        *self.stages.last().expect("non-empty schedule")
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// `Σ n_k·h_k·w_k`.
    pub fn token_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps * s.area()).sum()
    }

    /// Level at which stage `k` hands over, before the shift: `1 − (n_1+…+n_k)/N`.
    pub fn handoff_level(&self, k: usize) -> f64 {
        let done: usize = self.stages[..=k].iter().map(|s| s.steps).sum();
        1.0 - done as f64 / self.total_steps() as f64
    }

    pub fn describe(&self) -> String {
        self.stages.iter().map(|s| format!("{}x{}:{}", s.height, s.width, s.steps)).collect::<Vec<_>>().join(",")
    }
}

impl std::fmt::Display for StageSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Cost and noise levels of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCost {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub nfe: usize,
    /// `V·T·h·w`.
    pub tokens: usize,
    pub s_start: f64,
    pub s_end: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpsLedger {
    pub stages: Vec<StageCost>,
}

impl RpsLedger {
    pub fn nfe(&self) -> usize {
        self.stages.iter().map(|s| s.nfe).sum()
    }

    /// `Σ n_k·h_k·w_k`.
    pub fn token_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps * s.height * s.width).sum()
    }
}

/// Sampler state between stages.
#[derive(Clone, Debug)]
pub struct StageState {
    pub latent: LatentGrid,
    pub s: f64,
    pub stage: usize,
    pub ledger: RpsLedger,
}

/// Staged sampling. `dims` gives views, frames and channels and must carry the
/// final stage resolution.
pub fn rps_sample(
    model: &dyn VelocityField,
    cond: &ConditionSet,
    spec: &GuidanceSpec,
    schedule: &StageSchedule,
    dims: GridDims,
    seed: u64,
) -> Result<(LatentGrid, RpsLedger)> {
    let last = schedule.final_stage();
    if (last.height, last.width) != (dims.height, dims.width) {
        return Err(invalid(format!(
            "final stage {}x{} differs from target {}x{}",
            last.height, last.width, dims.height, dims.width
        )));
    }
    let first = schedule.stages()[0];
    let mut state = StageState {
        latent: initial_noise(dims.with_resolution(first.height, first.width), seed),
        s: 1.0,
        stage: 0,
        ledger: RpsLedger::default(),
    };
    let n = schedule.stages().len();
    for (k, stage) in schedule.stages().iter().enumerate() {
        let end = if k + 1 == n { 0.0 } else { schedule.handoff_level(k) };
        let levels = noise_grid(state.s, end, stage.steps);
        let mut nfe = 0;
        let mut x = if k + 1 == n {
            euler_steps(model, state.latent, cond, spec, &levels, &mut nfe, &mut |_| Ok(()))?
        } else {
            let x = euler_steps(model, state.latent, cond, spec, &levels[..stage.steps], &mut nfe, &mut |_| Ok(()))?;
            let s_last = levels[stage.steps - 1];
            let v = guided_velocity(model, &x, s_last, cond, spec, &mut nfe)?;
            straight_flow_estimate(&x, s_last, &v)?
        };
        state.ledger.stages.push(StageCost {
            height: stage.height,
            width: stage.width,
            steps: stage.steps,
            nfe,
            tokens: dims.views * dims.frames * stage.area(),
            s_start: state.s,
            s_end: end,
        });
        if let Some(next) = schedule.stages().get(k + 1) {
            x = latent_resize(&x, next.height, next.width)?;
            let s_next = noise_level_shift(end, next.area() as f64 / stage.area() as f64)?;
            x = renoise(&x, s_next, &mut rng::substream(seed, k as u64 + 1, "rps-renoise"))?;
            state.s = s_next;
            state.stage = k + 1;
        }
        state.latent = x;
    }
    Ok((state.latent, state.ledger))
}

#[cfg(test)]
mod tests;
