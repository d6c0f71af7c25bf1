//! Multi-scale training curriculum and the distillation driver.

use std::time::Instant;

use anyhow::{ensure, Result};
use dive_core::backbone::{BackboneConfig, Denoiser};
use dive_core::conditions::SceneSpec;
use dive_core::flow::{rf_training_step, StepOptions, TrainItem};
use dive_core::mad::{mad_distill_step, validation_error, validation_points, BranchParams, ValidationReport, VALIDATION_OMEGAS};
use dive_core::nn::AdamW;
use dive_core::rng::{self, Stream};
use dive_core::rps::latent_resize;
use dive_core::{LatentGrid, Params};
use rand::Rng;

use crate::config::{Config, DistillConfig, TrainConfig};
use crate::dataset::Record;
use crate::world::{render_oracle, scene_for, BUCKETS};

/// Offset separating held-out scene indices from training ones.
pub const HELD_OUT: u64 = 1 << 32;

pub fn build_dataset(cfg: &Config) -> Vec<Record> {
    (0..cfg.data.train_scenes as u64)
        .map(|i| {
            let scene = scene_for(cfg.seed, i);
            let video = render_oracle(&scene, cfg.data.frames, cfg.data.height, cfg.data.width);
            Record::new(scene, &video)
        })
        .collect()
}

pub fn held_out_scenes(seed: u64, n: usize) -> Vec<SceneSpec> {
    (0..n as u64).map(|i| scene_for(seed, HELD_OUT + i)).collect()
}

/// Training clips resampled to each bucket.
pub struct Corpus {
    scenes: Vec<SceneSpec>,
    clips: Vec<Vec<LatentGrid>>,
}

impl Corpus {
    pub fn new(records: &[Record], buckets: &[(usize, usize)]) -> Result<Self> {
        ensure!(!records.is_empty(), "empty dataset");
        let mut clips = vec![Vec::with_capacity(records.len()); buckets.len()];
        for r in records {
            let clip = r.latent();
            for (b, &(h, w)) in buckets.iter().enumerate() {
                clips[b].push(latent_resize(&clip, h, w)?);
            }
        }
        Ok(Self {
            scenes: records.iter().map(|r| r.scene.clone()).collect(),
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Clip `index` at `bucket`, cut to `frames` frames starting at `start`.
    pub fn item(&self, index: usize, bucket: usize, start: usize, frames: usize) -> Result<TrainItem> {
        Ok(TrainItem {
            data: self.clips[bucket][index].frames(start..start + frames)?,
            scene: self.scenes[index].clone(),
        })
    }

    fn frames(&self) -> usize {
        self.clips[0][0].dims().frames
    }

    fn batch(&self, rng: &mut Stream, bucket: usize, frames: usize, size: usize) -> Result<Vec<TrainItem>> {
        let Some(slack) = self.frames().checked_sub(frames) else {
            anyhow::bail!("clips have {} frames, {frames} requested", self.frames());
        };
        (0..size)
            .map(|_| {
                let i = rng.random_range(0..self.len());
                let start = rng.random_range(0..=slack);
                self.item(i, bucket, start, frames)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub name: &'static str,
    pub steps: usize,
    pub frames: usize,
    /// Buckets cycled step by step, as `(bucket index, batch size)`.
    pub buckets: Vec<(usize, usize)>,
}

/// Single frames, then low-resolution video, then all buckets.
pub fn curriculum(t: &TrainConfig, frames: usize) -> Vec<Phase> {
    vec![
        Phase {
            name: "image",
            steps: t.phase1_steps,
            frames: 1,
            buckets: vec![(0, t.batch[0])],
        },
        Phase {
            name: "video-low",
            steps: t.phase2_steps,
            frames,
            buckets: vec![(0, t.batch[0])],
        },
        Phase {
            name: "video-mixed",
            steps: t.phase3_steps,
            frames,
            buckets: vec![(0, t.batch[0]), (1, t.batch[1]), (2, t.batch[2])],
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub phase: &'static str,
    pub step: usize,
    pub loss: f64,
    pub seconds: f64,
}

pub fn new_model(model: &BackboneConfig, seed: u64) -> Result<Denoiser> {
    Ok(Denoiser::seeded(model.clone(), seed)?)
}

/// Runs the curriculum, calling `log` after every step.
pub fn train(model: &mut Denoiser, corpus: &Corpus, t: &TrainConfig, frames: usize, seed: u64, log: &mut dyn FnMut(&StepLog)) -> Result<()> {
    let mut opt = AdamW::new(t.lr);
    let mut rng = rng::substream(seed, 0, "train");
    let opts = StepOptions {
        p_drop_all: t.p_drop_all,
        p_drop_each: t.p_drop_each,
        p_first_k: t.p_first_k,
    };
    model.set_requires_grad(true);
    let start = Instant::now();
    for phase in curriculum(t, frames) {
        for step in 0..phase.steps {
            let (bucket, size) = phase.buckets[step % phase.buckets.len()];
            let batch = corpus.batch(&mut rng, bucket, phase.frames, size)?;
            model.zero_grad();
            let loss = rf_training_step(model, &batch, &mut rng, &opts)?;
            opt.step(model);
            log(&StepLog {
                phase: phase.name,
                step,
                loss,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(())
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub losses: Vec<f64>,
    pub validation: ValidationReport,
}

/// Held-out clips used for distillation validation.
pub fn distill_validation_items(seed: u64, d: &DistillConfig) -> Vec<TrainItem> {
    held_out_scenes(seed, d.validation_scenes)
        .into_iter()
        .map(|scene| TrainItem {
            data: render_oracle(&scene, d.frames, d.height, d.width),
            scene,
        })
        .collect()
}

/// Trains fresh branches on top of the frozen `model`.
pub fn distill(model: &Denoiser, corpus: &Corpus, d: &DistillConfig, seed: u64, log: &mut dyn FnMut(usize, f64)) -> Result<(BranchParams, DistillOutcome)> {
    let bucket = BUCKETS.iter().position(|&b| b == (d.height, d.width));
    let bucket = bucket.ok_or_else(|| anyhow::anyhow!("distillation resolution {}x{} is not a bucket", d.height, d.width))?;
    let mut frozen = model.clone();
    let mut branches = BranchParams::new(&model.cfg, &mut rng::substream(seed, 0, "branch-init"))?;
    let mut opt = AdamW::new(d.lr);
    let mut rng = rng::substream(seed, 0, d.strategy.name());
    let mut losses = Vec::with_capacity(d.steps);
    for step in 0..d.steps {
        let batch = corpus.batch(&mut rng, bucket, d.frames, d.batch)?;
        opt.lr = cosine_lr(d.lr, step, d.steps);
        branches.zero_grad();
        let stats = mad_distill_step(&mut frozen, &mut branches, &batch, d.strategy, &mut rng)?;
        opt.step(&mut branches);
        losses.push(stats.loss);
        log(step, stats.loss);
    }
    branches.set_requires_grad(true);
    let points = validation_points(model, &distill_validation_items(seed, d), seed)?;
    let validation = validation_error(model, &branches, &points, &VALIDATION_OMEGAS)?;
    Ok((branches, DistillOutcome { losses, validation }))
}
