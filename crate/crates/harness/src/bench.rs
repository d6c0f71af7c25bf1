//! The four-way sampler benchmark: two-pass CFG, MAD, and each with RPS.

use std::time::Instant;

use anyhow::{ensure, Result};
use dive_core::backbone::Denoiser;
use dive_core::conditions::SceneSpec;
use dive_core::flow::{GuidanceSpec, VelocityField};
use dive_core::mad::{BranchParams, MadStudent, ScaleSet};
use dive_core::rps::StageSchedule;
use dive_core::GridDims;

use crate::config::BenchConfig;
use crate::eval::{evaluate, generate, oracle_targets, Conditioning, SampleJob};
use crate::metrics::MetricsRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Cfg,
    Mad,
    CfgRps,
    MadRps,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cfg, Variant::Mad, Variant::CfgRps, Variant::MadRps];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cfg => "cfg",
            Variant::Mad => "mad",
            Variant::CfgRps => "cfg+rps",
            Variant::MadRps => "mad+rps",
        }
    }

    pub fn uses_mad(self) -> bool {
        matches!(self, Variant::Mad | Variant::MadRps)
    }

    pub fn uses_rps(self) -> bool {
        matches!(self, Variant::CfgRps | Variant::MadRps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub variant: Variant,
    pub schedule: String,
    pub nfe: usize,
    pub token_steps: usize,
    pub wall_clock_s: f64,
    pub speedup: f64,
    pub sample_mse: f64,
}

impl BenchResult {
    pub fn row(&self, config_hash: &str, seed: u64, scenes: usize) -> MetricsRow {
        let mut r = MetricsRow::new(&format!("bench/{}", self.variant.name()), config_hash, self.variant.name(), seed);
        r.schedule = self.schedule.clone();
        r.scenes = scenes;
        r.nfe = self.nfe;
        r.wall_clock_s = self.wall_clock_s;
        r.token_steps = self.token_steps;
        r.speedup = Some(self.speedup);
        r.sample_mse = Some(self.sample_mse);
        r
    }
}

/// Runs the four variants on `scenes` at the resolution of the schedule's
/// last stage. The MAD student runs at `ω = λ − 1`, the scale whose teacher is
/// CFG at `λ`. Speedups are relative to two-pass CFG.
pub fn bench(model: &Denoiser, branches: &BranchParams, scenes: &[SceneSpec], b: &BenchConfig, frames: usize, seed: u64) -> Result<Vec<BenchResult>> {
    ensure!(b.scale >= 1.0, "bench scale {} is below 1", b.scale);
    let schedule = StageSchedule::parse(&b.schedule)?;
    let last = schedule.final_stage();
    let dims = GridDims::new(model.cfg.views, frames, last.height, last.width, model.cfg.channels);
    let flat = StageSchedule::flat(last.height, last.width, b.steps)?;
    let targets = oracle_targets(scenes, dims);
    let student = MadStudent {
        model,
        branches,
        scales: ScaleSet::uniform(b.scale - 1.0),
    };
    let mut out: Vec<BenchResult> = Vec::with_capacity(4);
    for variant in Variant::ALL {
        let (field, spec): (&(dyn VelocityField + Sync), GuidanceSpec) = if variant.uses_mad() {
            (&student, GuidanceSpec::mad())
        } else {
            (model, GuidanceSpec::extended(b.scale))
        };
        let used = if variant.uses_rps() { &schedule } else { &flat };
        let job = SampleJob {
            encoder_model: model,
            field,
            spec,
            steps: b.steps,
            schedule: variant.uses_rps().then_some(&schedule),
            dims,
            seed,
        };
        let start = Instant::now();
        let samples = generate(&job, scenes, Conditioning::Full)?;
        let wall_clock_s = start.elapsed().as_secs_f64();
        let nfe = samples.first().map_or(0, |s| s.1);
        ensure!(samples.iter().all(|s| s.1 == nfe), "NFE differs across scenes");
        let grids: Vec<_> = samples.into_iter().map(|s| s.0).collect();
        let baseline = out.first().map_or(wall_clock_s, |r| r.wall_clock_s);
        out.push(BenchResult {
            variant,
            schedule: used.describe(),
            nfe,
            token_steps: used.token_steps(),
            wall_clock_s,
            speedup: baseline / wall_clock_s,
            sample_mse: evaluate(&grids, &targets)?.mean,
        });
    }
    Ok(out)
}
