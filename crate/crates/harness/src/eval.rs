//! Sampling over scene sets and scoring against the oracle renderer.

use anyhow::{ensure, Result};
use dive_core::conditions::{nullify, NullMask, SceneSpec};
use dive_core::flow::{euler_sample, GuidanceSpec, VelocityField};
use dive_core::rng;
use dive_core::rps::{rps_sample, StageSchedule};
use dive_core::{GridDims, LatentGrid};
use rand::RngCore;
use rayon::prelude::*;

use crate::world::{footprint, render_oracle, CHANNELS};

/// Sampling seed for scene `index` of a run seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    rng::substream(seed, index as u64, "sample-seed").next_u64()
}

#[derive(Clone, Copy, Debug)]
pub enum Conditioning {
    Full,
    /// Every condition replaced by its null form, sampled without guidance.
    Unconditional,
    /// The masked conditions replaced by their null forms, guidance unchanged.
    Ablated(NullMask),
}

#[derive(Clone)]
pub struct SampleJob<'a> {
    pub encoder_model: &'a dive_core::backbone::Denoiser,
    pub field: &'a (dyn VelocityField + Sync),
    pub spec: GuidanceSpec,
    pub steps: usize,
    pub schedule: Option<&'a StageSchedule>,
    pub dims: GridDims,
    pub seed: u64,
}

/// Samples one clip per scene. Results are in scene order regardless of the
/// number of worker threads.
pub fn generate(job: &SampleJob, scenes: &[SceneSpec], conditioning: Conditioning) -> Result<Vec<(LatentGrid, usize)>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut cond = job.encoder_model.encoder.conditions(scene)?;
            let mut spec = job.spec;
            match conditioning {
                Conditioning::Full => {}
                Conditioning::Unconditional => {
                    cond = nullify(&cond, NullMask::ALL);
                    spec = GuidanceSpec::off();
                }
                Conditioning::Ablated(mask) => cond = nullify(&cond, mask),
            }
            let seed = scene_seed(job.seed, i);
            Ok(match job.schedule {
                Some(s) => {
                    let (x, ledger) = rps_sample(job.field, &cond, &spec, s, job.dims, seed)?;
                    (x, ledger.nfe())
                }
                None => {
                    let (x, run) = euler_sample(job.field, &cond, &spec, job.steps, job.dims, seed)?;
                    (x, run.nfe)
                }
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_scene: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Per-scene MSE between samples and their oracle renders.
pub fn evaluate(samples: &[LatentGrid], targets: &[LatentGrid]) -> Result<EvalReport> {
    ensure!(samples.len() == targets.len(), "{} samples for {} scenes", samples.len(), targets.len());
    ensure!(!samples.is_empty(), "nothing to evaluate");
    let per_scene = samples.iter().zip(targets).map(|(s, t)| s.mse(t)).collect::<Result<Vec<_>, _>>()?;
    let n = per_scene.len() as f64;
    let mean = per_scene.iter().sum::<f64>() / n;
    let std = (per_scene.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport { per_scene, mean, std })
}

pub fn oracle_targets(scenes: &[SceneSpec], dims: GridDims) -> Vec<LatentGrid> {
    scenes.par_iter().map(|s| render_oracle(s, dims.frames, dims.height, dims.width)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub scenes: usize,
    /// Mean absolute change inside the removed instance's footprint.
    pub inside: f64,
    pub outside: f64,
    /// Scenes where the change inside exceeds the change outside.
    pub localized: usize,
}

/// Removes the nearest instance from every scene that has a visible one and
/// compares same-seed samples inside and outside its footprint.
pub fn localization(job: &SampleJob, scenes: &[SceneSpec]) -> Result<Localization> {
    let d = job.dims;
    let pairs: Vec<(usize, SceneSpec, SceneSpec)> = scenes
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let last = s.instances.len().checked_sub(1)?;
            let mut without = s.clone();
            without.instances.remove(last);
            Some((i, s.clone(), without))
        })
        .collect();
    let results: Vec<Option<(f64, f64)>> = pairs
        .par_iter()
        .map(|(i, with, without)| {
            let seed = scene_seed(job.seed, *i);
            let run = |scene: &SceneSpec| -> Result<LatentGrid> {
                let cond = job.encoder_model.encoder.conditions(scene)?;
                Ok(euler_sample(job.field, &cond, &job.spec, job.steps, d, seed)?.0)
            };
            let (a, b) = (run(with)?, run(without)?);
            let inst = with.instances.last().expect("instance");
            let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0.0, 0.0, 0.0);
            for v in 0..d.views {
                for t in 0..d.frames {
                    let fp = footprint(inst, v, t, d.height, d.width);
                    let (ia, ib) = (a.image(v, t), b.image(v, t));
                    for (p, &cover) in fp.iter().enumerate() {
                        let diff = (0..CHANNELS).map(|c| (ia[p * CHANNELS + c] - ib[p * CHANNELS + c]).abs()).sum::<f64>() / CHANNELS as f64;
                        if cover >= 0.5 {
                            sin += diff;
                            nin += 1.0;
                        } else if cover == 0.0 {
                            sout += diff;
                            nout += 1.0;
                        }
                    }
                }
            }
            Ok((nin > 0.0 && nout > 0.0).then(|| (sin / nin, sout / nout)))
        })
        .collect::<Result<_>>()?;
    let used: Vec<(f64, f64)> = results.into_iter().flatten().collect();
    let n = used.len().max(1) as f64;
    Ok(Localization {
        scenes: used.len(),
        inside: used.iter().map(|u| u.0).sum::<f64>() / n,
        outside: used.iter().map(|u| u.1).sum::<f64>() / n,
        localized: used.iter().filter(|u| u.0 > u.1).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene_for;

    #[test]
    fn evaluation_reference_values() {
        let scenes: Vec<SceneSpec> = (0..3).map(|i| scene_for(0, i)).collect();
        let dims = GridDims::new(3, 2, 8, 14, CHANNELS);
        let targets = oracle_targets(&scenes, dims);
        let r = evaluate(&targets, &targets).unwrap();
        assert_eq!(r.per_scene, vec![0.0; 3]);
        let zeros = vec![LatentGrid::zeros(dims); 3];
        let r = evaluate(&zeros, &targets).unwrap();
        assert_eq!(r.per_scene.len(), 3);
        for (m, t) in r.per_scene.iter().zip(&targets) {
            let direct = t.data().iter().map(|v| v * v).sum::<f64>() / t.data().len() as f64;
            assert!((m - direct).abs() < 1e-12);
        }
        assert!(evaluate(&zeros[..2], &targets).is_err());
    }
}
