use rand::Rng;

use crate::backbone::Denoiser;
use crate::conditions::{nullify, ConditionSet, NullMask};
use crate::error::{invalid, Result};
use crate::flow::{draw_noise, rf_example, TrainItem, VelocityField};
use crate::latent::LatentGrid;
use crate::rng::{self, Stream};
use crate::tensor::Params;

use super::branch::{BranchInput, BranchParams, ScaleSet};

pub const OMEGA_RANGE: (f64, f64) = (1.0, 8.0);
pub const VALIDATION_OMEGAS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistillStrategy {
    /// Any non-empty subset of conditions removed; the matching branches train jointly.
    Mixed,
    /// One condition removed at a time.
    Single1,
    /// Nested removal (text, then instances, then sketch), one branch per level.
    Single2,
}

impl DistillStrategy {
    pub const ALL: [DistillStrategy; 3] = [DistillStrategy::Mixed, DistillStrategy::Single1, DistillStrategy::Single2];

    pub fn name(self) -> &'static str {
        match self {
            DistillStrategy::Mixed => "mixed",
            DistillStrategy::Single1 => "single1",
            DistillStrategy::Single2 => "single2",
        }
    }

    /// The null combinations this strategy draws from, uniformly.
    pub fn support(self) -> Vec<NullMask> {
        match self {
            DistillStrategy::Mixed => NullMask::all_combinations().into_iter().filter(|m| m.any()).collect(),
            DistillStrategy::Single1 => vec![
                NullMask::new(true, false, false),
                NullMask::new(false, true, false),
                NullMask::new(false, false, true),
            ],
            DistillStrategy::Single2 => vec![
                NullMask::new(true, false, false),
                NullMask::new(true, true, false),
                NullMask::new(true, true, true),
            ],
        }
    }
}

impl std::str::FromStr for DistillStrategy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.replace('_', ""))
            .ok_or_else(|| invalid(format!("unknown distillation strategy {s:?}")))
    }
}

/// One distillation target: the teacher contrasts `cond_mask` against
/// `uncond_mask`, and the student runs with the branches in `active`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistillTask {
    pub cond_mask: NullMask,
    pub uncond_mask: NullMask,
    pub active: NullMask,
}

impl DistillTask {
    pub fn for_combination(strategy: DistillStrategy, combo: NullMask) -> Result<Self> {
        if !strategy.support().contains(&combo) {
            return Err(invalid(format!("{combo:?} is not drawn by {}", strategy.name())));
        }
        Ok(match strategy {
            DistillStrategy::Mixed | DistillStrategy::Single1 => Self {
                cond_mask: NullMask::NONE,
                uncond_mask: combo,
                active: combo,
            },
            DistillStrategy::Single2 => {
                let (cond_mask, active) = match (combo.instance, combo.sketch) {
                    (false, _) => (NullMask::NONE, NullMask::new(true, false, false)),
                    (true, false) => (NullMask::new(true, false, false), NullMask::new(false, true, false)),
                    (true, true) => (NullMask::new(true, true, false), NullMask::new(false, false, true)),
                };
                Self {
                    cond_mask,
                    uncond_mask: combo,
                    active,
                }
            }
        })
    }
}

pub fn sample_null_combination(strategy: DistillStrategy, rng: &mut Stream) -> NullMask {
    let support = strategy.support();
    support[rng.random_range(0..support.len())]
}

/// `(ω + 1)·v(cond_mask) − ω·v(uncond_mask)`, two passes of the frozen model.
pub fn teacher_velocity(
    model: &dyn VelocityField,
    x: &LatentGrid,
    s: f64,
    cond: &ConditionSet,
    task: &DistillTask,
    omega: f64,
) -> Result<LatentGrid> {
    let vc = model.velocity(x, s, &nullify(cond, task.cond_mask))?;
    let vu = model.velocity(x, s, &nullify(cond, task.uncond_mask))?;
    let mut out = vc.scale(omega + 1.0);
    out.axpy(-omega, &vu)?;
    Ok(out)
}

/// Base model plus the branches in `active`, each at its scale in `scales`.
pub fn branch_forward(
    model: &Denoiser,
    branches: &BranchParams,
    x: &LatentGrid,
    s: f64,
    cond: &ConditionSet,
    active: NullMask,
    scales: ScaleSet,
) -> Result<LatentGrid> {
    let input = BranchInput {
        params: branches,
        scales,
        active,
    };
    Ok(model.forward_cached(x, s, cond, Some(&input))?.0)
}

/// The distilled single-pass model: every branch on.
#[derive(Clone, Copy, Debug)]
pub struct MadStudent<'a> {
    pub model: &'a Denoiser,
    pub branches: &'a BranchParams,
    /// `ω` per condition family; training only sees equal scales.
    pub scales: ScaleSet,
}

impl VelocityField for MadStudent<'_> {
    fn velocity(&self, x: &LatentGrid, s: f64, cond: &ConditionSet) -> Result<LatentGrid> {
        branch_forward(self.model, self.branches, x, s, cond, NullMask::ALL, self.scales)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillStats {
    pub loss: f64,
    pub teacher_passes: usize,
    /// Union of the branch families trained in this step.
    pub active: NullMask,
}

/// One distillation step on `batch`. The base model is frozen; branch
/// gradients of the mean loss accumulate into `branches`, and on return only
/// the families in `stats.active` require gradients.
pub fn mad_distill_step(
    model: &mut Denoiser,
    branches: &mut BranchParams,
    batch: &[TrainItem],
    strategy: DistillStrategy,
    rng: &mut Stream,
) -> Result<DistillStats> {
    if batch.is_empty() {
        return Err(invalid("empty distillation batch"));
    }
    model.set_requires_grad(false);
    let mut loss = 0.0;
    let mut passes = 0;
    let mut union = NullMask::NONE;
    for item in batch {
        let cond = model.encoder.conditions(&item.scene)?;
        let task = DistillTask::for_combination(strategy, sample_null_combination(strategy, rng))?;
        let omega = rng::uniform(rng, OMEGA_RANGE.0, OMEGA_RANGE.1);
        let (noise, s) = draw_noise(rng, &item.data);
        let x = rf_example(&item.data, &noise, s, None)?.x_s;

        let teacher = teacher_velocity(&*model, &x, s, &cond, &task, omega)?;
        passes += 2;
        branches.set_active(task.active);
        let input = BranchInput {
            params: branches,
            scales: ScaleSet::uniform(omega),
            active: task.active,
        };
        let (student, cache) = model.forward_cached(&x, s, &cond, Some(&input))?;
        let diff = student.sub(&teacher)?;
        let n = diff.data().len() as f64;
        loss += diff.data().iter().map(|e| e * e).sum::<f64>() / n;
        let grad = diff.scale(2.0 / (n * batch.len() as f64));
        model.backward(&cache, &cond, &grad, Some(branches))?;
        union = union.union(task.active);
    }
    branches.set_active(union);
    Ok(DistillStats {
        loss: loss / batch.len() as f64,
        teacher_passes: passes,
        active: union,
    })
}

/// A fixed noised input for validation.
#[derive(Clone, Debug)]
pub struct ValidationPoint {
    pub x: LatentGrid,
    pub s: f64,
    pub cond: ConditionSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    /// Mean squared error of the student against full guidance.
    pub student: f64,
    /// Mean squared error of the unguided model against full guidance.
    pub baseline: f64,
    pub ratio: f64,
}

/// Noised validation inputs drawn deterministically from `seed`.
pub fn validation_points(model: &Denoiser, items: &[TrainItem], seed: u64) -> Result<Vec<ValidationPoint>> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut r = rng::substream(seed, i as u64, "mad-validation");
            let (noise, s) = draw_noise(&mut r, &item.data);
            Ok(ValidationPoint {
                x: rf_example(&item.data, &noise, s, None)?.x_s,
                s,
                cond: model.encoder.conditions(&item.scene)?,
            })
        })
        .collect()
}

/// Student error against the fully guided teacher, relative to the error of
/// the unguided model, both averaged over `omegas` and the points.
pub fn validation_error(model: &Denoiser, branches: &BranchParams, points: &[ValidationPoint], omegas: &[f64]) -> Result<ValidationReport> {
    if points.is_empty() || omegas.is_empty() {
        return Err(invalid("validation needs points and scales"));
    }
    let (mut student, mut baseline) = (0.0, 0.0);
    for p in points {
        let vc = model.forward(&p.x, p.s, &p.cond)?;
        let vu = model.forward(&p.x, p.s, &nullify(&p.cond, NullMask::ALL))?;
        for &omega in omegas {
            let mut teacher = vc.scale(omega + 1.0);
            teacher.axpy(-omega, &vu)?;
            let out = branch_forward(model, branches, &p.x, p.s, &p.cond, NullMask::ALL, ScaleSet::uniform(omega))?;
            student += out.mse(&teacher)?;
            baseline += vc.mse(&teacher)?;
        }
    }
    let n = (points.len() * omegas.len()) as f64;
    let (student, baseline) = (student / n, baseline / n);
    Ok(ValidationReport {
        student,
        baseline,
        ratio: student / baseline,
    })
}
