//! Guidance distillation into scale-conditioned auxiliary branches.

mod branch;
mod distill;

pub use branch::{
    scale_features, BranchInput, BranchParams, CrossBranch, CrossBranchCache, Family, ModCache, Modulation, OutputBranch, ScaleSet, SketchBranch,
    SketchBranchCache, SCALE_BANDS, SCALE_NORM,
};
pub use distill::{
    branch_forward, mad_distill_step, sample_null_combination, teacher_velocity, validation_error, validation_points, DistillStats,
    DistillStrategy, DistillTask, MadStudent, ValidationPoint, ValidationReport, OMEGA_RANGE, VALIDATION_OMEGAS,
};
