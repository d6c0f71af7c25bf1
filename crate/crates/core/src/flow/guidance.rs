use crate::backbone::Denoiser;
use crate::conditions::{is_night, nullify, ConditionSet, NullMask};
use crate::error::{invalid, Result};
use crate::latent::LatentGrid;

/// Anything that predicts the velocity `v(x_s, s, cond)`.
pub trait VelocityField {
    fn velocity(&self, x: &LatentGrid, s: f64, cond: &ConditionSet) -> Result<LatentGrid>;
}

impl VelocityField for Denoiser {
    fn velocity(&self, x: &LatentGrid, s: f64, cond: &ConditionSet) -> Result<LatentGrid> {
        self.forward(x, s, cond)
    }
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn velocity(&self, x: &LatentGrid, s: f64, cond: &ConditionSet) -> Result<LatentGrid> {
        (**self).velocity(x, s, cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuidanceMode {
    Off,
    /// Unconditional branch nullifies text, instances and sketch.
    Extended,
    /// Unconditional branch keeps the text condition.
    Night,
    /// Single pass through a distilled student.
    Mad,
}

impl GuidanceMode {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::Off => "off",
            GuidanceMode::Extended => "extended",
            GuidanceMode::Night => "night",
            GuidanceMode::Mad => "mad",
        }
    }

    pub fn passes(self) -> usize {
        match self {
            GuidanceMode::Extended | GuidanceMode::Night => 2,
            GuidanceMode::Off | GuidanceMode::Mad => 1,
        }
    }

    /// Conditions removed in the unconditional pass.
    pub fn null_mask(self) -> Option<NullMask> {
        match self {
            GuidanceMode::Extended => Some(NullMask::ALL),
            GuidanceMode::Night => Some(NullMask::new(false, true, true)),
            GuidanceMode::Off | GuidanceMode::Mad => None,
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(GuidanceMode::Off),
            "extended" => Ok(GuidanceMode::Extended),
            "night" => Ok(GuidanceMode::Night),
            "mad" => Ok(GuidanceMode::Mad),
            other => Err(invalid(format!("unknown guidance mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub scale: f64,
}

pub const DEFAULT_SCALE: f64 = 2.0;

impl GuidanceSpec {
    pub fn new(mode: GuidanceMode, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(invalid(format!("guidance scale {scale} must be finite and non-negative")));
        }
        Ok(Self { mode, scale })
    }

    pub fn off() -> Self {
        Self {
            mode: GuidanceMode::Off,
            scale: 1.0,
        }
    }

    pub fn extended(scale: f64) -> Self {
        Self {
            mode: GuidanceMode::Extended,
            scale,
        }
    }

    pub fn night(scale: f64) -> Self {
        Self {
            mode: GuidanceMode::Night,
            scale,
        }
    }

    pub fn mad() -> Self {
        Self {
            mode: GuidanceMode::Mad,
            scale: 1.0,
        }
    }

    /// Two-pass guidance, in night mode for night scene labels.
    pub fn for_label(label: usize, scale: f64) -> Self {
        if is_night(label) {
            Self::night(scale)
        } else {
            Self::extended(scale)
        }
    }
}

/// `v_u + λ (v_c − v_u)`, evaluated as `λ v_c + (1 − λ) v_u` so that `λ = 1`
/// returns the conditional pass unchanged. The unconditional pass is chosen by
/// the mode;
/// `Off` is a single conditional pass. Adds the passes used to `nfe`.
pub fn cfg_velocity(
    model: &dyn VelocityField,
    x: &LatentGrid,
    s: f64,
    cond: &ConditionSet,
    spec: &GuidanceSpec,
    nfe: &mut usize,
) -> Result<LatentGrid> {
    match spec.mode.null_mask() {
        None if spec.mode == GuidanceMode::Mad => Err(invalid("cfg_velocity does not handle mad guidance")),
        None => {
            *nfe += 1;
            model.velocity(x, s, cond)
        }
        Some(mask) => guided_pair(model, x, s, cond, mask, spec.scale, nfe),
    }
}

/// Two-pass guidance at scale `lambda` against the unconditional pass that
/// nulls `mask`.
pub fn guided_pair(
    model: &dyn VelocityField,
    x: &LatentGrid,
    s: f64,
    cond: &ConditionSet,
    mask: NullMask,
    lambda: f64,
    nfe: &mut usize,
) -> Result<LatentGrid> {
    let vc = model.velocity(x, s, cond)?;
    let vu = model.velocity(x, s, &nullify(cond, mask))?;
    *nfe += 2;
    let mut out = vc.scale(lambda);
    out.axpy(1.0 - lambda, &vu)?;
    Ok(out)
}

/// Velocity used by the samplers: `Mad` is a single pass through `model`,
/// which is expected to be the distilled student.
pub fn guided_velocity(
    model: &dyn VelocityField,
    x: &LatentGrid,
    s: f64,
    cond: &ConditionSet,
    spec: &GuidanceSpec,
    nfe: &mut usize,
) -> Result<LatentGrid> {
    if spec.mode == GuidanceMode::Mad {
        *nfe += 1;
        return model.velocity(x, s, cond);
    }
    cfg_velocity(model, x, s, cond, spec, nfe)
}
