//! Scene conditions: text label, 3D instances, cameras and road sketches.

mod encode;
mod mask;
mod scene;

pub use encode::{
    aggregate_conditions, nullify, sample_dropout, CondGrads, ConditionEncoder, ConditionSet, EncodeCache, EncoderConfig, NullMask,
};
pub use mask::apply_first_k_mask;
pub use scene::{
    clip_rect, invert3, is_night, CameraSpec, InstanceSpec, Mat3, Rect, RoadSketch, SceneSpec, SketchRaster, ViewBox, CAPTIONS,
    MAX_INSTANCES, NIGHT_LABELS, SCENE_LABELS,
};

#[cfg(test)]
mod tests;
