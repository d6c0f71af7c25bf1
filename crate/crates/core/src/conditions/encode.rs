//! Token encoders for text, instances and cameras, and the condition set the
//! denoiser attends to.

use rand::Rng;

use crate::conditions::scene::{CameraSpec, InstanceSpec, RoadSketch, SceneSpec, SketchRaster, CAPTIONS, SCENE_LABELS};
use crate::error::{invalid, Error, Result};
use crate::nn::{fourier_features, Mlp, MlpCache};
use crate::rng::{self, Stream};
use crate::tensor::{Params, Parameter, Tensor};

/// Which conditions are replaced by their null (φ) form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct NullMask {
    pub text: bool,
    pub instance: bool,
    pub sketch: bool,
}

impl NullMask {
    pub const NONE: NullMask = NullMask::new(false, false, false);
    pub const ALL: NullMask = NullMask::new(true, true, true);

    pub const fn new(text: bool, instance: bool, sketch: bool) -> Self {
        Self { text, instance, sketch }
    }

    pub fn union(self, other: NullMask) -> NullMask {
        NullMask::new(self.text || other.text, self.instance || other.instance, self.sketch || other.sketch)
    }

    pub fn any(self) -> bool {
        self.text || self.instance || self.sketch
    }

    /// All eight masks in `(text, instance, sketch)` binary order.
    pub fn all_combinations() -> [NullMask; 8] {
        std::array::from_fn(|b| NullMask::new(b & 4 != 0, b & 2 != 0, b & 1 != 0))
    }
}

/// Encoded conditions for one scene. Camera tokens hold one row per view.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub text: Tensor,
    pub instances: Tensor,
    pub camera: Tensor,
    pub road: RoadSketch,
    pub null_text: Tensor,
    pub null_instance: Tensor,
    pub nulls: NullMask,
}

/// Gradients with respect to the token blocks of a [`ConditionSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct CondGrads {
    pub text: Tensor,
    pub instances: Tensor,
    pub camera: Tensor,
}

impl CondGrads {
    pub fn zeros_like(cond: &ConditionSet) -> Self {
        Self {
            text: Tensor::zeros(cond.text.shape()),
            instances: Tensor::zeros(cond.instances.shape()),
            camera: Tensor::zeros(cond.camera.shape()),
        }
    }

    pub fn accumulate(&mut self, other: &CondGrads) -> Result<()> {
        self.text.axpy(1.0, &other.text)?;
        self.instances.axpy(1.0, &other.instances)?;
        self.camera.axpy(1.0, &other.camera)
    }
}

/// Row concatenation `[L; I; P]`.
pub fn aggregate_conditions(text: &Tensor, instances: &Tensor, camera: &Tensor) -> Result<Tensor> {
    let d = text.last_dim();
    for (t, op) in [(instances, "aggregate_conditions(I)"), (camera, "aggregate_conditions(P)")] {
        if t.last_dim() != d {
            return Err(Error::Shape {
                op,
                left: text.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    Tensor::concat_rows(&[text, instances, camera])
}

impl ConditionSet {
    pub fn views(&self) -> usize {
        self.camera.rows()
    }

    pub fn d_model(&self) -> usize {
        self.text.last_dim()
    }

    /// Rows in each per-view aggregate: `n_L + n_ins + 1`.
    pub fn rows_per_view(&self) -> usize {
        self.text.rows() + self.instances.rows() + 1
    }

    /// The aggregate `[L; I; P_v]` for one view.
    pub fn aggregate(&self, view: usize) -> Result<Tensor> {
        if view >= self.views() {
            return Err(invalid(format!("view {view} out of {}", self.views())));
        }
        aggregate_conditions(&self.text, &self.instances, &self.camera.slice_rows(view, view + 1))
    }

    /// Per-view aggregates stacked view after view.
    pub fn stacked(&self) -> Result<Tensor> {
        let parts = (0..self.views()).map(|v| self.aggregate(v)).collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Splits the gradient of [`stacked`](Self::stacked) back onto the token blocks.
    pub fn split_stacked_grad(&self, d: &Tensor) -> Result<CondGrads> {
        let n = self.rows_per_view();
        let (nl, ni) = (self.text.rows(), self.instances.rows());
        if d.rows() != n * self.views() || d.last_dim() != self.d_model() {
            return Err(Error::Shape {
                op: "split_stacked_grad",
                left: vec![n * self.views(), self.d_model()],
                right: d.shape().to_vec(),
            });
        }
        let mut g = CondGrads::zeros_like(self);
        for v in 0..self.views() {
            let base = v * n;
            g.text.axpy(1.0, &d.slice_rows(base, base + nl))?;
            g.instances.axpy(1.0, &d.slice_rows(base + nl, base + nl + ni))?;
            g.camera.row_mut(v).copy_from_slice(d.row(base + n - 1));
        }
        Ok(g)
    }

    pub fn sketch_raster(&self, frames: usize, height: usize, width: usize) -> SketchRaster {
        self.road.rasterize(frames, height, width)
    }
}

/// Replaces the masked blocks by their null form. Idempotent, and masks
/// compose by union.
pub fn nullify(cond: &ConditionSet, mask: NullMask) -> ConditionSet {
    let mut out = cond.clone();
    if mask.text {
        out.text = cond.null_text.clone();
    }
    if mask.instance {
        let d = cond.null_instance.last_dim();
        let n = cond.instances.rows();
        out.instances = Tensor::from_fn(&[n, d], |i| cond.null_instance.data()[i % d]);
    }
    if mask.sketch {
        out.road = RoadSketch::empty(cond.road.views.len());
    }
    out.nulls = cond.nulls.union(mask);
    out
}

/// Training-time condition dropout: everything with probability `p_all`,
/// otherwise each condition independently with probability `p_each`.
pub fn sample_dropout(rng: &mut Stream, p_all: f64, p_each: f64) -> NullMask {
    if rng.random::<f64>() < p_all {
        return NullMask::ALL;
    }
    NullMask::new(
        rng.random::<f64>() < p_each,
        rng.random::<f64>() < p_each,
        rng.random::<f64>() < p_each,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub text_tokens: usize,
    pub bands: usize,
    pub views: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            text_tokens: 8,
            bands: 4,
            views: 3,
            hidden: 64,
        }
    }
}

/// Scale applied to per-frame box motion before Fourier encoding.
const MOTION_SCALE: f64 = 4.0;

impl EncoderConfig {
    fn instance_geometry_len(&self) -> usize {
        self.views * (6 * 2 * self.bands + 1) + 2 * self.bands
    }

    fn instance_input_len(&self) -> usize {
        self.instance_geometry_len() + self.d_model
    }

    fn camera_input_len(&self) -> usize {
        16 * 2 * self.bands
    }
}

#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub cfg: EncoderConfig,
    pub label_emb: Parameter,
    pub text_pos: Parameter,
    pub caption_emb: Parameter,
    pub instance_mlp: Mlp,
    pub camera_mlp: Mlp,
    pub null_text: Parameter,
    pub null_instance: Parameter,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    label: usize,
    captions: Vec<usize>,
    instance: Option<MlpCache>,
    camera: MlpCache,
}

impl ConditionEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut Stream) -> Self {
        let d = cfg.d_model;
        let mut table = |name: &str, rows: usize, scale: f64| {
            Parameter::new(name, rng::normal_tensor(rng, &[rows, d]).scale(scale))
        };
        let label_emb = table("cond.label_emb", SCENE_LABELS, 0.5);
        let text_pos = table("cond.text_pos", cfg.text_tokens, 0.1);
        let caption_emb = table("cond.caption_emb", CAPTIONS, 0.5);
        let instance_mlp = Mlp::new("cond.instance", cfg.instance_input_len(), cfg.hidden, d, rng);
        let camera_mlp = Mlp::new("cond.camera", cfg.camera_input_len(), cfg.hidden, d, rng);
        Self {
            null_text: Parameter::zeros("cond.null_text", &[cfg.text_tokens, d]),
            null_instance: Parameter::zeros("cond.null_instance", &[1, d]),
            cfg,
            label_emb,
            text_pos,
            caption_emb,
            instance_mlp,
            camera_mlp,
        }
    }

    pub fn encode_text(&self, label: usize) -> Result<Tensor> {
        if label >= SCENE_LABELS {
            return Err(Error::UnknownLabel {
                kind: "scene label",
                id: label,
            });
        }
        let d = self.cfg.d_model;
        let emb = self.label_emb.value.row(label);
        let pos = self.text_pos.value.data();
        Ok(Tensor::from_fn(&[self.cfg.text_tokens, d], |i| emb[i % d] + pos[i]))
    }

    pub(crate) fn instance_inputs(&self, instances: &[InstanceSpec]) -> Result<Tensor> {
        let cfg = &self.cfg;
        let mut rows = Vec::with_capacity(instances.len());
        for inst in instances {
            if inst.caption >= CAPTIONS {
                return Err(Error::UnknownLabel {
                    kind: "caption",
                    id: inst.caption,
                });
            }
            if inst.boxes.len() != cfg.views {
                return Err(invalid(format!("instance has {} views, encoder expects {}", inst.boxes.len(), cfg.views)));
            }
            let mut row = Vec::with_capacity(cfg.instance_input_len());
            for b in &inst.boxes {
                let (vis, geo) = match b {
                    Some(b) => (
                        1.0,
                        [b.rect[0], b.rect[1], b.rect[2], b.rect[3], b.motion[0] * MOTION_SCALE, b.motion[1] * MOTION_SCALE],
                    ),
                    None => (0.0, [0.0; 6]),
                };
                let ff = fourier_features(&Tensor::new(vec![6], geo.to_vec())?, cfg.bands)?;
                if vis == 0.0 {
                    row.extend(std::iter::repeat_n(0.0, ff.len()));
                } else {
                    row.extend_from_slice(ff.data());
                }
                row.push(vis);
            }
            row.extend_from_slice(fourier_features(&Tensor::filled(&[1], inst.angle), cfg.bands)?.data());
            row.extend_from_slice(self.caption_emb.value.row(inst.caption));
            rows.push(row);
        }
        Tensor::new(vec![instances.len(), cfg.instance_input_len()], rows.concat())
    }

    /// `Φ(F(B), F(θ), T)` per instance; empty input gives a `[0, d]` tensor.
    pub fn encode_instances(&self, instances: &[InstanceSpec]) -> Result<Tensor> {
        Ok(self.encode_instances_cached(instances)?.0)
    }

    fn encode_instances_cached(&self, instances: &[InstanceSpec]) -> Result<(Tensor, Option<MlpCache>)> {
        if instances.is_empty() {
            return Ok((Tensor::zeros(&[0, self.cfg.d_model]), None));
        }
        let (out, cache) = self.instance_mlp.forward(&self.instance_inputs(instances)?)?;
        Ok((out, Some(cache)))
    }

    fn camera_inputs(&self, cams: &[CameraSpec]) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(cams.len() * 16);
        for cam in cams {
            flat.extend(cam.image_to_world()?.iter().flatten());
        }
        fourier_features(&Tensor::new(vec![cams.len(), 16], flat)?, self.cfg.bands)?.reshape(&[cams.len(), self.cfg.camera_input_len()])
    }

    /// One `[1, d]` token from the image-to-world transform of `cam`.
    pub fn encode_camera(&self, cam: &CameraSpec) -> Result<Tensor> {
        Ok(self.camera_mlp.forward(&self.camera_inputs(std::slice::from_ref(cam))?)?.0)
    }

    pub fn null_set(&self, cond: &ConditionSet) -> ConditionSet {
        nullify(cond, NullMask::ALL)
    }

    pub fn encode(&self, scene: &SceneSpec) -> Result<(ConditionSet, EncodeCache)> {
        if scene.views() != self.cfg.views {
            return Err(invalid(format!("scene has {} views, encoder expects {}", scene.views(), self.cfg.views)));
        }
        let text = self.encode_text(scene.label)?;
        let (instances, instance) = self.encode_instances_cached(&scene.instances)?;
        let (camera, camera_cache) = self.camera_mlp.forward(&self.camera_inputs(&scene.cameras)?)?;
        let cond = ConditionSet {
            text,
            instances,
            camera,
            road: scene.road.clone(),
            null_text: self.null_text.value.clone(),
            null_instance: self.null_instance.value.clone(),
            nulls: NullMask::NONE,
        };
        let cache = EncodeCache {
            label: scene.label,
            captions: scene.instances.iter().map(|i| i.caption).collect(),
            instance,
            camera: camera_cache,
        };
        Ok((cond, cache))
    }

    pub fn conditions(&self, scene: &SceneSpec) -> Result<ConditionSet> {
        Ok(self.encode(scene)?.0)
    }

    /// Accumulates parameter gradients given token gradients for a condition
    /// set produced by [`encode`](Self::encode) and nullified by `nulls`.
    pub fn backward(&mut self, cache: &EncodeCache, nulls: NullMask, grads: &CondGrads) -> Result<()> {
        let d = self.cfg.d_model;
        if nulls.text {
            if self.null_text.requires_grad {
                self.null_text.grad.axpy(1.0, &grads.text)?;
            }
        } else {
            if self.text_pos.requires_grad {
                self.text_pos.grad.axpy(1.0, &grads.text)?;
            }
            if self.label_emb.requires_grad {
                for r in 0..grads.text.rows() {
                    let src = grads.text.row(r).to_vec();
                    let dst = self.label_emb.grad.row_mut(cache.label);
                    dst.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                }
            }
        }
        if nulls.instance {
            if self.null_instance.requires_grad {
                for r in 0..grads.instances.rows() {
                    let src = grads.instances.row(r).to_vec();
                    self.null_instance.grad.row_mut(0).iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                }
            }
        } else if let Some(ic) = &cache.instance {
            let dx = self.instance_mlp.backward(ic, &grads.instances)?;
            if self.caption_emb.requires_grad {
                let off = self.cfg.instance_geometry_len();
                for (r, &cap) in cache.captions.iter().enumerate() {
                    let src = dx.row(r)[off..off + d].to_vec();
                    self.caption_emb.grad.row_mut(cap).iter_mut().zip(&src).for_each(|(a, b)| *a += b);
                }
            }
        }
        self.camera_mlp.backward(&cache.camera, &grads.camera)?;
        Ok(())
    }
}

impl Params for ConditionEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.label_emb);
        f(&self.text_pos);
        f(&self.caption_emb);
        self.instance_mlp.visit(f);
        self.camera_mlp.visit(f);
        f(&self.null_text);
        f(&self.null_instance);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.label_emb);
        f(&mut self.text_pos);
        f(&mut self.caption_emb);
        self.instance_mlp.visit_mut(f);
        self.camera_mlp.visit_mut(f);
        f(&mut self.null_text);
        f(&mut self.null_instance);
    }
}
