//! Scale-conditioned auxiliary branches.
//!
//! Text and instance branches are extra cross-attention modules in every block;
//! the sketch branch is an MLP on each SketchFormer fusion path. Each family
//! also owns an output branch, a linear map on the normalized head input whose
//! residual joins after the final norm. A branch
//! residual `r` is modulated by its guidance scale as `ω·r ⊙ (1 + γ(ω)) + β(ω)`,
//! with `[γ, β]` a linear map of Fourier features of `ω / 16`. All output
//! projections start at zero.

use crate::conditions::NullMask;
use crate::error::{invalid, Result};
use crate::nn::{fourier_features, AttnGroup, Linear, MhaCache, Mlp, MlpCache, MultiHeadAttention};
use crate::rng::Stream;
use crate::tensor::{Params, Parameter, Tensor};

pub const SCALE_BANDS: usize = 4;
pub const SCALE_NORM: f64 = 16.0;

/// Per-condition guidance scales `Ω = (ω_l, ω_i, ω_r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleSet {
    pub text: f64,
    pub instance: f64,
    pub sketch: f64,
}

impl ScaleSet {
    pub fn uniform(omega: f64) -> Self {
        Self {
            text: omega,
            instance: omega,
            sketch: omega,
        }
    }

    /// Applies `f` to every scale.
    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            text: f(self.text),
            instance: f(self.instance),
            sketch: f(self.sketch),
        }
    }
}

/// `text,instance,sketch`, as written by `Display`.
impl std::str::FromStr for ScaleSet {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .filter(|v| v.len() == 3)
            .ok_or_else(|| invalid(format!("expected three comma-separated scales, got {s:?}")))?;
        Ok(Self {
            text: v[0],
            instance: v[1],
            sketch: v[2],
        })
    }
}

impl std::fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?},{:?},{:?}", self.text, self.instance, self.sketch)
    }
}

pub fn scale_features(omega: f64) -> Tensor {
    fourier_features(&Tensor::filled(&[1, 1], omega / SCALE_NORM), SCALE_BANDS)
        .and_then(|t| t.reshape(&[1, 2 * SCALE_BANDS]))
        .expect("scale features")
}

#[derive(Clone, Debug)]
pub struct Modulation {
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct ModCache {
    feat: Tensor,
    r: Tensor,
    gamma: Vec<f64>,
    omega: f64,
}

impl Modulation {
    fn new(name: &str, d: usize) -> Self {
        Self {
            proj: Linear::zeros(name, 2 * SCALE_BANDS, 2 * d),
        }
    }

    pub fn forward(&self, r: &Tensor, omega: f64) -> Result<(Tensor, ModCache)> {
        let feat = scale_features(omega);
        let gb = self.proj.forward(&feat)?;
        let d = r.last_dim();
        let (gamma, beta) = gb.data().split_at(d);
        let mut out = r.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((o, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                *o = omega * *o * (1.0 + g) + b;
            }
        }
        Ok((
            out,
            ModCache {
                feat,
                r: r.clone(),
                gamma: gamma.to_vec(),
                omega,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ModCache, dy: &Tensor) -> Result<Tensor> {
        let d = dy.last_dim();
        let mut dgb = vec![0.0; 2 * d];
        let mut dr = dy.clone();
        for (row, (dyr, rr)) in dr.data_mut().chunks_mut(d).zip(dy.data().chunks(d).zip(cache.r.data().chunks(d))) {
            for c in 0..d {
                dgb[c] += cache.omega * dyr[c] * rr[c];
                dgb[d + c] += dyr[c];
                row[c] = cache.omega * dyr[c] * (1.0 + cache.gamma[c]);
            }
        }
        self.proj.backward(&cache.feat, &Tensor::new(vec![1, 2 * d], dgb)?)?;
        Ok(dr)
    }
}

impl Params for Modulation {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.proj.visit_mut(f);
    }
}

/// Auxiliary cross-attention onto one condition's tokens.
#[derive(Clone, Debug)]
pub struct CrossBranch {
    pub attn: MultiHeadAttention,
    pub modulation: Modulation,
}

#[derive(Clone, Debug)]
pub struct CrossBranchCache {
    attn: MhaCache,
    modulation: ModCache,
}

impl CrossBranch {
    fn new(name: &str, d: usize, heads: usize, rng: &mut Stream) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, heads, rng)?.zero_output(),
            modulation: Modulation::new(&format!("{name}.mod"), d),
        })
    }

    pub fn forward(&self, a: &Tensor, kv: &Tensor, groups: &[AttnGroup], omega: f64) -> Result<(Tensor, CrossBranchCache)> {
        let (r, attn) = self.attn.forward(a, Some(kv), groups)?;
        let (out, modulation) = self.modulation.forward(&r, omega)?;
        Ok((out, CrossBranchCache { attn, modulation }))
    }

    /// Returns `(d a, d kv)`.
    pub fn backward(&mut self, cache: &CrossBranchCache, dy: &Tensor, groups: &[AttnGroup]) -> Result<(Tensor, Tensor)> {
        let dr = self.modulation.backward(&cache.modulation, dy)?;
        let (da, dkv) = self.attn.backward(&cache.attn, &dr, groups)?;
        Ok((da, dkv.expect("cross attention")))
    }
}

impl Params for CrossBranch {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.attn.visit(f);
        self.modulation.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.attn.visit_mut(f);
        self.modulation.visit_mut(f);
    }
}

/// Auxiliary MLP on a sketch fusion path.
#[derive(Clone, Debug)]
pub struct SketchBranch {
    pub mlp: Mlp,
    pub modulation: Modulation,
}

#[derive(Clone, Debug)]
pub struct SketchBranchCache {
    mlp: MlpCache,
    modulation: ModCache,
}

impl SketchBranch {
    fn new(name: &str, d: usize, hidden: usize, rng: &mut Stream) -> Self {
        let mut mlp = Mlp::new(&format!("{name}.mlp"), d, hidden, d, rng);
        mlp.fc2 = Linear::zeros(&format!("{name}.mlp.fc2"), hidden, d);
        Self {
            mlp,
            modulation: Modulation::new(&format!("{name}.mod"), d),
        }
    }

    pub fn forward(&self, c: &Tensor, omega: f64) -> Result<(Tensor, SketchBranchCache)> {
        let (r, mlp) = self.mlp.forward(c)?;
        let (out, modulation) = self.modulation.forward(&r, omega)?;
        Ok((out, SketchBranchCache { mlp, modulation }))
    }

    pub fn backward(&mut self, cache: &SketchBranchCache, dy: &Tensor) -> Result<Tensor> {
        let dr = self.modulation.backward(&cache.modulation, dy)?;
        self.mlp.backward(&cache.mlp, &dr)
    }
}

impl Params for SketchBranch {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.mlp.visit(f);
        self.modulation.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.mlp.visit_mut(f);
        self.modulation.visit_mut(f);
    }
}

/// Linear residual on the normalized head input.
#[derive(Clone, Debug)]
pub struct OutputBranch {
    pub proj: Linear,
    pub modulation: Modulation,
}

impl OutputBranch {
    fn new(name: &str, d: usize) -> Self {
        Self {
            proj: Linear::zeros(&format!("{name}.proj"), d, d),
            modulation: Modulation::new(&format!("{name}.mod"), d),
        }
    }

    pub fn forward(&self, a: &Tensor, omega: f64) -> Result<(Tensor, ModCache)> {
        self.modulation.forward(&self.proj.forward(a)?, omega)
    }

    /// Returns `d a`.
    pub fn backward(&mut self, a: &Tensor, cache: &ModCache, dy: &Tensor) -> Result<Tensor> {
        let dr = self.modulation.backward(cache, dy)?;
        self.proj.backward(a, &dr)
    }
}

impl Params for OutputBranch {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.proj.visit(f);
        self.modulation.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.proj.visit_mut(f);
        self.modulation.visit_mut(f);
    }
}

/// `ψ_l`, `ψ_i` (one per block) and `ψ_r` (one per sketch cell), plus one
/// output branch per family in text, instance, sketch order.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub text: Vec<CrossBranch>,
    pub instance: Vec<CrossBranch>,
    pub sketch: Vec<SketchBranch>,
    pub output: Vec<OutputBranch>,
}

impl BranchParams {
    pub fn new(cfg: &crate::backbone::BackboneConfig, rng: &mut Stream) -> Result<Self> {
        let d = cfg.d_model;
        let mut text = Vec::with_capacity(cfg.n_blocks);
        let mut instance = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            text.push(CrossBranch::new(&format!("mad.text{b}"), d, cfg.n_heads, rng)?);
            instance.push(CrossBranch::new(&format!("mad.instance{b}"), d, cfg.n_heads, rng)?);
        }
        let sketch = (0..cfg.sketch_cells)
            .map(|k| SketchBranch::new(&format!("mad.sketch{k}"), d, cfg.mlp_hidden, rng))
            .collect();
        let output = ["text", "instance", "sketch"]
            .iter()
            .map(|f| OutputBranch::new(&format!("mad.{f}.out"), d))
            .collect();
        Ok(Self {
            text,
            instance,
            sketch,
            output,
        })
    }

    /// Gradient norm of one branch family.
    pub fn family_grad_norm(&self, family: Family) -> f64 {
        match family {
            Family::Text => self.text.grad_norm().hypot(self.output[0].grad_norm()),
            Family::Instance => self.instance.grad_norm().hypot(self.output[1].grad_norm()),
            Family::Sketch => self.sketch.grad_norm().hypot(self.output[2].grad_norm()),
        }
    }

    /// Enables gradients only for families whose flag is set in `active`.
    pub fn set_active(&mut self, active: NullMask) {
        self.text.set_requires_grad(active.text);
        self.instance.set_requires_grad(active.instance);
        self.sketch.set_requires_grad(active.sketch);
        for (o, on) in self.output.iter_mut().zip([active.text, active.instance, active.sketch]) {
            o.set_requires_grad(on);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Text,
    Instance,
    Sketch,
}

impl Params for BranchParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.text.visit(f);
        self.instance.visit(f);
        self.sketch.visit(f);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.text.visit_mut(f);
        self.instance.visit_mut(f);
        self.sketch.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Branches switched on for one forward pass, with their scales.
#[derive(Clone, Copy, Debug)]
pub struct BranchInput<'a> {
    pub params: &'a BranchParams,
    pub scales: ScaleSet,
    pub active: NullMask,
}

impl BranchInput<'_> {
    /// Active output branches with their scales.
    pub fn outputs(&self) -> impl Iterator<Item = (usize, f64)> {
        let a = self.active;
        let sc = self.scales;
        [(a.text, sc.text), (a.instance, sc.instance), (a.sketch, sc.sketch)]
            .into_iter()
            .enumerate()
            .filter(|(_, (on, _))| *on)
            .map(|(i, (_, w))| (i, w))
    }
}
