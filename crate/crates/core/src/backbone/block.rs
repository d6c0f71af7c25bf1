//! Main transformer blocks and SketchFormer cells.

use crate::error::{invalid, Result};
use crate::mad::{CrossBranch, CrossBranchCache};
use crate::nn::{AttnGroup, LayerNorm, LnCache, MhaCache, Mlp, MlpCache, MultiHeadAttention};
use crate::rng::Stream;
use crate::tensor::{Params, Parameter, Tensor};

use super::tokens::TokenLayout;

/// Attention groupings for one token layout.
#[derive(Clone, Debug)]
pub struct Groups {
    pub layout: TokenLayout,
    pub spatial: Vec<AttnGroup>,
    pub per_view: Vec<AttnGroup>,
    pub temporal: Vec<AttnGroup>,
    pub cross: Vec<AttnGroup>,
    pub text: Vec<AttnGroup>,
    pub instance: Vec<AttnGroup>,
}

impl Groups {
    pub fn new(layout: TokenLayout, inflate: bool, text_rows: usize, instance_rows: usize) -> Self {
        Self {
            spatial: layout.spatial_groups(inflate),
            per_view: layout.spatial_groups(false),
            temporal: layout.temporal_groups(),
            cross: layout.cross_groups(text_rows + instance_rows + 1),
            text: layout.global_group(text_rows),
            instance: layout.global_group(instance_rows),
            layout,
        }
    }
}

/// Auxiliary branches active in one block.
pub struct BlockAux<'a> {
    pub text: Option<(&'a CrossBranch, f64)>,
    pub instance: Option<(&'a CrossBranch, f64)>,
    pub text_kv: &'a Tensor,
    pub instance_kv: &'a Tensor,
}

pub struct BlockAuxMut<'a> {
    pub text: Option<&'a mut CrossBranch>,
    pub instance: Option<&'a mut CrossBranch>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln_spatial: LayerNorm,
    pub spatial: MultiHeadAttention,
    pub ln_temporal: LayerNorm,
    pub temporal_pos: Parameter,
    pub temporal: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln_spatial: LnCache,
    spatial: MhaCache,
    ln_temporal: LnCache,
    temporal: MhaCache,
    ln_cross: LnCache,
    cross: MhaCache,
    text: Option<CrossBranchCache>,
    instance: Option<CrossBranchCache>,
    ln_mlp: LnCache,
    mlp: MlpCache,
}

/// Gradients leaving a block besides the token stream.
#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub dx: Tensor,
    pub dkv: Tensor,
    pub dtext: Option<Tensor>,
    pub dinstance: Option<Tensor>,
}

impl Block {
    pub fn new(name: &str, d: usize, heads: usize, hidden: usize, max_frames: usize, rng: &mut Stream) -> Result<Self> {
        Ok(Self {
            ln_spatial: LayerNorm::new(&format!("{name}.ln_spatial"), d),
            spatial: MultiHeadAttention::new(&format!("{name}.spatial"), d, heads, rng)?,
            ln_temporal: LayerNorm::new(&format!("{name}.ln_temporal"), d),
            temporal_pos: Parameter::new(
                format!("{name}.temporal_pos"),
                crate::rng::normal_tensor(rng, &[max_frames, d]).scale(0.1),
            ),
            temporal: MultiHeadAttention::new(&format!("{name}.temporal"), d, heads, rng)?,
            ln_cross: LayerNorm::new(&format!("{name}.ln_cross"), d),
            cross: MultiHeadAttention::new(&format!("{name}.cross"), d, heads, rng)?,
            ln_mlp: LayerNorm::new(&format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(&format!("{name}.mlp"), d, hidden, d, rng),
        })
    }

    pub fn forward(&self, x: &Tensor, groups: &Groups, kv: &Tensor, aux: Option<&BlockAux>) -> Result<(Tensor, BlockCache)> {
        let (a, ln_spatial) = self.ln_spatial.forward(x)?;
        let (s, spatial) = self.spatial.forward(&a, None, &groups.spatial)?;
        let mut h = x.add(&s)?;

        let (mut a, ln_temporal) = self.ln_temporal.forward(&h)?;
        add_frame_codes(&mut a, &self.temporal_pos.value, &groups.layout)?;
        let (t, temporal) = self.temporal.forward(&a, None, &groups.temporal)?;
        h.axpy(1.0, &t)?;

        let (a, ln_cross) = self.ln_cross.forward(&h)?;
        let (c, cross) = self.cross.forward(&a, Some(kv), &groups.cross)?;
        h.axpy(1.0, &c)?;
        let (mut text, mut instance) = (None, None);
        if let Some(aux) = aux {
            if let Some((branch, omega)) = aux.text {
                let (r, cache) = branch.forward(&a, aux.text_kv, &groups.text, omega)?;
                h.axpy(1.0, &r)?;
                text = Some(cache);
            }
            if let Some((branch, omega)) = aux.instance {
                let (r, cache) = branch.forward(&a, aux.instance_kv, &groups.instance, omega)?;
                h.axpy(1.0, &r)?;
                instance = Some(cache);
            }
        }

        let (a, ln_mlp) = self.ln_mlp.forward(&h)?;
        let (m, mlp) = self.mlp.forward(&a)?;
        h.axpy(1.0, &m)?;
        Ok((
            h,
            BlockCache {
                ln_spatial,
                spatial,
                ln_temporal,
                temporal,
                ln_cross,
                cross,
                text,
                instance,
                ln_mlp,
                mlp,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Tensor, groups: &Groups, aux: Option<BlockAuxMut>) -> Result<BlockGrads> {
        let mut dh = dy.clone();
        let da = self.mlp.backward(&cache.mlp, dy)?;
        dh.axpy(1.0, &self.ln_mlp.backward(&cache.ln_mlp, &da)?)?;

        let (mut da, dkv) = self.cross.backward(&cache.cross, &dh, &groups.cross)?;
        let (mut dtext, mut dinstance) = (None, None);
        if let Some(aux) = aux {
            if let (Some(branch), Some(c)) = (aux.text, &cache.text) {
                let (d, dkv) = branch.backward(c, &dh, &groups.text)?;
                da.axpy(1.0, &d)?;
                dtext = Some(dkv);
            }
            if let (Some(branch), Some(c)) = (aux.instance, &cache.instance) {
                let (d, dkv) = branch.backward(c, &dh, &groups.instance)?;
                da.axpy(1.0, &d)?;
                dinstance = Some(dkv);
            }
        }
        dh.axpy(1.0, &self.ln_cross.backward(&cache.ln_cross, &da)?)?;

        let (da, _) = self.temporal.backward(&cache.temporal, &dh, &groups.temporal)?;
        if self.temporal_pos.requires_grad {
            let d = da.last_dim();
            let g = self.temporal_pos.grad.data_mut();
            for (row, src) in da.data().chunks(d).enumerate() {
                let t = groups.layout.frame_of(row);
                g[t * d..(t + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        dh.axpy(1.0, &self.ln_temporal.backward(&cache.ln_temporal, &da)?)?;

        let (da, _) = self.spatial.backward(&cache.spatial, &dh, &groups.spatial)?;
        dh.axpy(1.0, &self.ln_spatial.backward(&cache.ln_spatial, &da)?)?;
        Ok(BlockGrads {
            dx: dh,
            dkv: dkv.expect("cross attention"),
            dtext,
            dinstance,
        })
    }
}

pub(crate) fn add_frame_codes(a: &mut Tensor, codes: &Tensor, layout: &TokenLayout) -> Result<()> {
    let d = a.last_dim();
    if layout.dims.frames > codes.rows() {
        return Err(invalid(format!("{} frames exceed the {} learned temporal positions", layout.dims.frames, codes.rows())));
    }
    for (row, dst) in a.data_mut().chunks_mut(d).enumerate() {
        let t = layout.frame_of(row);
        dst.iter_mut().zip(codes.row(t)).for_each(|(x, p)| *x += p);
    }
    Ok(())
}

impl Params for Block {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.ln_spatial.visit(f);
        self.spatial.visit(f);
        self.ln_temporal.visit(f);
        f(&self.temporal_pos);
        self.temporal.visit(f);
        self.ln_cross.visit(f);
        self.cross.visit(f);
        self.ln_mlp.visit(f);
        self.mlp.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.ln_spatial.visit_mut(f);
        self.spatial.visit_mut(f);
        self.ln_temporal.visit_mut(f);
        f(&mut self.temporal_pos);
        self.temporal.visit_mut(f);
        self.ln_cross.visit_mut(f);
        self.cross.visit_mut(f);
        self.ln_mlp.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

/// One SketchFormer cell: per-view spatial attention (no view inflation) and
/// an MLP, followed by a zero-initialized projection into the main stream.
#[derive(Clone, Debug)]
pub struct SketchCell {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    pub out: crate::nn::Linear,
}

#[derive(Clone, Debug)]
pub struct CellCache {
    ln_attn: LnCache,
    attn: MhaCache,
    ln_mlp: LnCache,
    mlp: MlpCache,
}

impl SketchCell {
    pub fn new(name: &str, d: usize, heads: usize, hidden: usize, rng: &mut Stream) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(&format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, heads, rng)?,
            ln_mlp: LayerNorm::new(&format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(&format!("{name}.mlp"), d, hidden, d, rng),
            out: crate::nn::Linear::zeros(&format!("{name}.out"), d, d),
        })
    }

    /// Updates the sketch stream `u -> c`.
    pub fn forward(&self, u: &Tensor, groups: &Groups) -> Result<(Tensor, CellCache)> {
        let (a, ln_attn) = self.ln_attn.forward(u)?;
        let (s, attn) = self.attn.forward(&a, None, &groups.per_view)?;
        let mut c = u.add(&s)?;
        let (a, ln_mlp) = self.ln_mlp.forward(&c)?;
        let (m, mlp) = self.mlp.forward(&a)?;
        c.axpy(1.0, &m)?;
        Ok((
            c,
            CellCache {
                ln_attn,
                attn,
                ln_mlp,
                mlp,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CellCache, dc: &Tensor, groups: &Groups) -> Result<Tensor> {
        let mut du = dc.clone();
        let da = self.mlp.backward(&cache.mlp, dc)?;
        du.axpy(1.0, &self.ln_mlp.backward(&cache.ln_mlp, &da)?)?;
        let (da, _) = self.attn.backward(&cache.attn, &du, &groups.per_view)?;
        du.axpy(1.0, &self.ln_attn.backward(&cache.ln_attn, &da)?)?;
        Ok(du)
    }
}

impl Params for SketchCell {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.ln_attn.visit(f);
        self.attn.visit(f);
        self.ln_mlp.visit(f);
        self.mlp.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.ln_attn.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln_mlp.visit_mut(f);
        self.mlp.visit_mut(f);
        self.out.visit_mut(f);
    }
}
