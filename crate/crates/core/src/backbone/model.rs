use crate::conditions::{CondGrads, ConditionEncoder, ConditionSet, SketchRaster};
use crate::error::{invalid, Error, Result};
use crate::latent::LatentGrid;
use crate::mad::{BranchInput, BranchParams, CrossBranch, ModCache, SketchBranchCache};
use crate::nn::{fourier_features, LayerNorm, LnCache, Linear, Mlp, MlpCache};
use crate::rng::{self, Stream};
use crate::tensor::{Params, Parameter, Tensor};

use super::block::{Block, BlockAux, BlockAuxMut, BlockCache, CellCache, Groups, SketchCell};
use super::config::BackboneConfig;
use super::tokens::{add_positional, patchify, positional_codes, unpatchify, TokenLayout};

/// The velocity network `v_θ(x_s, s, L, I, R)` together with its condition
/// encoders.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: BackboneConfig,
    pub encoder: ConditionEncoder,
    pub patch_embed: Linear,
    pub noise_mlp: Mlp,
    pub blocks: Vec<Block>,
    pub cells: Vec<SketchCell>,
    pub head_ln: LayerNorm,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    groups: Groups,
    x_tokens: Tensor,
    noise: MlpCache,
    sketch_tokens: Tensor,
    kv: Tensor,
    blocks: Vec<BlockCache>,
    cell_outputs: Vec<Tensor>,
    cells: Vec<CellCache>,
    sketch_branches: Vec<Option<SketchBranchCache>>,
    head_ln: LnCache,
    head_act: Tensor,
    head_in: Tensor,
    outputs: Vec<(usize, ModCache)>,
}

/// Input gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Backprop {
    pub dx: LatentGrid,
    pub dcond: CondGrads,
}

impl Denoiser {
    pub fn new(cfg: BackboneConfig, rng: &mut Stream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let encoder = ConditionEncoder::new(cfg.encoder(), rng);
        let patch_embed = Linear::new("patch_embed", cfg.patch_dim(), d, rng);
        let noise_mlp = Mlp::new("noise", 2 * cfg.bands, d, d, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|b| Block::new(&format!("block{b}"), d, cfg.n_heads, cfg.mlp_hidden, cfg.max_frames, rng))
            .collect::<Result<Vec<_>>>()?;
        let cells = (0..cfg.sketch_cells)
            .map(|k| SketchCell::new(&format!("sketch{k}"), d, cfg.n_heads, cfg.mlp_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            head_ln: LayerNorm::new("head_ln", d),
            head: Linear::new("head", d, cfg.patch_dim(), rng),
            cfg,
            encoder,
            patch_embed,
            noise_mlp,
            blocks,
            cells,
        })
    }

    pub fn seeded(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut rng::substream(seed, 0, "model-init"))
    }

    /// Sketch tokens before the first cell: the raster replicated across
    /// channels and embedded by the shared patch embedder.
    fn sketch_embed(&self, raster: &SketchRaster, layout: &TokenLayout) -> Result<(Tensor, Tensor)> {
        let c = self.cfg.channels;
        let r = &raster.tensor;
        let data: Vec<f64> = r.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
        let dims = layout.dims;
        let grid = LatentGrid::from_vec(dims, data)?;
        let (tokens, _) = patchify(&grid, self.cfg.patch);
        let mut emb = self.patch_embed.forward(&tokens)?;
        add_positional(&mut emb, &positional_codes(layout, self.cfg.d_model));
        Ok((emb, tokens))
    }

    fn check_inputs(&self, x: &LatentGrid, s: f64, cond: &ConditionSet) -> Result<()> {
        let d = x.dims();
        if d.channels != self.cfg.channels || d.views != self.cfg.views {
            return Err(Error::Shape {
                op: "denoiser_forward",
                left: vec![self.cfg.views, self.cfg.max_frames, 0, 0, self.cfg.channels],
                right: d.shape().to_vec(),
            });
        }
        if d.frames > self.cfg.max_frames {
            return Err(invalid(format!("{} frames exceed max_frames {}", d.frames, self.cfg.max_frames)));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(invalid(format!("noise level {s} outside [0, 1]")));
        }
        if cond.views() != d.views || cond.d_model() != self.cfg.d_model {
            return Err(invalid("condition set does not match the model"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &LatentGrid, s: f64, cond: &ConditionSet) -> Result<LatentGrid> {
        Ok(self.forward_cached(x, s, cond, None)?.0)
    }

    /// Forward pass that also returns the activations needed by
    /// [`backward`](Self::backward). `aux` switches on auxiliary branches.
    pub fn forward_cached(
        &self,
        x: &LatentGrid,
        s: f64,
        cond: &ConditionSet,
        aux: Option<&BranchInput>,
    ) -> Result<(LatentGrid, ForwardCache)> {
        self.check_inputs(x, s, cond)?;
        let cfg = &self.cfg;
        let (x_tokens, layout) = patchify(x, cfg.patch);
        let groups = Groups::new(layout, cfg.view_inflation, cond.text.rows(), cond.instances.rows());
        let codes = positional_codes(&layout, cfg.d_model);

        let noise_feat = fourier_features(&Tensor::filled(&[1, 1], s), cfg.bands)?.reshape(&[1, 2 * cfg.bands])?;
        let (noise_emb, noise) = self.noise_mlp.forward(&noise_feat)?;
        let mut h = self.patch_embed.forward(&x_tokens)?;
        add_positional(&mut h, &codes);
        add_positional(&mut h, &noise_emb);

        let raster = cond.sketch_raster(x.dims().frames, x.dims().height, x.dims().width);
        let (mut c, sketch_tokens) = self.sketch_embed(&raster, &layout)?;
        let kv = cond.stacked()?;

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut cell_outputs = Vec::with_capacity(cfg.sketch_cells);
        let mut cells = Vec::with_capacity(cfg.sketch_cells);
        let mut sketch_branches = Vec::with_capacity(cfg.sketch_cells);
        for (k, block) in self.blocks.iter().enumerate() {
            if k < cfg.sketch_cells {
                let (c_next, cc) = self.cells[k].forward(&c.add(&h)?, &groups)?;
                c = c_next;
                cells.push(cc);
            }
            let block_aux = aux.map(|a| BlockAux {
                text: pick(a.active.text, &a.params.text, k, a.scales.text),
                instance: pick(a.active.instance, &a.params.instance, k, a.scales.instance),
                text_kv: &cond.text,
                instance_kv: &cond.instances,
            });
            let (h_next, bc) = block.forward(&h, &groups, &kv, block_aux.as_ref())?;
            h = h_next;
            blocks.push(bc);
            if k < cfg.sketch_cells {
                h.axpy(1.0, &self.cells[k].out.forward(&c)?)?;
                let mut branch_cache = None;
                if let Some(a) = aux.filter(|a| a.active.sketch) {
                    let (r, bc) = a.params.sketch[k].forward(&c, a.scales.sketch)?;
                    h.axpy(1.0, &r)?;
                    branch_cache = Some(bc);
                }
                sketch_branches.push(branch_cache);
                cell_outputs.push(c.clone());
            }
        }

        let (head_act, head_ln) = self.head_ln.forward(&h)?;
        let mut head_in = head_act.clone();
        let mut outputs = Vec::new();
        if let Some(a) = aux {
            for (i, omega) in a.outputs() {
                let (r, mc) = a.params.output[i].forward(&head_act, omega)?;
                head_in.axpy(1.0, &r)?;
                outputs.push((i, mc));
            }
        }
        let out = self.head.forward(&head_in)?;
        let v = unpatchify(&out, &layout)?;
        v.tensor().ensure_finite("denoiser_forward")?;
        Ok((
            v,
            ForwardCache {
                groups,
                x_tokens,
                noise,
                sketch_tokens,
                kv,
                blocks,
                cell_outputs,
                cells,
                sketch_branches,
                head_ln,
                head_act,
                head_in,
                outputs,
            },
        ))
    }

    /// Accumulates parameter gradients for `Σ dv ⊙ v` into the model (and
    /// into `branches` for the branches active in the forward pass) and
    /// returns the input gradients.
    pub fn backward(&mut self, cache: &ForwardCache, cond: &ConditionSet, dv: &LatentGrid, mut branches: Option<&mut BranchParams>) -> Result<Backprop> {
        let cfg = self.cfg.clone();
        let groups = &cache.groups;
        let (dout, _) = patchify(dv, cfg.patch);
        let dhead = self.head.backward(&cache.head_in, &dout)?;
        let mut dact = dhead.clone();
        if let Some(b) = branches.as_deref_mut() {
            for (i, mc) in &cache.outputs {
                dact.axpy(1.0, &b.output[*i].backward(&cache.head_act, mc, &dhead)?)?;
            }
        }
        let mut dh = self.head_ln.backward(&cache.head_ln, &dact)?;

        let mut dkv = Tensor::zeros(cache.kv.shape());
        let mut dtext = Tensor::zeros(cond.text.shape());
        let mut dinst = Tensor::zeros(cond.instances.shape());
        let mut dc = Tensor::zeros(dh.shape());
        for k in (0..cfg.n_blocks).rev() {
            if k < cfg.sketch_cells {
                let c = &cache.cell_outputs[k];
                dc.axpy(1.0, &self.cells[k].out.backward(c, &dh)?)?;
                if let (Some(bc), Some(b)) = (&cache.sketch_branches[k], branches.as_deref_mut()) {
                    dc.axpy(1.0, &b.sketch[k].backward(bc, &dh)?)?;
                }
            }
            let aux = branches.as_deref_mut().map(|b| BlockAuxMut {
                text: b.text.get_mut(k),
                instance: b.instance.get_mut(k),
            });
            let g = self.blocks[k].backward(&cache.blocks[k], &dh, groups, aux)?;
            dh = g.dx;
            dkv.axpy(1.0, &g.dkv)?;
            if let Some(t) = g.dtext {
                dtext.axpy(1.0, &t)?;
            }
            if let Some(t) = g.dinstance {
                dinst.axpy(1.0, &t)?;
            }
            if k < cfg.sketch_cells {
                let du = self.cells[k].backward(&cache.cells[k], &dc, groups)?;
                dh.axpy(1.0, &du)?;
                dc = du;
            }
        }

        self.patch_embed.backward(&cache.sketch_tokens, &dc)?;
        let d = cfg.d_model;
        let mut dnoise = vec![0.0; d];
        for row in dh.data().chunks(d) {
            dnoise.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        self.noise_mlp.backward(&cache.noise, &Tensor::new(vec![1, d], dnoise)?)?;
        let dtok = self.patch_embed.backward(&cache.x_tokens, &dh)?;
        let dx = unpatchify(&dtok, &groups.layout)?;

        let mut dcond = cond.split_stacked_grad(&dkv)?;
        dcond.text.axpy(1.0, &dtext)?;
        dcond.instances.axpy(1.0, &dinst)?;
        Ok(Backprop { dx, dcond })
    }

    /// Residuals the SketchFormer adds to the first `sketch_cells` blocks.
    pub fn sketchformer_forward(&self, x: &LatentGrid, s: f64, cond: &ConditionSet) -> Result<Vec<Tensor>> {
        let (_, cache) = self.forward_cached(x, s, cond, None)?;
        cache.cell_outputs.iter().zip(&self.cells).map(|(c, cell)| cell.out.forward(c)).collect()
    }

    /// All parameters except the condition encoder.
    pub fn visit_network(&self, f: &mut dyn FnMut(&Parameter)) {
        self.patch_embed.visit(f);
        self.noise_mlp.visit(f);
        self.blocks.visit(f);
        self.cells.visit(f);
        self.head_ln.visit(f);
        self.head.visit(f);
    }
}

fn pick(on: bool, list: &[CrossBranch], k: usize, omega: f64) -> Option<(&CrossBranch, f64)> {
    if on {
        list.get(k).map(|b| (b, omega))
    } else {
        None
    }
}

impl Params for Denoiser {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.visit_network(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.patch_embed.visit_mut(f);
        self.noise_mlp.visit_mut(f);
        self.blocks.visit_mut(f);
        self.cells.visit_mut(f);
        self.head_ln.visit_mut(f);
        self.head.visit_mut(f);
    }
}
