//! Finite-difference gradient suite over every differentiable operation,
//! plus the small fixtures it runs on.

use crate::backbone::{
    cross_attention_block, cross_attention_block_backward, temporal_attention, temporal_attention_backward, Block, Denoiser, Groups,
    SketchCell, TokenLayout,
};
use crate::conditions::ConditionSet;
use crate::error::Result;
use crate::latent::{GridDims, LatentGrid};
use crate::mad::BranchParams;
use crate::nn::{
    attention_core, attention_core_backward, fourier_features, fourier_features_backward, grad_check, grad_check_report, layer_norm,
    layer_norm_backward, linear, linear_backward, silu, silu_backward, AttnGroup, FnOp, Mlp, MultiHeadAttention,
};
use crate::rng;
use crate::tensor::Tensor;

pub mod fixtures {
    use crate::backbone::BackboneConfig;
    use crate::conditions::{CameraSpec, InstanceSpec, RoadSketch, SceneSpec, ViewBox, CAPTIONS};
    use crate::latent::{GridDims, LatentGrid};
    use crate::rng::{self, Stream};
    use crate::tensor::{Params, Tensor};

    pub fn tiny_config(views: usize, frames: usize) -> BackboneConfig {
        BackboneConfig {
            views,
            max_frames: frames,
            channels: 2,
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            sketch_cells: 1,
            patch: 2,
            mlp_hidden: 8,
            text_tokens: 2,
            bands: 2,
            view_inflation: true,
        }
    }

    pub fn camera(view: usize) -> CameraSpec {
        let yaw = 0.9 * (view as f64 - 1.0);
        let (s, c) = yaw.sin_cos();
        CameraSpec {
            k: [[1.2, 0.0, 0.5], [0.0, 1.2, 0.5], [0.0, 0.0, 1.0]],
            rot: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            t: [0.1 * view as f64, -1.5, 0.0],
        }
    }

    pub fn scene(views: usize, n_ins: usize, label: usize) -> SceneSpec {
        SceneSpec {
            label,
            instances: (0..n_ins)
                .map(|i| InstanceSpec {
                    boxes: (0..views)
                        .map(|v| {
                            Some(ViewBox {
                                rect: [0.1 + 0.2 * i as f64, 0.3 + 0.05 * v as f64, 0.3, 0.25],
                                motion: [0.03, 0.0],
                            })
                        })
                        .collect(),
                    angle: 0.4 * i as f64,
                    caption: i % CAPTIONS,
                })
                .collect(),
            cameras: (0..views).map(camera).collect(),
            road: RoadSketch {
                views: vec![vec![vec![[0.0, 0.9], [0.5, 0.5], [1.0, 0.7]]]; views],
            },
        }
    }

    /// Replaces every parameter with random values so that zero-initialized
    /// projections become non-trivial.
    pub fn randomize(p: &mut dyn Params, rng: &mut Stream, scale: f64) {
        p.visit_mut(&mut |param| {
            param.value = rng::normal_tensor(rng, param.value.shape()).scale(scale);
            if param.name.ends_with(".gamma") {
                param.value = param.value.map(|g| 1.0 + g);
            }
        });
    }

    pub fn latent(dims: GridDims, seed: u64) -> LatentGrid {
        LatentGrid::new(rng::normal_tensor(&mut rng::substream(seed, 0, "test-latent"), &dims.shape())).unwrap()
    }

    pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
        rng::normal_tensor(&mut rng::substream(seed, 1, "test-tensor"), shape)
    }
}

use fixtures::{latent, randomize, scene, tensor, tiny_config};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error of one operation over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub seeds: u64,
    pub worst: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

type Check = fn(u64) -> Result<f64>;

fn check_linear(seed: u64) -> Result<f64> {
    let mut op = FnOp::new(
        |i: &[Tensor]| linear(&i[0], &i[1], &i[2]),
        |i: &[Tensor], dy: &Tensor| {
            let (dx, p) = linear_backward(&i[0], &i[1], dy, true)?;
            let (dw, db) = p.expect("parameter gradients");
            Ok(vec![dx, dw, db])
        },
    );
    grad_check(&mut op, &[tensor(&[5, 4], seed), tensor(&[4, 3], seed + 1000), tensor(&[3], seed + 2000)], STEP)
}

fn check_silu(seed: u64) -> Result<f64> {
    let mut op = FnOp::new(|i: &[Tensor]| Ok(silu(&i[0])), |i: &[Tensor], dy: &Tensor| Ok(vec![silu_backward(&i[0], dy)]));
    grad_check(&mut op, &[tensor(&[6, 5], seed).scale(2.0)], STEP)
}

fn check_layer_norm(seed: u64) -> Result<f64> {
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(layer_norm(&i[0], &i[1], &i[2], 1e-5)?.0),
        |i: &[Tensor], dy: &Tensor| {
            let (_, cache) = layer_norm(&i[0], &i[1], &i[2], 1e-5)?;
            let (dx, dg, db) = layer_norm_backward(&cache, &i[1], dy)?;
            Ok(vec![dx, dg, db])
        },
    );
    let gamma = tensor(&[6], seed + 1).map(|g| 1.0 + 0.3 * g);
    grad_check(&mut op, &[tensor(&[4, 6], seed), gamma, tensor(&[6], seed + 2)], STEP)
}

fn check_attention_core(seed: u64) -> Result<f64> {
    let mut op = FnOp::new(
        |i: &[Tensor]| attention_core(&i[0], &i[1], &i[2]),
        |i: &[Tensor], dy: &Tensor| {
            let (dq, dk, dv) = attention_core_backward(&i[0], &i[1], &i[2], dy)?;
            Ok(vec![dq, dk, dv])
        },
    );
    grad_check(&mut op, &[tensor(&[4, 3], seed), tensor(&[5, 3], seed + 1), tensor(&[5, 3], seed + 2)], STEP)
}

fn check_fourier(seed: u64) -> Result<f64> {
    let mut op = FnOp::new(
        |i: &[Tensor]| fourier_features(&i[0], 3),
        |i: &[Tensor], dy: &Tensor| Ok(vec![fourier_features_backward(&i[0], 3, dy)?]),
    );
    grad_check(&mut op, &[tensor(&[4, 2], seed).scale(0.5)], STEP)
}

fn check_mha(seed: u64) -> Result<f64> {
    let mha = MultiHeadAttention::with_kv_dim("a", 6, 4, 2, &mut rng::substream(seed, 0, "check-mha"))?;
    let mut m2 = mha.clone();
    let groups = vec![AttnGroup { queries: vec![0, 2, 4], keys: vec![0, 1, 2] }, AttnGroup { queries: vec![1, 3], keys: vec![2, 3] }];
    let g2 = groups.clone();
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(mha.forward(&i[0], Some(&i[1]), &groups)?.0),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = m2.forward(&i[0], Some(&i[1]), &g2)?;
            let (dq, dkv) = m2.backward(&c, dy, &g2)?;
            Ok(vec![dq, dkv.expect("cross")])
        },
    );
    grad_check(&mut op, &[tensor(&[5, 6], seed), tensor(&[4, 4], seed + 1)], STEP)
}

fn check_mlp(seed: u64) -> Result<f64> {
    let mlp = Mlp::new("m", 4, 7, 3, &mut rng::substream(seed, 0, "check-mlp"));
    let mut m2 = mlp.clone();
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(mlp.forward(&i[0])?.0),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = m2.forward(&i[0])?;
            Ok(vec![m2.backward(&c, dy)?])
        },
    );
    grad_check(&mut op, &[tensor(&[5, 4], seed)], STEP)
}

fn check_temporal(seed: u64) -> Result<f64> {
    let mha = MultiHeadAttention::new("a", 4, 2, &mut rng::substream(seed, 0, "check-temporal"))?;
    let mut m2 = mha.clone();
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(temporal_attention(&LatentGrid::new(i[0].clone())?, &mha, &i[1])?.0.into_tensor()),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = temporal_attention(&LatentGrid::new(i[0].clone())?, &m2, &i[1])?;
            let (dx, dp) = temporal_attention_backward(&mut m2, &c, &LatentGrid::new(dy.clone())?, 3)?;
            Ok(vec![dx.into_tensor(), dp])
        },
    );
    grad_check(&mut op, &[latent(GridDims::new(2, 3, 2, 2, 4), seed).into_tensor(), tensor(&[3, 4], seed)], STEP)
}

fn check_cross(seed: u64) -> Result<f64> {
    let mha = MultiHeadAttention::new("a", 4, 2, &mut rng::substream(seed, 0, "check-cross"))?;
    let mut m2 = mha.clone();
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(cross_attention_block(&LatentGrid::new(i[0].clone())?, &i[1], &mha)?.0.into_tensor()),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = cross_attention_block(&LatentGrid::new(i[0].clone())?, &i[1], &m2)?;
            let (dx, dc) = cross_attention_block_backward(&mut m2, &c, &LatentGrid::new(dy.clone())?, 3)?;
            Ok(vec![dx.into_tensor(), dc])
        },
    );
    grad_check(&mut op, &[latent(GridDims::new(2, 2, 2, 2, 4), seed).into_tensor(), tensor(&[3, 4], seed)], STEP)
}

fn block_groups() -> Groups {
    Groups::new(TokenLayout::new(GridDims::new(2, 2, 4, 4, 1), 2), true, 2, 1)
}

fn check_block(seed: u64) -> Result<f64> {
    let mut block = Block::new("b", 8, 2, 8, 2, &mut rng::substream(seed, 0, "check-block"))?;
    randomize(&mut block, &mut rng::substream(seed, 1, "check-block"), 0.4);
    let mut b2 = block.clone();
    let groups = block_groups();
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(block.forward(&i[0], &groups, &i[1], None)?.0),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = b2.forward(&i[0], &groups, &i[1], None)?;
            let g = b2.backward(&c, dy, &groups, None)?;
            Ok(vec![g.dx, g.dkv])
        },
    );
    grad_check(&mut op, &[tensor(&[16, 8], seed), tensor(&[2 * 4, 8], seed + 1)], STEP)
}

fn check_sketch_cell(seed: u64) -> Result<f64> {
    let mut cell = SketchCell::new("c", 8, 2, 8, &mut rng::substream(seed, 0, "check-cell"))?;
    randomize(&mut cell, &mut rng::substream(seed, 1, "check-cell"), 0.4);
    let mut c2 = cell.clone();
    let groups = block_groups();
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(cell.forward(&i[0], &groups)?.0),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = c2.forward(&i[0], &groups)?;
            Ok(vec![c2.backward(&c, dy, &groups)?])
        },
    );
    grad_check(&mut op, &[tensor(&[16, 8], seed)], STEP)
}

fn random_branches(seed: u64) -> Result<BranchParams> {
    let mut b = BranchParams::new(&tiny_config(2, 2), &mut rng::substream(seed, 0, "check-branch"))?;
    randomize(&mut b, &mut rng::substream(seed, 1, "check-branch"), 0.4);
    Ok(b)
}

fn check_cross_branch(seed: u64) -> Result<f64> {
    let b = random_branches(seed)?;
    let branch = b.text[0].clone();
    let mut b2 = branch.clone();
    let groups = vec![AttnGroup { queries: (0..5).collect(), keys: (0..3).collect() }];
    let omega = 1.0 + (seed % 8) as f64;
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(branch.forward(&i[0], &i[1], &groups, omega)?.0),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = b2.forward(&i[0], &i[1], &groups, omega)?;
            let (da, dkv) = b2.backward(&c, dy, &groups)?;
            Ok(vec![da, dkv])
        },
    );
    grad_check(&mut op, &[tensor(&[5, 8], seed), tensor(&[3, 8], seed + 1)], STEP)
}

fn check_sketch_branch(seed: u64) -> Result<f64> {
    let b = random_branches(seed)?;
    let branch = b.sketch[0].clone();
    let mut b2 = branch.clone();
    let omega = 1.0 + (seed % 8) as f64;
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(branch.forward(&i[0], omega)?.0),
        |i: &[Tensor], dy: &Tensor| {
            let (_, c) = b2.forward(&i[0], omega)?;
            Ok(vec![b2.backward(&c, dy)?])
        },
    );
    grad_check(&mut op, &[tensor(&[5, 8], seed)], STEP)
}

fn rebuild(cond: &ConditionSet, i: &[Tensor]) -> ConditionSet {
    let mut c = cond.clone();
    c.text = i[1].clone();
    c.instances = i[2].clone();
    c.camera = i[3].clone();
    c
}

/// Whole tiny denoiser with respect to the noisy input and every condition
/// token block, on two views with odd resolution.
fn check_denoiser(seed: u64) -> Result<f64> {
    let dims = GridDims::new(2, 2, 3, 4, 2);
    let mut model = Denoiser::seeded(tiny_config(2, 2), seed)?;
    randomize(&mut model, &mut rng::substream(seed, 0, "e2e"), 0.5);
    let cond = model.encoder.conditions(&scene(2, 2, 1))?;
    let m2 = model.clone();
    let c2 = cond.clone();
    let s = 0.37;
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(model.forward(&LatentGrid::new(i[0].clone())?, s, &rebuild(&cond, i))?.into_tensor()),
        |i: &[Tensor], dy: &Tensor| {
            let mut m = m2.clone();
            let c = rebuild(&c2, i);
            let (_, cache) = m.forward_cached(&LatentGrid::new(i[0].clone())?, s, &c, None)?;
            let g = m.backward(&cache, &c, &LatentGrid::new(dy.clone())?, None)?;
            Ok(vec![g.dx.into_tensor(), g.dcond.text, g.dcond.instances, g.dcond.camera])
        },
    );
    let inputs = [latent(dims, seed).into_tensor(), c2.text.clone(), c2.instances.clone(), c2.camera.clone()];
    Ok(grad_check_report(&mut op, &inputs, STEP)?.max)
}

pub const CASES: [(&str, Check); 14] = [
    ("linear", check_linear),
    ("silu", check_silu),
    ("layer_norm", check_layer_norm),
    ("attention_core", check_attention_core),
    ("fourier_features", check_fourier),
    ("multi_head_attention", check_mha),
    ("mlp", check_mlp),
    ("temporal_attention", check_temporal),
    ("cross_attention", check_cross),
    ("transformer_block", check_block),
    ("sketch_cell", check_sketch_cell),
    ("mad_cross_branch", check_cross_branch),
    ("mad_sketch_branch", check_sketch_branch),
    ("denoiser_end_to_end", check_denoiser),
];

/// Runs every case over seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<GradCase>> {
    CASES
        .iter()
        .map(|&(name, check)| {
            let worst = (0..seeds).map(check).try_fold(0.0f64, |a, e| e.map(|e| a.max(e)))?;
            Ok(GradCase { name, seeds, worst })
        })
        .collect()
}
