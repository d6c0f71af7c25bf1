use super::*;
use crate::conditions::{nullify, CondGrads, ConditionSet, NullMask, RoadSketch};
use crate::latent::{GridDims, LatentGrid};
use crate::nn::gradcheck::{grad_check, FnOp};
use crate::nn::MultiHeadAttention;
use crate::rng;
use crate::tensor::{Params, Tensor};
use crate::testutil::{latent, randomize, scene, tensor, tiny_config};

/// Per-head softmax attention over explicit row lists, by double loops.
fn brute_force(mha: &MultiHeadAttention, x: &Tensor, groups: &[Vec<usize>]) -> Tensor {
    let q = mha.wq.forward(x).unwrap();
    let k = mha.wk.forward(x).unwrap();
    let v = mha.wv.forward(x).unwrap();
    let d = q.last_dim();
    let w = d / mha.heads;
    let mut ctx = Tensor::zeros(&[x.rows(), d]);
    for rows in groups {
        for h in 0..mha.heads {
            let cols = h * w..(h + 1) * w;
            for &a in rows {
                let scores: Vec<f64> = rows
                    .iter()
                    .map(|&b| cols.clone().map(|c| q.row(a)[c] * k.row(b)[c]).sum::<f64>() / (w as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    ctx.row_mut(a)[c] = rows.iter().zip(&e).map(|(&b, p)| p / z * v.row(b)[c]).sum();
                }
            }
        }
    }
    mha.wo.forward(&ctx).unwrap()
}

fn grid_tokens(x: &LatentGrid) -> Tensor {
    let d = x.dims();
    x.tensor().clone().reshape(&[d.len() / d.channels, d.channels]).unwrap()
}

#[test]
fn view_inflated_attention_matches_brute_force_on_toy_shapes() {
    let mut r = rng::substream(0, 0, "vi");
    let mha = MultiHeadAttention::new("a", 8, 2, &mut r).unwrap();
    for (h, w) in [(4, 7), (6, 11), (8, 14)] {
        let dims = GridDims::new(3, 4, h, w, 8);
        let x = latent(dims, (h * w) as u64);
        let out = view_inflated_spatial_attention(&x, &mha).unwrap();
        let frames: Vec<Vec<usize>> = (0..4)
            .map(|t| (0..3).flat_map(|v| (0..h * w).map(move |c| (v * 4 + t) * h * w + c)).collect())
            .collect();
        let expect = brute_force(&mha, &grid_tokens(&x), &frames);
        assert!(grid_tokens(&out).max_abs_diff(&expect) <= 1e-10);
    }
}

#[test]
fn single_view_inflation_is_plain_spatial_attention() {
    let mut r = rng::substream(1, 0, "vi");
    let mha = MultiHeadAttention::new("a", 8, 2, &mut r).unwrap();
    let x = latent(GridDims::new(1, 4, 4, 7, 8), 3);
    assert_eq!(view_inflated_spatial_attention(&x, &mha).unwrap(), spatial_attention(&x, &mha).unwrap());
}

#[test]
fn permuting_views_permutes_output() {
    let mut r = rng::substream(2, 0, "vi");
    let mha = MultiHeadAttention::new("a", 8, 2, &mut r).unwrap();
    let dims = GridDims::new(3, 2, 3, 4, 8);
    let x = latent(dims, 4);
    let perm = [2, 0, 1];
    let mut px = LatentGrid::zeros(dims);
    for (dst, &src) in perm.iter().enumerate() {
        for t in 0..2 {
            px.image_mut(dst, t).copy_from_slice(x.image(src, t));
        }
    }
    let out = view_inflated_spatial_attention(&x, &mha).unwrap();
    let pout = view_inflated_spatial_attention(&px, &mha).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for t in 0..2 {
            let diff = pout.image(dst, t).iter().zip(out.image(src, t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }
}

#[test]
fn temporal_attention_single_frame_is_value_path() {
    let mut r = rng::substream(3, 0, "ta");
    let mha = MultiHeadAttention::new("a", 8, 2, &mut r).unwrap();
    let pos = tensor(&[4, 8], 1);
    let x = latent(GridDims::new(2, 1, 3, 3, 8), 5);
    let (out, _) = temporal_attention(&x, &mha, &pos).unwrap();
    let mut a = grid_tokens(&x);
    for row in 0..a.rows() {
        let p = pos.row(0).to_vec();
        a.row_mut(row).iter_mut().zip(&p).for_each(|(x, p)| *x += p);
    }
    let expect = grid_tokens(&x).add(&mha.wo.forward(&mha.wv.forward(&a).unwrap()).unwrap()).unwrap();
    assert!(grid_tokens(&out).max_abs_diff(&expect) < 1e-12);
    let (out4, _) = temporal_attention(&latent(GridDims::new(2, 4, 3, 3, 8), 6), &mha, &pos).unwrap();
    assert_eq!(out4.dims(), GridDims::new(2, 4, 3, 3, 8));
}

#[test]
fn temporal_attention_gradients() {
    for seed in 0..20 {
        let mut r = rng::substream(seed, 0, "ta-fd");
        let mha = MultiHeadAttention::new("a", 4, 2, &mut r).unwrap();
        let dims = GridDims::new(2, 3, 2, 2, 4);
        let mut m2 = mha.clone();
        let mut op = FnOp::new(
            |i: &[Tensor]| Ok(temporal_attention(&LatentGrid::new(i[0].clone())?, &mha, &i[1])?.0.into_tensor()),
            |i: &[Tensor], dy: &Tensor| {
                let (_, c) = temporal_attention(&LatentGrid::new(i[0].clone())?, &m2, &i[1])?;
                let (dx, dp) = temporal_attention_backward(&mut m2, &c, &LatentGrid::new(dy.clone())?, 3)?;
                Ok(vec![dx.into_tensor(), dp])
            },
        );
        let err = grad_check(&mut op, &[latent(dims, seed).into_tensor(), tensor(&[3, 4], seed)], 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn cross_attention_zero_projection_is_identity() {
    let mut r = rng::substream(4, 0, "ca");
    let mha = MultiHeadAttention::new("a", 8, 2, &mut r).unwrap().zero_output();
    let x = latent(GridDims::new(3, 2, 2, 3, 8), 7);
    let (out, _) = cross_attention_block(&x, &tensor(&[5, 8], 2), &mha).unwrap();
    assert_eq!(out, x);
}

#[test]
fn cross_attention_invariant_to_duplicated_keys() {
    let mut r = rng::substream(5, 0, "ca");
    let mha = MultiHeadAttention::new("a", 8, 2, &mut r).unwrap();
    let x = latent(GridDims::new(2, 2, 2, 3, 8), 8);
    let c = tensor(&[5, 8], 3);
    let doubled = Tensor::concat_rows(&[&c, &c]).unwrap();
    let (a, _) = cross_attention_block(&x, &c, &mha).unwrap();
    let (b, _) = cross_attention_block(&x, &doubled, &mha).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-12);
    assert!(cross_attention_block(&x, &tensor(&[5, 7], 3), &mha).is_err());
}

#[test]
fn cross_attention_gradients() {
    for seed in 0..20 {
        let mut r = rng::substream(seed, 0, "ca-fd");
        let mha = MultiHeadAttention::new("a", 4, 2, &mut r).unwrap();
        let dims = GridDims::new(2, 2, 2, 2, 4);
        let mut m2 = mha.clone();
        let mut op = FnOp::new(
            |i: &[Tensor]| Ok(cross_attention_block(&LatentGrid::new(i[0].clone())?, &i[1], &mha)?.0.into_tensor()),
            |i: &[Tensor], dy: &Tensor| {
                let (_, c) = cross_attention_block(&LatentGrid::new(i[0].clone())?, &i[1], &m2)?;
                let (dx, dc) = cross_attention_block_backward(&mut m2, &c, &LatentGrid::new(dy.clone())?, 3)?;
                Ok(vec![dx.into_tensor(), dc])
            },
        );
        let err = grad_check(&mut op, &[latent(dims, seed).into_tensor(), tensor(&[3, 4], seed)], 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

fn default_model() -> Denoiser {
    Denoiser::seeded(BackboneConfig::default(), 0).unwrap()
}

#[test]
fn output_shape_matches_every_bucket() {
    let model = default_model();
    let cond = model.encoder.conditions(&scene(3, 2, 1)).unwrap();
    for (h, w) in [(8, 14), (12, 21), (16, 28)] {
        let dims = GridDims::new(3, 4, h, w, 4);
        let x = latent(dims, 1);
        let v = model.forward(&x, 0.5, &cond).unwrap();
        assert_eq!(v.dims(), dims);
        if h == 8 {
            assert_eq!(v, model.forward(&x, 0.5, &cond).unwrap());
        }
    }
}

#[test]
fn untrained_sketch_path_has_no_effect() {
    let model = default_model();
    let cond = model.encoder.conditions(&scene(3, 1, 0)).unwrap();
    let x = latent(GridDims::new(3, 4, 8, 14, 4), 2);
    let with = model.forward(&x, 0.3, &cond).unwrap();
    let without = model.forward(&x, 0.3, &nullify(&cond, NullMask::new(false, false, true))).unwrap();
    assert_eq!(with, without);
    let mut empty = cond.clone();
    empty.road = RoadSketch::empty(3);
    assert_eq!(model.forward(&x, 0.3, &empty).unwrap(), without);
    let res = model.sketchformer_forward(&x, 0.3, &cond).unwrap();
    assert_eq!(res.len(), model.cfg.sketch_cells);
    assert!(res.iter().all(|r| r.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn trained_sketch_path_does_affect_output() {
    let mut model = default_model();
    let mut r = rng::substream(1, 0, "sk");
    randomize(&mut model.cells, &mut r, 0.3);
    let cond = model.encoder.conditions(&scene(3, 1, 0)).unwrap();
    let x = latent(GridDims::new(3, 2, 8, 14, 4), 2);
    let a = model.forward(&x, 0.3, &cond).unwrap();
    let b = model.forward(&x, 0.3, &nullify(&cond, NullMask::new(false, false, true))).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) > 1e-6);
}

#[test]
fn rejects_bad_inputs() {
    let model = default_model();
    let cond = model.encoder.conditions(&scene(3, 0, 0)).unwrap();
    assert!(model.forward(&latent(GridDims::new(3, 5, 8, 14, 4), 0), 0.5, &cond).is_err());
    assert!(model.forward(&latent(GridDims::new(3, 4, 8, 14, 3), 0), 0.5, &cond).is_err());
    assert!(model.forward(&latent(GridDims::new(3, 4, 8, 14, 4), 0), 1.5, &cond).is_err());
}

fn rebuild(cond: &ConditionSet, i: &[Tensor]) -> ConditionSet {
    let mut c = cond.clone();
    c.text = i[1].clone();
    c.instances = i[2].clone();
    c.camera = i[3].clone();
    c
}

/// Max relative error over `x`, text and instance tokens, plus camera tokens
/// when `with_camera` is set. With a single view and token the camera
/// gradient is tiny and the finite difference is dominated by rounding.
fn end_to_end_check(dims: GridDims, seed: u64, n_ins: usize, with_camera: bool) -> f64 {
    let mut cfg = tiny_config(dims.views, dims.frames);
    cfg.channels = dims.channels;
    let mut model = Denoiser::seeded(cfg, seed).unwrap();
    randomize(&mut model, &mut rng::substream(seed, 0, "e2e"), 0.5);
    let cond = model.encoder.conditions(&scene(dims.views, n_ins, 1)).unwrap();
    let x = latent(dims, seed);
    let s = 0.37;
    let m2 = model.clone();
    let c2 = cond.clone();
    let mut op = FnOp::new(
        |i: &[Tensor]| Ok(model.forward(&LatentGrid::new(i[0].clone())?, s, &rebuild(&cond, i))?.into_tensor()),
        |i: &[Tensor], dy: &Tensor| {
            let mut m = m2.clone();
            let c = rebuild(&c2, i);
            let (_, cache) = m.forward_cached(&LatentGrid::new(i[0].clone())?, s, &c, None)?;
            let g = m.backward(&cache, &c, &LatentGrid::new(dy.clone())?, None)?;
            let CondGrads { text, instances, camera } = g.dcond;
            Ok(vec![g.dx.into_tensor(), text, instances, camera])
        },
    );
    let inputs = [x.into_tensor(), c2.text.clone(), c2.instances.clone(), c2.camera.clone()];
    let r = crate::nn::grad_check_report(&mut op, &inputs, 1e-5).unwrap();
    if with_camera {
        r.max
    } else {
        r.per_input[..3].iter().cloned().fold(0.0, f64::max)
    }
}

#[test]
fn end_to_end_input_gradients_tiny() {
    for seed in 0..20 {
        let err = end_to_end_check(GridDims::new(1, 1, 2, 2, 2), seed, 1, false);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn end_to_end_input_gradients_multi_view_padded() {
    for seed in 0..20 {
        let err = end_to_end_check(GridDims::new(2, 2, 3, 4, 2), seed, 2, true);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn end_to_end_parameter_gradients() {
    let dims = GridDims::new(2, 2, 3, 4, 2);
    for seed in 0..20 {
        let mut base = Denoiser::seeded(tiny_config(2, 2), seed).unwrap();
        randomize(&mut base, &mut rng::substream(seed, 0, "e2e-p"), 0.5);
        let cond = base.encoder.conditions(&scene(2, 1, 2)).unwrap();
        let x = latent(dims, seed);
        let names = [
            "patch_embed.weight",
            "noise.fc1.weight",
            "block0.spatial.q.weight",
            "block0.temporal_pos",
            "block0.cross.k.weight",
            "block0.ln_mlp.gamma",
            "sketch0.attn.v.weight",
            "sketch0.out.weight",
            "head.weight",
        ];
        let set = |m: &mut Denoiser, w: &[Tensor]| {
            m.visit_mut(&mut |p| {
                if let Some(i) = names.iter().position(|n| *n == p.name) {
                    p.value = w[i].clone();
                }
            })
        };
        let mut inputs = vec![Tensor::zeros(&[0]); names.len()];
        base.visit(&mut |p| {
            if let Some(i) = names.iter().position(|n| *n == p.name) {
                inputs[i] = p.value.clone();
            }
        });
        let mut op = FnOp::new(
            |w: &[Tensor]| {
                let mut m = base.clone();
                set(&mut m, w);
                Ok(m.forward(&x, 0.6, &cond)?.into_tensor())
            },
            |w: &[Tensor], dy: &Tensor| {
                let mut m = base.clone();
                set(&mut m, w);
                m.zero_grad();
                let (_, cache) = m.forward_cached(&x, 0.6, &cond, None)?;
                m.backward(&cache, &cond, &LatentGrid::new(dy.clone())?, None)?;
                let mut out = vec![Tensor::zeros(&[0]); names.len()];
                m.visit(&mut |p| {
                    if let Some(i) = names.iter().position(|n| *n == p.name) {
                        out[i] = p.grad.clone();
                    }
                });
                Ok(out)
            },
        );
        let err = grad_check(&mut op, &inputs, 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut model = Denoiser::seeded(tiny_config(2, 2), 3).unwrap();
    randomize(&mut model, &mut rng::substream(3, 0, "ck"), 0.5);
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(&mut buf, &model, None).unwrap();
    assert_eq!(&buf[..4], b"DIVM");
    let (back, branches) = checkpoint::read_checkpoint(&mut buf.as_slice()).unwrap();
    assert!(branches.is_none());
    assert_eq!(back.cfg, model.cfg);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    model.visit(&mut |p| a.push(p.value.clone()));
    back.visit(&mut |p| b.push(p.value.clone()));
    assert_eq!(a, b);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(checkpoint::read_checkpoint(&mut bad.as_slice()).is_err());
    let cut = &buf[..buf.len() - 3];
    assert!(matches!(checkpoint::read_checkpoint(&mut &cut[..]), Err(crate::Error::Checkpoint(m)) if m.contains("truncated")));
}
