use proptest::prelude::*;

use super::*;
use crate::latent::{GridDims, LatentGrid};
use crate::nn::gradcheck::{grad_check, FnOp};
use crate::nn::{linear, silu};
use crate::rng;
use crate::tensor::{Params, Tensor};

fn encoder(views: usize, seed: u64) -> ConditionEncoder {
    let cfg = EncoderConfig {
        views,
        ..EncoderConfig::default()
    };
    ConditionEncoder::new(cfg, &mut rng::substream(seed, 0, "encoder"))
}

fn instance(views: usize, shift: f64, angle: f64, caption: usize) -> InstanceSpec {
    InstanceSpec {
        boxes: (0..views)
            .map(|v| {
                (v != 1).then(|| ViewBox {
                    rect: [0.1 + shift, 0.4, 0.2, 0.15 + 0.05 * v as f64],
                    motion: [0.02, -0.01],
                })
            })
            .collect(),
        angle,
        caption,
    }
}

fn scene(n_ins: usize) -> SceneSpec {
    SceneSpec {
        label: 2,
        instances: (0..n_ins).map(|i| instance(3, 0.1 * i as f64, 0.3 * i as f64, i)).collect(),
        cameras: vec![CameraSpec::identity(); 3],
        road: RoadSketch {
            views: vec![vec![vec![[0.0, 0.8], [1.0, 0.6]]]; 3],
        },
    }
}

#[test]
fn text_tokens_have_configured_shape_and_are_deterministic() {
    let enc = encoder(3, 0);
    let a = enc.encode_text(4).unwrap();
    assert_eq!(a.shape(), &[8, 32]);
    assert_eq!(a, enc.encode_text(4).unwrap());
    assert!(matches!(enc.encode_text(SCENE_LABELS), Err(crate::Error::UnknownLabel { .. })));
}

#[test]
fn empty_instance_list_is_zero_rows() {
    assert_eq!(encoder(3, 0).encode_instances(&[]).unwrap().shape(), &[0, 32]);
}

#[test]
fn angle_is_periodic_with_period_two() {
    let enc = encoder(3, 1);
    let a = enc.encode_instances(&[instance(3, 0.0, 0.7, 3)]).unwrap();
    let b = enc.encode_instances(&[instance(3, 0.0, 2.7, 3)]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn instance_token_gradients_wrt_mlp_weights() {
    for seed in 0..20 {
        let base = encoder(3, seed);
        let insts = vec![instance(3, 0.05, 0.4, 1), instance(3, 0.2, -1.1, 6)];
        let x = base.instance_inputs(&insts).unwrap();
        let (b1, b2) = (base.instance_mlp.fc1.bias.value.clone(), base.instance_mlp.fc2.bias.value.clone());
        let scene = SceneSpec {
            label: 0,
            instances: insts,
            cameras: vec![CameraSpec::identity(); 3],
            road: RoadSketch::empty(3),
        };
        let mut op = FnOp::new(
            |w: &[Tensor]| linear(&silu(&linear(&x, &w[0], &b1)?), &w[1], &b2),
            |w: &[Tensor], dy: &Tensor| {
                let mut e = base.clone();
                e.instance_mlp.fc1.weight.value = w[0].clone();
                e.instance_mlp.fc2.weight.value = w[1].clone();
                e.zero_grad();
                let (cond, cache) = e.encode(&scene)?;
                let mut g = CondGrads::zeros_like(&cond);
                g.instances = dy.clone();
                e.backward(&cache, NullMask::NONE, &g)?;
                Ok(vec![e.instance_mlp.fc1.weight.grad.clone(), e.instance_mlp.fc2.weight.grad.clone()])
            },
        );
        let inputs = [base.instance_mlp.fc1.weight.value.clone(), base.instance_mlp.fc2.weight.value.clone()];
        let err = grad_check(&mut op, &inputs, 1e-5).unwrap();
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn caption_and_text_gradients() {
    let base = encoder(3, 7);
    let sc = scene(3);
    for seed in 0..20 {
        let mut r = rng::substream(seed, 0, "cond-cot");
        let (cond, _) = base.encode(&sc).unwrap();
        let cot = CondGrads {
            text: rng::normal_tensor(&mut r, cond.text.shape()),
            instances: rng::normal_tensor(&mut r, cond.instances.shape()),
            camera: rng::normal_tensor(&mut r, cond.camera.shape()),
        };
        let objective = |e: &ConditionEncoder| {
            let (c, _) = e.encode(&sc).unwrap();
            c.text.dot(&cot.text).unwrap() + c.instances.dot(&cot.instances).unwrap() + c.camera.dot(&cot.camera).unwrap()
        };
        let mut e = base.clone();
        let (_, cache) = e.encode(&sc).unwrap();
        e.backward(&cache, NullMask::NONE, &cot).unwrap();
        for (pick, idx) in [(0usize, 2 * 32 + 5), (1, 17), (2, 32 + 3), (2, 6 * 32 + 1)] {
            let h = 1e-5;
            let mut plus = base.clone();
            let mut minus = base.clone();
            let (pp, mp, analytic) = match pick {
                0 => (&mut plus.label_emb, &mut minus.label_emb, e.label_emb.grad.data()[idx]),
                1 => (&mut plus.text_pos, &mut minus.text_pos, e.text_pos.grad.data()[idx]),
                _ => (&mut plus.caption_emb, &mut minus.caption_emb, e.caption_emb.grad.data()[idx]),
            };
            pp.value.data_mut()[idx] += h;
            mp.value.data_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);
            assert!(rel <= 1e-6 || (fd - analytic).abs() < 1e-9, "param {pick}[{idx}]: {analytic} vs {fd}");
        }
    }
}

#[test]
fn identity_camera_token_is_pinned() {
    let enc = encoder(3, 0);
    let p = enc.encode_camera(&CameraSpec::identity()).unwrap();
    assert_eq!(p.shape(), &[1, 32]);
    let head: Vec<f64> = p.data()[..4].to_vec();
    let pinned = [-1.402010427606246, -0.965307749076183, 0.4804933573615682, -0.45228421064626984];
    for (a, b) in head.iter().zip(pinned) {
        assert!((a - b).abs() < 1e-12, "{head:?}");
    }
    assert_eq!(p, enc.encode_camera(&CameraSpec::identity()).unwrap());
}

#[test]
fn singular_camera_is_rejected() {
    let mut cam = CameraSpec::identity();
    cam.k = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]];
    assert!(matches!(encoder(3, 0).encode_camera(&cam), Err(crate::Error::Singular(_))));
}

#[test]
fn aggregate_lengths() {
    let d = 4;
    let agg = aggregate_conditions(&Tensor::zeros(&[8, d]), &Tensor::zeros(&[4, d]), &Tensor::zeros(&[1, d])).unwrap();
    assert_eq!(agg.rows(), 13);
    let full_size = aggregate_conditions(&Tensor::zeros(&[200, d]), &Tensor::zeros(&[4, d]), &Tensor::zeros(&[1, d])).unwrap();
    assert_eq!(full_size.rows(), 205);
    assert!(aggregate_conditions(&Tensor::zeros(&[2, d]), &Tensor::zeros(&[1, d + 1]), &Tensor::zeros(&[1, d])).is_err());
}

#[test]
fn aggregate_preserves_order() {
    let enc = encoder(3, 3);
    let cond = enc.conditions(&scene(2)).unwrap();
    let agg = cond.aggregate(1).unwrap();
    assert_eq!(agg.rows(), cond.rows_per_view());
    assert_eq!(agg.slice_rows(0, 8), cond.text);
    assert_eq!(agg.slice_rows(8, 10), cond.instances);
    assert_eq!(agg.row(10), cond.camera.row(1));
}

#[test]
fn stacked_grad_split_is_adjoint() {
    let enc = encoder(3, 4);
    let cond = enc.conditions(&scene(2)).unwrap();
    let mut r = rng::substream(4, 0, "adjoint");
    let d = rng::normal_tensor(&mut r, &[3 * cond.rows_per_view(), 32]);
    let g = cond.split_stacked_grad(&d).unwrap();
    let pert = CondGrads {
        text: rng::normal_tensor(&mut r, cond.text.shape()),
        instances: rng::normal_tensor(&mut r, cond.instances.shape()),
        camera: rng::normal_tensor(&mut r, cond.camera.shape()),
    };
    let mut moved = cond.clone();
    moved.text = pert.text.clone();
    moved.instances = pert.instances.clone();
    moved.camera = pert.camera.clone();
    let lhs = moved.stacked().unwrap().dot(&d).unwrap();
    let rhs = g.text.dot(&pert.text).unwrap() + g.instances.dot(&pert.instances).unwrap() + g.camera.dot(&pert.camera).unwrap();
    assert!((lhs - rhs).abs() < 1e-9);
}

#[test]
fn nullify_identity_and_full() {
    let enc = encoder(3, 5);
    let cond = enc.conditions(&scene(2)).unwrap();
    assert_eq!(nullify(&cond, NullMask::NONE), cond);
    let all = nullify(&cond, NullMask::ALL);
    assert_eq!(all.nulls, NullMask::ALL);
    assert_eq!(all.sketch_raster(2, 8, 14).tensor.sum(), 0.0);
    assert_eq!(all.text, enc.null_text.value);
    assert_eq!(all.instances.shape(), cond.instances.shape());
    assert_eq!(all.camera, cond.camera);
}

#[test]
fn first_k_mask_contract() {
    let dims = GridDims::new(2, 4, 2, 3, 2);
    let mut r = rng::substream(0, 0, "mask");
    let xt = LatentGrid::new(rng::normal_tensor(&mut r, &dims.shape())).unwrap();
    let ctx = LatentGrid::new(rng::normal_tensor(&mut r, &dims.shape())).unwrap();
    let (same, ones) = apply_first_k_mask(&xt, &ctx, 0).unwrap();
    assert_eq!(same, xt);
    assert_eq!(ones, vec![1.0; 4]);
    let (last, m) = apply_first_k_mask(&xt, &ctx, 3).unwrap();
    assert_eq!(m, vec![0.0, 0.0, 0.0, 1.0]);
    for v in 0..2 {
        for t in 0..3 {
            assert_eq!(last.image(v, t), ctx.image(v, t));
        }
        assert_eq!(last.image(v, 3), xt.image(v, 3));
    }
    assert!(apply_first_k_mask(&xt, &ctx, 4).is_err());
}

#[test]
fn dropout_frequencies() {
    let mut r = rng::substream(0, 0, "dropout");
    let n = 20_000;
    let (mut all, mut text) = (0, 0);
    for _ in 0..n {
        let m = sample_dropout(&mut r, 0.1, 0.1);
        all += (m == NullMask::ALL) as usize;
        text += m.text as usize;
    }
    let p_all = 0.1 + 0.9 * 0.001;
    let p_text = 0.1 + 0.9 * 0.1;
    for (count, p) in [(all, p_all), (text, p_text)] {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((count as f64 / n as f64 - p).abs() < 3.0 * sigma, "{count} vs {p}");
    }
}

fn mask_strategy() -> impl Strategy<Value = NullMask> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(a, b, c)| NullMask::new(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nullify_is_idempotent_and_commutes(a in mask_strategy(), b in mask_strategy(), n in 0usize..4) {
        let enc = encoder(3, 9);
        let cond = enc.conditions(&scene(n)).unwrap();
        let once = nullify(&cond, a);
        prop_assert_eq!(&nullify(&once, a), &once);
        prop_assert_eq!(nullify(&nullify(&cond, a), b), nullify(&nullify(&cond, b), a));
    }

    #[test]
    fn instance_encoding_is_reorder_equivariant(seed in 0u64..1000, n in 1usize..5) {
        let enc = encoder(3, 11);
        let mut r = rng::substream(seed, 0, "perm");
        let insts: Vec<InstanceSpec> = (0..n)
            .map(|i| instance(3, rng::uniform(&mut r, 0.0, 0.5), rng::uniform(&mut r, -3.0, 3.0), i % CAPTIONS))
            .collect();
        let tokens = enc.encode_instances(&insts).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let shuffled: Vec<InstanceSpec> = perm.iter().map(|&p| insts[p].clone()).collect();
        let out = enc.encode_instances(&shuffled).unwrap();
        for (row, &p) in perm.iter().enumerate() {
            prop_assert_eq!(out.row(row), tokens.row(p));
        }
    }

    #[test]
    fn aggregate_length_law(nl in 1usize..12, ni in 0usize..6) {
        let agg = aggregate_conditions(&Tensor::zeros(&[nl, 3]), &Tensor::zeros(&[ni, 3]), &Tensor::zeros(&[1, 3])).unwrap();
        prop_assert_eq!(agg.rows(), nl + ni + 1);
    }
}
