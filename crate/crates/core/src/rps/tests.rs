use proptest::prelude::*;

use super::*;
use crate::backbone::Denoiser;
use crate::flow::euler_sample;
use crate::latent::GridDims;
use crate::testutil::{latent, randomize, scene, tiny_config};

fn log_snr(s: f64) -> f64 {
    2.0 * ((1.0 - s) / s).ln()
}

#[test]
fn shift_reference_values() {
    assert!((noise_level_shift(0.5, 4.0).unwrap() - 2.0 / 3.0).abs() <= 1e-12);
    for r in [0.25, 1.0, 2.25, 7.0] {
        assert_eq!(noise_level_shift(0.0, r).unwrap(), 0.0);
        assert_eq!(noise_level_shift(1.0, r).unwrap(), 1.0);
    }
    for i in 0..=20 {
        let s = i as f64 / 20.0;
        assert!((noise_level_shift(s, 1.0).unwrap() - s).abs() <= 1e-15);
    }
    assert!(noise_level_shift(0.5, 0.0).is_err());
    assert!(noise_level_shift(0.5, -2.0).is_err());
    assert!(noise_level_shift(1.5, 2.0).is_err());
}

#[test]
fn log_snr_sweep() {
    let mut worst: f64 = 0.0;
    for i in 1..=100 {
        let s = i as f64 / 101.0;
        for j in 0..100 {
            let r = (-3.0 + 6.0 * j as f64 / 99.0).exp();
            let shifted = noise_level_shift(s, r).unwrap();
            worst = worst.max((log_snr(shifted) - (log_snr(s) - r.ln())).abs());
        }
    }
    assert!(worst <= 1e-9, "{worst}");
}

proptest! {
    #[test]
    fn shift_composes(s in 0.0..=1.0f64, r1 in 0.05..20.0f64, r2 in 0.05..20.0f64) {
        let a = noise_level_shift(noise_level_shift(s, r1).unwrap(), r2).unwrap();
        let b = noise_level_shift(s, r1 * r2).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn shift_is_monotone(s in 0.001..0.998f64, ds in 1e-4..1e-3f64, r in 0.05..20.0f64) {
        prop_assert!(noise_level_shift(s + ds, r).unwrap() > noise_level_shift(s, r).unwrap());
        if r >= 1.0 {
            prop_assert!(noise_level_shift(s, r).unwrap() >= s);
        }
    }
}

#[test]
fn straight_flow_recovers_data() {
    let d = GridDims::new(2, 2, 3, 4, 2);
    let data = latent(d, 1);
    let noise = latent(d, 2);
    let v = data.sub(&noise).unwrap();
    for s in [0.0, 0.3, 0.9, 1.0] {
        let mut x = data.scale(1.0 - s);
        x.axpy(s, &noise).unwrap();
        let est = straight_flow_estimate(&x, s, &v).unwrap();
        assert!(est.tensor().max_abs_diff(data.tensor()) <= 1e-12);
    }
    let (x, v) = (latent(d, 3), latent(d, 4));
    assert_eq!(straight_flow_estimate(&x, 0.0, &v).unwrap(), x);
    let est = straight_flow_estimate(&x, 0.37, &v).unwrap();
    for i in 0..x.data().len() {
        assert!((est.data()[i] - (x.data()[i] + 0.37 * v.data()[i])).abs() <= 1e-12);
    }
}

/// Independent bilinear resize: explicit hat-function weights over every
/// source pixel, with edge replication handled by clamping the coordinate.
fn reference_resize(img: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> f64 {
        ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0).min((n_in - 1) as f64)
    };
    let hat = |a: f64, b: usize| (1.0 - (a - b as f64).abs()).max(0.0);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let (y, x) = (coord(i, h, oh), coord(j, w, ow));
            out[i * ow + j] = (0..h).flat_map(|p| (0..w).map(move |q| (p, q))).map(|(p, q)| hat(y, p) * hat(x, q) * img[p * w + q]).sum();
        }
    }
    out
}

#[test]
fn resize_matches_reference() {
    let one = |h, w, data: Vec<f64>| LatentGrid::from_vec(GridDims::new(1, 1, h, w, 1), data).unwrap();
    let impulse = one(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
    let up = latent_resize(&impulse, 4, 4).unwrap();
    let axis = [1.0, 0.75, 0.25, 0.0];
    let expected: Vec<f64> = (0..16).map(|k| axis[k / 4] * axis[k % 4]).collect();
    assert_eq!(up.data(), &expected[..]);
    assert_eq!(up.data(), &reference_resize(impulse.data(), 2, 2, 4, 4)[..]);

    let mut centred = vec![0.0; 9];
    centred[4] = 1.0;
    let up = latent_resize(&one(3, 3, centred.clone()), 6, 6).unwrap();
    let reference = reference_resize(&centred, 3, 3, 6, 6);
    for (a, b) in up.data().iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-15);
    }

    let d = GridDims::new(2, 2, 4, 7, 3);
    let x = latent(d, 5);
    for (oh, ow) in [(8, 14), (6, 11), (2, 3)] {
        let y = latent_resize(&x, oh, ow).unwrap();
        assert_eq!(y.dims(), d.with_resolution(oh, ow));
        for v in 0..2 {
            for t in 0..2 {
                for c in 0..3 {
                    let plane: Vec<f64> = x.image(v, t).iter().skip(c).step_by(3).copied().collect();
                    let r = reference_resize(&plane, 4, 7, oh, ow);
                    let got: Vec<f64> = y.image(v, t).iter().skip(c).step_by(3).copied().collect();
                    for (a, b) in got.iter().zip(&r) {
                        assert!((a - b).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn resize_preserves_constants_and_identity() {
    let d = GridDims::new(1, 2, 3, 5, 2);
    let c = LatentGrid::from_vec(d, vec![0.7; d.len()]).unwrap();
    let y = latent_resize(&c, 7, 9).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() <= 1e-15));
    let x = latent(d, 1);
    assert_eq!(latent_resize(&x, 3, 5).unwrap(), x);
    assert!(latent_resize(&x, 0, 5).is_err());
}

#[test]
fn renoise_statistics() {
    let d = GridDims::new(1, 1, 40, 50, 1);
    let clean = latent(d, 1);
    let mut r = rng::substream(0, 0, "renoise-test");
    assert_eq!(renoise(&clean, 0.0, &mut r).unwrap(), clean);
    let n = d.len() as f64;
    let pure = renoise(&clean, 1.0, &mut r).unwrap();
    let mean = pure.data().iter().sum::<f64>() / n;
    assert!(mean.abs() < 3.0 / n.sqrt(), "{mean}");
    let s = 0.6;
    let out = renoise(&clean, s, &mut r).unwrap();
    let resid: Vec<f64> = out.data().iter().zip(clean.data()).map(|(o, c)| o - (1.0 - s) * c).collect();
    let var = resid.iter().map(|e| e * e).sum::<f64>() / n;
    // the sample variance of n Gaussians has standard deviation σ²·sqrt(2/n)
    assert!((var - s * s).abs() < 3.0 * s * s * (2.0 / n).sqrt(), "{var}");
    assert!(renoise(&clean, 1.2, &mut r).is_err());
}

#[test]
fn schedule_parsing_and_costs() {
    let s = StageSchedule::parse("8x14:10, 12×21:10,16x28:10").unwrap();
    assert_eq!(s.total_steps(), 30);
    assert_eq!(s.token_steps(), 8120);
    assert_eq!(StageSchedule::flat(16, 28, 30).unwrap().token_steps(), 13440);
    assert_eq!(s.to_string(), "8x14:10,12x21:10,16x28:10");
    assert!((s.handoff_level(0) - 2.0 / 3.0).abs() < 1e-15);
    assert!(StageSchedule::parse("16x28:10,8x14:10").is_err());
    assert!(StageSchedule::parse("8x14:0").is_err());
    assert!(StageSchedule::parse("8x14").is_err());
    assert!(StageSchedule::parse("").is_err());
}

fn model(frames: usize, seed: u64) -> (Denoiser, crate::conditions::ConditionSet) {
    let mut m = Denoiser::seeded(tiny_config(2, frames), seed).unwrap();
    randomize(&mut m, &mut rng::substream(seed, 0, "rps-test"), 0.4);
    let cond = m.encoder.conditions(&scene(2, 1, 2)).unwrap();
    (m, cond)
}

#[test]
fn degenerate_schedule_matches_euler_bitwise() {
    let (m, cond) = model(2, 3);
    let dims = GridDims::new(2, 2, 6, 8, 2);
    for spec in [GuidanceSpec::extended(2.0), GuidanceSpec::off()] {
        for steps in [1, 4, 9] {
            let (a, run) = euler_sample(&m, &cond, &spec, steps, dims, 17).unwrap();
            let (b, ledger) = rps_sample(&m, &cond, &spec, &StageSchedule::flat(6, 8, steps).unwrap(), dims, 17).unwrap();
            assert_eq!(a.data(), b.data());
            assert_eq!(run.nfe, ledger.nfe());
        }
    }
}

#[test]
fn staged_run_ledger() {
    let (m, cond) = model(1, 1);
    let dims = GridDims::new(2, 1, 8, 14, 2);
    let schedule = StageSchedule::parse("4x7:10,6x11:10,8x14:10").unwrap();
    let (x, ledger) = rps_sample(&m, &cond, &GuidanceSpec::extended(2.0), &schedule, dims, 5).unwrap();
    assert_eq!(x.dims(), dims);
    assert_eq!(ledger.nfe(), 60);
    assert_eq!(ledger.stages.iter().map(|s| s.nfe).collect::<Vec<_>>(), vec![20, 20, 20]);
    assert_eq!(ledger.stages[1].tokens, 2 * 66);
    assert_eq!(ledger.stages[0].s_start, 1.0);
    assert_eq!(ledger.stages[2].s_end, 0.0);
    for k in 0..2 {
        let (a, b) = (&ledger.stages[k], &ledger.stages[k + 1]);
        let r = (b.height * b.width) as f64 / (a.height * a.width) as f64;
        assert_eq!(b.s_start, noise_level_shift(a.s_end, r).unwrap());
        assert!(b.s_start > a.s_end);
    }
    let (_, mad) = rps_sample(&m, &cond, &GuidanceSpec::mad(), &schedule, dims, 5).unwrap();
    assert_eq!(mad.nfe(), 30);
    let again = rps_sample(&m, &cond, &GuidanceSpec::extended(2.0), &schedule, dims, 5).unwrap().0;
    assert_eq!(again, x);
    assert!(rps_sample(&m, &cond, &GuidanceSpec::off(), &schedule, dims.with_resolution(6, 11), 5).is_err());
}

#[test]
fn toy_schedule_handoff_levels() {
    let s = StageSchedule::parse("8x14:10,12x21:10,16x28:10").unwrap();
    let s2 = noise_level_shift(s.handoff_level(0), 252.0 / 112.0).unwrap();
    let s3 = noise_level_shift(s.handoff_level(1), 448.0 / 252.0).unwrap();
    assert!((s2 - 0.75).abs() < 1e-12, "{s2}");
    assert!((s3 - 0.4).abs() < 1e-12, "{s3}");
}
