//! Toy driving world: a three-camera rig, a random scene generator and an
//! exact renderer that serves as ground truth for the conditional targets.

use std::f64::consts::PI;

use dive_core::conditions::{CameraSpec, InstanceSpec, RoadSketch, SceneSpec, ViewBox, CAPTIONS, MAX_INSTANCES, SCENE_LABELS};
use dive_core::rng::{self, Stream};
use dive_core::{GridDims, LatentGrid};
use rand::Rng;

pub const VIEWS: usize = 3;
pub const FRAMES: usize = 4;
pub const CHANNELS: usize = 4;
pub const BUCKETS: [(usize, usize); 3] = [(8, 14), (12, 21), (16, 28)];
pub const ASPECT: f64 = 14.0 / 8.0;

const YAWS_DEG: [f64; VIEWS] = [-55.0, 0.0, 55.0];
const CAMERA_HEIGHT: f64 = 1.5;
const ROAD_HALF_WIDTH: f64 = 0.02;
const SUPERSAMPLE: usize = 4;

/// Car-sized box: width, height, length in metres.
const CAR: [f64; 3] = [1.8, 1.5, 4.2];

pub fn camera_rig() -> Vec<CameraSpec> {
    YAWS_DEG
        .iter()
        .enumerate()
        .map(|(v, deg)| {
            let yaw = deg.to_radians();
            let (s, c) = yaw.sin_cos();
            let fx = if v == 1 { 0.75 } else { 0.7 };
            CameraSpec {
                k: [[fx, 0.0, 0.5], [0.0, fx * ASPECT, 0.5], [0.0, 0.0, 1.0]],
                rot: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
                t: [0.4 * s, 0.0, 0.4 * c],
            }
        })
        .collect()
}

/// World point (x right, y down, z forward) to normalized image coordinates
/// and depth. `None` behind the near plane.
pub fn project(cam: &CameraSpec, p: [f64; 3]) -> Option<([f64; 2], f64)> {
    let d = [p[0] - cam.t[0], p[1] - cam.t[1], p[2] - cam.t[2]];
    let c: Vec<f64> = (0..3).map(|i| (0..3).map(|j| cam.rot[j][i] * d[j]).sum()).collect();
    if c[2] < 0.3 {
        return None;
    }
    let u = cam.k[0][0] * c[0] / c[2] + cam.k[0][1] * c[1] / c[2] + cam.k[0][2];
    let v = cam.k[1][1] * c[1] / c[2] + cam.k[1][2];
    Some(([u, v], c[2]))
}

/// Footprint of a car at ground position `(x, z)` with the given heading.
fn box_rect(cam: &CameraSpec, x: f64, z: f64, heading: f64) -> Option<([f64; 4], f64)> {
    let (s, c) = heading.sin_cos();
    let (hw, hl) = (CAR[0] / 2.0, CAR[2] / 2.0);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut depth = 0.0;
    for (a, b) in [(-hw, -hl), (hw, -hl), (-hw, hl), (hw, hl)] {
        let (px, pz) = (x + a * c + b * s, z - a * s + b * c);
        for y in [CAMERA_HEIGHT, CAMERA_HEIGHT - CAR[1]] {
            let (uv, d) = project(cam, [px, y, pz])?;
            depth += d / 8.0;
            for k in 0..2 {
                lo[k] = lo[k].min(uv[k]);
                hi[k] = hi[k].max(uv[k]);
            }
        }
    }
    Some(([lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]], depth))
}

fn visible(r: &[f64; 4]) -> bool {
    r[0] < 1.0 && r[1] < 1.0 && r[0] + r[2] > 0.0 && r[1] + r[3] > 0.0 && r[2] < 1.5 && r[3] < 1.5
}

/// Random scene on the fixed rig: label, up to four moving cars and a road.
pub fn generate_scene(rng: &mut Stream) -> SceneSpec {
    let cameras = camera_rig();
    let label = rng.random_range(0..SCENE_LABELS);
    let n = rng.random_range(0..=MAX_INSTANCES);
    let mut placed: Vec<(f64, InstanceSpec)> = Vec::with_capacity(n);
    for _ in 0..n {
        let bearing = rng::uniform(rng, -80f64.to_radians(), 80f64.to_radians());
        let range = rng::uniform(rng, 6.0, 16.0);
        let (x, z) = (range * bearing.sin(), range * bearing.cos());
        let heading = rng::uniform(rng, -PI, PI);
        let speed = rng::uniform(rng, 0.0, 0.8);
        let caption = rng.random_range(0..CAPTIONS);
        let (dx, dz) = (speed * heading.sin(), speed * heading.cos());
        let mut depth = f64::INFINITY;
        let boxes = cameras
            .iter()
            .map(|cam| {
                let (r0, d) = box_rect(cam, x, z, heading)?;
                let (r1, _) = box_rect(cam, x + dx, z + dz, heading)?;
                if !visible(&r0) {
                    return None;
                }
                depth = depth.min(d);
                Some(ViewBox {
                    rect: r0,
                    motion: [r1[0] - r0[0], r1[1] - r0[1]],
                })
            })
            .collect();
        placed.push((
            depth,
            InstanceSpec {
                boxes,
                angle: heading,
                caption,
            },
        ));
    }
    placed.sort_by(|a, b| b.0.total_cmp(&a.0));

    let offset = rng::uniform(rng, -2.0, 2.0);
    let bend = rng::uniform(rng, -0.012, 0.012);
    let road = RoadSketch {
        views: cameras.iter().map(|cam| road_polylines(cam, offset, bend)).collect(),
    };
    SceneSpec {
        label,
        instances: placed.into_iter().map(|(_, i)| i).collect(),
        cameras,
        road,
    }
}

fn road_polylines(cam: &CameraSpec, offset: f64, bend: f64) -> Vec<Vec<[f64; 2]>> {
    let mut lines = Vec::new();
    for edge in [-1.75, 1.75] {
        let mut current: Vec<[f64; 2]> = Vec::new();
        for k in 0..=48 {
            let z = -20.0 + k as f64 * 60.0 / 48.0;
            let x = offset + edge + bend * z * z;
            match project(cam, [x, CAMERA_HEIGHT, z]) {
                Some((uv, _)) if uv[0].abs() < 4.0 && uv[1] < 4.0 => current.push(uv),
                _ => {
                    if current.len() >= 2 {
                        lines.push(std::mem::take(&mut current));
                    }
                    current.clear();
                }
            }
        }
        if current.len() >= 2 {
            lines.push(current);
        }
    }
    lines
}

fn label_colour(label: usize) -> [f64; CHANNELS] {
    const PALETTE: [[f64; CHANNELS]; SCENE_LABELS] = [
        [0.6, 0.7, 0.9, 0.2],
        [0.3, 0.4, 0.5, 0.6],
        [0.8, 0.5, 0.2, -0.2],
        [-0.7, -0.6, -0.3, -0.5],
        [-0.8, -0.8, -0.7, 0.1],
        [0.2, 0.6, 0.3, -0.6],
    ];
    PALETTE[label]
}

fn caption_colour(caption: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; CAPTIONS] = [
        [0.9, -0.6, -0.6],
        [-0.6, 0.9, -0.6],
        [-0.6, -0.6, 0.9],
        [0.9, 0.9, -0.7],
        [0.9, -0.7, 0.9],
        [-0.7, 0.9, 0.9],
        [1.0, 1.0, 1.0],
        [-1.0, -1.0, -1.0],
    ];
    PALETTE[caption]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (ax, ay) = (a[0] * ASPECT, a[1]);
    let (bx, by) = (b[0] * ASPECT, b[1]);
    let (px, py) = (p[0] * ASPECT, p[1]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Colour of the continuous image of `view` at `frame` and point `(u, v)`.
pub fn shade(scene: &SceneSpec, view: usize, frame: usize, u: f64, v: f64) -> [f64; CHANNELS] {
    let base = label_colour(scene.label);
    let mut out = if v < 0.5 {
        base
    } else {
        let g = 0.6 + 0.4 * (v - 0.5);
        [base[0] * g - 0.2, base[1] * g - 0.2, base[2] * g - 0.2, base[3]]
    };
    let on_road = scene.road.views[view]
        .iter()
        .any(|line| line.windows(2).any(|s| segment_distance([u, v], s[0], s[1]) < ROAD_HALF_WIDTH));
    if on_road {
        let dim = if dive_core::conditions::is_night(scene.label) { 0.4 } else { 1.0 };
        out = [0.9 * dim, 0.9 * dim, 0.2 * dim, -0.8];
    }
    for inst in &scene.instances {
        let Some(r) = inst.rect_at(view, frame) else { continue };
        if u >= r[0] && u < r[0] + r[2] && v >= r[1] && v < r[1] + r[3] {
            let c = caption_colour(inst.caption);
            let (cx, cy) = (r[0] + r[2] / 2.0, r[1] + r[3] / 2.0);
            let ramp = ((u - cx) * inst.angle.cos() + (v - cy) * inst.angle.sin()) / r[2].max(r[3]);
            out = [c[0], c[1], c[2], 2.0 * ramp];
        }
    }
    out
}

/// Anti-aliased rendering of `scene` at `height × width` with `frames` frames.
pub fn render_oracle(scene: &SceneSpec, frames: usize, height: usize, width: usize) -> LatentGrid {
    let dims = GridDims::new(scene.views(), frames, height, width, CHANNELS);
    let mut out = LatentGrid::zeros(dims);
    let n = SUPERSAMPLE;
    let w = 1.0 / (n * n) as f64;
    for view in 0..dims.views {
        for frame in 0..frames {
            let img = out.image_mut(view, frame);
            for i in 0..height {
                for j in 0..width {
                    let px = &mut img[(i * width + j) * CHANNELS..][..CHANNELS];
                    for a in 0..n {
                        for b in 0..n {
                            let v = (i as f64 + (a as f64 + 0.5) / n as f64) / height as f64;
                            let u = (j as f64 + (b as f64 + 0.5) / n as f64) / width as f64;
                            let c = shade(scene, view, frame, u, v);
                            px.iter_mut().zip(c).for_each(|(p, c)| *p += w * c);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fraction of each pixel covered by an instance's box in `view` at `frame`.
pub fn footprint(inst: &InstanceSpec, view: usize, frame: usize, height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    let Some(r) = inst.rect_at(view, frame) else { return out };
    let n = SUPERSAMPLE;
    for i in 0..height {
        for j in 0..width {
            let mut hits = 0;
            for a in 0..n {
                for b in 0..n {
                    let v = (i as f64 + (a as f64 + 0.5) / n as f64) / height as f64;
                    let u = (j as f64 + (b as f64 + 0.5) / n as f64) / width as f64;
                    hits += usize::from(u >= r[0] && u < r[0] + r[2] && v >= r[1] && v < r[1] + r[3]);
                }
            }
            out[i * width + j] = hits as f64 / (n * n) as f64;
        }
    }
    out
}

/// Scene number `index` of the stream identified by `seed`.
pub fn scene_for(seed: u64, index: u64) -> SceneSpec {
    generate_scene(&mut rng::substream(seed, index, "scene"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dive_core::rps::latent_resize;

    #[test]
    fn rig_is_valid_and_distinct() {
        let rig = camera_rig();
        assert_eq!(rig.len(), VIEWS);
        for c in &rig {
            c.validate().unwrap();
        }
        assert_ne!(rig[0], rig[2]);
        let (uv, d) = project(&rig[1], [0.0, 0.0, 10.0]).unwrap();
        assert!((uv[0] - 0.5).abs() < 0.05 && (uv[1] - 0.5).abs() < 1e-12 && d > 9.0);
        assert!(project(&rig[1], [0.0, 0.0, -5.0]).is_none());
    }

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        for i in 0..200 {
            let a = scene_for(7, i);
            assert_eq!(a, scene_for(7, i));
            a.validate().unwrap();
            assert!(a.instances.len() <= MAX_INSTANCES);
            for inst in &a.instances {
                for v in 0..VIEWS {
                    for t in 0..FRAMES {
                        if let Some(r) = inst.rect_at(v, t) {
                            assert!(r[0] >= 0.0 && r[1] >= 0.0 && r[0] + r[2] <= 1.0 && r[1] + r[3] <= 1.0);
                        }
                    }
                }
            }
        }
        assert_ne!(scene_for(7, 0), scene_for(8, 0));
    }

    fn empty_scene(label: usize) -> SceneSpec {
        SceneSpec {
            label,
            instances: Vec::new(),
            cameras: camera_rig(),
            road: RoadSketch::empty(VIEWS),
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let s = empty_scene(2);
        let img = render_oracle(&s, 2, 8, 14);
        let base = label_colour(2);
        for i in 0..4 {
            for j in 0..14 {
                for c in 0..CHANNELS {
                    assert!((img.get(1, 1, i, j, c) - base[c]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(img.image(0, 0), img.image(2, 1));
    }

    #[test]
    fn box_covers_exactly_its_pixels() {
        let mut s = empty_scene(0);
        let mut boxes = vec![None; VIEWS];
        boxes[1] = Some(ViewBox {
            rect: [5.0 / 14.0, 3.0 / 8.0, 4.0 / 14.0, 2.0 / 8.0],
            motion: [0.0, 0.0],
        });
        s.instances.push(InstanceSpec {
            boxes,
            angle: 0.3,
            caption: 0,
        });
        let with = render_oracle(&s, 1, 8, 14);
        let without = render_oracle(&empty_scene(0), 1, 8, 14);
        for v in 0..VIEWS {
            for i in 0..8 {
                for j in 0..14 {
                    let changed = (0..CHANNELS).any(|c| with.get(v, 0, i, j, c) != without.get(v, 0, i, j, c));
                    let inside = v == 1 && (3..5).contains(&i) && (5..9).contains(&j);
                    assert_eq!(changed, inside, "view {v} pixel {i},{j}");
                }
            }
        }
        let fp = footprint(&s.instances[0], 1, 0, 8, 14);
        assert_eq!(fp.iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn resolutions_agree() {
        for i in 0..10 {
            let s = scene_for(3, i);
            let hi = render_oracle(&s, FRAMES, 16, 28);
            let lo = render_oracle(&s, FRAMES, 8, 14);
            let down = latent_resize(&hi, 8, 14).unwrap();
            let mse = down.mse(&lo).unwrap();
            assert!(mse < 0.05, "scene {i}: {mse}");
        }
    }

    #[test]
    fn moving_instances_change_frames() {
        let s = (0..50).map(|i| scene_for(1, i)).find(|s| !s.instances.is_empty()).unwrap();
        let img = render_oracle(&s, FRAMES, 8, 14);
        assert!((0..VIEWS).any(|v| img.image(v, 0) != img.image(v, 3)));
    }
}
