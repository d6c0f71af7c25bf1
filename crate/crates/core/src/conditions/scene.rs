//! Declarative scene descriptions and the road-sketch rasterizer.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const SCENE_LABELS: usize = 6;
pub const CAPTIONS: usize = 8;
pub const MAX_INSTANCES: usize = 4;
/// Scene labels rendered as night scenes.
pub const NIGHT_LABELS: [usize; 2] = [3, 4];

pub fn is_night(label: usize) -> bool {
    NIGHT_LABELS.contains(&label)
}

/// Axis-aligned box `(x, y, w, h)` in normalized image coordinates, with `(x, y)`
/// the top-left corner.
pub type Rect = [f64; 4];

/// Per-view placement of an instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBox {
    pub rect: Rect,
    /// Displacement of the box per frame, normalized units.
    pub motion: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    /// One entry per view; `None` when the instance is not visible there.
    pub boxes: Vec<Option<ViewBox>>,
    pub angle: f64,
    pub caption: usize,
}

impl InstanceSpec {
    /// Box in `view` at `frame`, clipped to the unit square; `None` if empty.
    pub fn rect_at(&self, view: usize, frame: usize) -> Option<Rect> {
        let b = self.boxes.get(view)?.as_ref()?;
        let x0 = b.rect[0] + b.motion[0] * frame as f64;
        let y0 = b.rect[1] + b.motion[1] * frame as f64;
        clip_rect([x0, y0, b.rect[2], b.rect[3]])
    }
}

pub fn clip_rect(r: Rect) -> Option<Rect> {
    let x0 = r[0].clamp(0.0, 1.0);
    let y0 = r[1].clamp(0.0, 1.0);
    let x1 = (r[0] + r[2]).clamp(0.0, 1.0);
    let y1 = (r[1] + r[3]).clamp(0.0, 1.0);
    (x1 > x0 && y1 > y0).then_some([x0, y0, x1 - x0, y1 - y0])
}

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct CameraSpec {
    pub k: Mat3,
    pub rot: Mat3,
    pub t: [f64; 3],
}

impl CameraSpec {
    pub fn identity() -> Self {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Self {
            k: eye,
            rot: eye,
            t: [0.0; 3],
        }
    }

    /// Checks that `K` is invertible and `R` orthonormal.
    pub fn validate(&self) -> Result<()> {
        invert3(&self.k)?;
        let r = &self.rot;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|i| r[i][a] * r[i][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// `[[R, t], [0, 1]] · [[K⁻¹, 0], [0, 1]]`, row-major.
    pub fn image_to_world(&self) -> Result<[[f64; 4]; 4]> {
        let kinv = invert3(&self.k)?;
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().take(3).enumerate() {
            for (j, out) in row.iter_mut().take(3).enumerate() {
                *out = (0..3).map(|l| self.rot[i][l] * kinv[l][j]).sum();
            }
            row[3] = self.t[i];
        }
        m[3][3] = 1.0;
        Ok(m)
    }
}

pub fn invert3(m: &Mat3) -> Result<Mat3> {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
        [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
        [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(3) {
        return Err(Error::Singular("camera intrinsics"));
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = cof[j][i] / det;
        }
    }
    Ok(inv)
}

/// Road polylines per view in normalized image coordinates (x right, y down).
/// Kept in vector form so the sketch can be rasterized at any resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoadSketch {
    pub views: Vec<Vec<Vec<[f64; 2]>>>,
}

impl RoadSketch {
    pub fn empty(views: usize) -> Self {
        Self {
            views: vec![Vec::new(); views],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.views.iter().all(|v| v.iter().all(|p| p.len() < 2))
    }

    /// Marks pixels whose centre lies within half a pixel of a segment; the
    /// road is static over `frames`.
    pub fn rasterize(&self, frames: usize, height: usize, width: usize) -> SketchRaster {
        let views = self.views.len();
        let mut data = vec![0.0; views * frames * height * width];
        let img = height * width;
        for (v, lines) in self.views.iter().enumerate() {
            let mut plane = vec![0.0; img];
            for line in lines {
                for seg in line.windows(2) {
                    draw_segment(&mut plane, height, width, seg[0], seg[1]);
                }
            }
            for t in 0..frames {
                let s = (v * frames + t) * img;
                data[s..s + img].copy_from_slice(&plane);
            }
        }
        SketchRaster {
            tensor: Tensor::new(vec![views, frames, height, width, 1], data).expect("raster shape"),
        }
    }
}

fn draw_segment(plane: &mut [f64], height: usize, width: usize, a: [f64; 2], b: [f64; 2]) {
    let (ax, ay) = (a[0] * width as f64, a[1] * height as f64);
    let (bx, by) = (b[0] * width as f64, b[1] * height as f64);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let lo_i = (ay.min(by) - 1.0).floor().max(0.0) as usize;
    let hi_i = ((ay.max(by) + 1.0).ceil().max(0.0) as usize).min(height);
    let lo_j = (ax.min(bx) - 1.0).floor().max(0.0) as usize;
    let hi_j = ((ax.max(bx) + 1.0).ceil().max(0.0) as usize).min(width);
    for i in lo_i..hi_i {
        for j in lo_j..hi_j {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let u = if len2 > 0.0 {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (ax + u * dx - px, ay + u * dy - py);
            if qx * qx + qy * qy <= 0.25 {
                plane[i * width + j] = 1.0;
            }
        }
    }
}

/// Binary road raster `[V, T, H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchRaster {
    pub tensor: Tensor,
}

impl SketchRaster {
    pub fn zeros(views: usize, frames: usize, height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[views, frames, height, width, 1]),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.tensor.data().iter().all(|&x| x == 0.0 || x == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub label: usize,
    pub instances: Vec<InstanceSpec>,
    pub cameras: Vec<CameraSpec>,
    pub road: RoadSketch,
}

impl SceneSpec {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label >= SCENE_LABELS {
            return Err(Error::UnknownLabel {
                kind: "scene label",
                id: self.label,
            });
        }
        if self.instances.len() > MAX_INSTANCES {
            return Err(invalid(format!("{} instances exceeds {MAX_INSTANCES}", self.instances.len())));
        }
        for inst in &self.instances {
            if inst.caption >= CAPTIONS {
                return Err(Error::UnknownLabel {
                    kind: "caption",
                    id: inst.caption,
                });
            }
            if inst.boxes.len() != self.views() {
                return Err(invalid("instance boxes must cover every view"));
            }
            if inst.boxes.iter().flatten().any(|b| b.rect[2] <= 0.0 || b.rect[3] <= 0.0) {
                return Err(invalid("instance box with non-positive extent"));
            }
        }
        if self.road.views.len() != self.views() {
            return Err(invalid("road sketch must cover every view"));
        }
        self.cameras.iter().try_for_each(CameraSpec::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_diagonal() {
        let k = [[2.0, 0.0, 0.5], [0.0, 4.0, 0.25], [0.0, 0.0, 1.0]];
        let inv = invert3(&k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let p: f64 = (0..3).map(|l| k[i][l] * inv[l][j]).sum();
                assert!((p - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let mut cam = CameraSpec::identity();
        cam.k[2] = [0.0; 3];
        assert!(matches!(cam.image_to_world(), Err(Error::Singular(_))));
    }

    #[test]
    fn horizontal_line_rasterizes_one_row() {
        let road = RoadSketch {
            views: vec![vec![vec![[0.0, 0.5 - 1.0 / 16.0], [1.0, 0.5 - 1.0 / 16.0]]]],
        };
        let r = road.rasterize(2, 8, 6);
        assert!(r.is_binary());
        let d = r.tensor.data();
        for t in 0..2 {
            for i in 0..8 {
                for j in 0..6 {
                    let want = if i == 3 { 1.0 } else { 0.0 };
                    assert_eq!(d[(t * 8 + i) * 6 + j], want, "t{t} i{i} j{j}");
                }
            }
        }
    }

    #[test]
    fn clipping_keeps_boxes_in_frame() {
        let r = clip_rect([0.9, -0.1, 0.3, 0.3]).unwrap();
        assert_eq!(r[0], 0.9);
        assert_eq!(r[1], 0.0);
        assert!((r[2] - 0.1).abs() < 1e-12 && (r[3] - 0.2).abs() < 1e-12);
        assert_eq!(clip_rect([1.2, 0.1, 0.1, 0.1]), None);
    }
}
