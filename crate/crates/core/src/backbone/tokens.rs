//! Patch tokenization and the attention groupings over the token sequence.
//!
//! Token rows are ordered `((v·T + t)·gh + i)·gw + j` for view `v`, frame `t`
//! and patch cell `(i, j)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::latent::{GridDims, LatentGrid};
use crate::nn::AttnGroup;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub dims: GridDims,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenLayout {
    pub fn new(dims: GridDims, patch: usize) -> Self {
        Self {
            dims,
            patch,
            grid_h: dims.height.div_ceil(patch),
            grid_w: dims.width.div_ceil(patch),
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn tokens(&self) -> usize {
        self.dims.views * self.dims.frames * self.cells()
    }

    pub fn row(&self, v: usize, t: usize, cell: usize) -> usize {
        (v * self.dims.frames + t) * self.cells() + cell
    }

    pub fn frame_of(&self, row: usize) -> usize {
        (row / self.cells()) % self.dims.frames
    }

    /// One group per frame spanning every view, or per `(view, frame)` when
    /// `inflate` is false.
    pub fn spatial_groups(&self, inflate: bool) -> Vec<AttnGroup> {
        let (nv, nt, nc) = (self.dims.views, self.dims.frames, self.cells());
        if inflate {
            (0..nt)
                .map(|t| AttnGroup::square((0..nv).flat_map(|v| (0..nc).map(move |c| (v * nt + t) * nc + c)).collect()))
                .collect()
        } else {
            (0..nv * nt).map(|vt| AttnGroup::square((vt * nc..(vt + 1) * nc).collect())).collect()
        }
    }

    /// One group per `(view, cell)` running along time.
    pub fn temporal_groups(&self) -> Vec<AttnGroup> {
        let (nv, nt, nc) = (self.dims.views, self.dims.frames, self.cells());
        (0..nv)
            .flat_map(|v| (0..nc).map(move |c| AttnGroup::square((0..nt).map(|t| (v * nt + t) * nc + c).collect())))
            .collect()
    }

    /// Tokens of view `v` attend to rows `v·n .. (v+1)·n` of the stacked
    /// per-view conditions.
    pub fn cross_groups(&self, rows_per_view: usize) -> Vec<AttnGroup> {
        let per_view = self.dims.frames * self.cells();
        (0..self.dims.views)
            .map(|v| AttnGroup {
                queries: (v * per_view..(v + 1) * per_view).collect(),
                keys: (v * rows_per_view..(v + 1) * rows_per_view).collect(),
            })
            .collect()
    }

    /// Every token attends to all `keys` rows of a shared key set.
    pub fn global_group(&self, keys: usize) -> Vec<AttnGroup> {
        vec![AttnGroup {
            queries: (0..self.tokens()).collect(),
            keys: (0..keys).collect(),
        }]
    }
}

/// Cuts `[V, T, H, W, C]` into `p×p` patches; ragged edges are zero-padded.
/// Features within a token are ordered `(di, dj, c)`.
pub fn patchify(x: &LatentGrid, patch: usize) -> (Tensor, TokenLayout) {
    let layout = TokenLayout::new(x.dims(), patch);
    let d = x.dims();
    let width = patch * patch * d.channels;
    let mut out = vec![0.0; layout.tokens() * width];
    for v in 0..d.views {
        for t in 0..d.frames {
            let img = x.image(v, t);
            for i in 0..d.height {
                for j in 0..d.width {
                    let cell = (i / patch) * layout.grid_w + j / patch;
                    let base = layout.row(v, t, cell) * width + ((i % patch) * patch + j % patch) * d.channels;
                    let src = (i * d.width + j) * d.channels;
                    out[base..base + d.channels].copy_from_slice(&img[src..src + d.channels]);
                }
            }
        }
    }
    (Tensor::new(vec![layout.tokens(), width], out).expect("patch shape"), layout)
}

/// Inverse of [`patchify`], dropping padded positions. It is also the adjoint
/// of `patchify`, and `patchify` is the adjoint of this.
pub fn unpatchify(tokens: &Tensor, layout: &TokenLayout) -> Result<LatentGrid> {
    let d = layout.dims;
    let width = layout.patch * layout.patch * d.channels;
    if tokens.shape() != [layout.tokens(), width] {
        return Err(Error::Shape {
            op: "unpatchify",
            left: vec![layout.tokens(), width],
            right: tokens.shape().to_vec(),
        });
    }
    let p = layout.patch;
    let mut out = LatentGrid::zeros(d);
    let src = tokens.data();
    for v in 0..d.views {
        for t in 0..d.frames {
            let img = out.image_mut(v, t);
            for i in 0..d.height {
                for j in 0..d.width {
                    let cell = (i / p) * layout.grid_w + j / p;
                    let base = layout.row(v, t, cell) * width + ((i % p) * p + j % p) * d.channels;
                    let dst = (i * d.width + j) * d.channels;
                    img[dst..dst + d.channels].copy_from_slice(&src[base..base + d.channels]);
                }
            }
        }
    }
    Ok(out)
}

/// Fixed 2D sinusoidal codes `[gh·gw, d]` on normalized pixel coordinates of
/// the patch centres, so one table serves every resolution.
pub fn positional_codes(layout: &TokenLayout, d: usize) -> Tensor {
    let nf = d / 4;
    let (h, w) = (layout.dims.height as f64, layout.dims.width as f64);
    let p = layout.patch as f64;
    let freq = |k: usize| PI * if nf > 1 { 16f64.powf(k as f64 / (nf - 1) as f64) } else { 1.0 };
    let mut out = Tensor::zeros(&[layout.cells(), d]);
    for gi in 0..layout.grid_h {
        for gj in 0..layout.grid_w {
            let y = (gi as f64 * p + p / 2.0) / h;
            let x = (gj as f64 * p + p / 2.0) / w;
            let row = out.row_mut(gi * layout.grid_w + gj);
            for k in 0..nf {
                let f = freq(k);
                row[2 * k] = (f * y).sin();
                row[2 * k + 1] = (f * y).cos();
                row[2 * nf + 2 * k] = (f * x).sin();
                row[2 * nf + 2 * k + 1] = (f * x).cos();
            }
        }
    }
    out
}

/// Adds per-cell codes to every `(view, frame)` block of `tokens`.
pub fn add_positional(tokens: &mut Tensor, codes: &Tensor) {
    let n = codes.len();
    for chunk in tokens.data_mut().chunks_mut(n) {
        chunk.iter_mut().zip(codes.data()).for_each(|(a, b)| *a += b);
    }
}
