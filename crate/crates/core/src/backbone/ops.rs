//! The attention stages as standalone operations on grids whose channel axis
//! is the model width (one token per pixel).

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::nn::{MhaCache, MultiHeadAttention};
use crate::tensor::Tensor;

use super::block::add_frame_codes;
use super::tokens::TokenLayout;

fn tokens_of(x: &LatentGrid, mha: &MultiHeadAttention) -> Result<(Tensor, TokenLayout)> {
    let d = x.dims();
    if d.channels != mha.wq.d_in() {
        return Err(Error::Shape {
            op: "attention stage",
            left: vec![mha.wq.d_in()],
            right: d.shape().to_vec(),
        });
    }
    let t = x.tensor().clone().reshape(&[d.views * d.frames * d.height * d.width, d.channels])?;
    Ok((t, TokenLayout::new(d, 1)))
}

fn grid_of(t: Tensor, like: &LatentGrid) -> Result<LatentGrid> {
    LatentGrid::new(t.reshape(&like.dims().shape())?)
}

/// Attention over all `V·H·W` tokens of each frame.
pub fn view_inflated_spatial_attention(x: &LatentGrid, mha: &MultiHeadAttention) -> Result<LatentGrid> {
    let (t, layout) = tokens_of(x, mha)?;
    grid_of(mha.forward(&t, None, &layout.spatial_groups(true))?.0, x)
}

/// Attention over the `H·W` tokens of each `(view, frame)` separately.
pub fn spatial_attention(x: &LatentGrid, mha: &MultiHeadAttention) -> Result<LatentGrid> {
    let (t, layout) = tokens_of(x, mha)?;
    grid_of(mha.forward(&t, None, &layout.spatial_groups(false))?.0, x)
}

#[derive(Clone, Debug)]
pub struct StageCache {
    mha: MhaCache,
    layout: TokenLayout,
}

/// `x + Attn_T(x + P_t)` along time for every `(view, pixel)`.
pub fn temporal_attention(x: &LatentGrid, mha: &MultiHeadAttention, positions: &Tensor) -> Result<(LatentGrid, StageCache)> {
    let (t, layout) = tokens_of(x, mha)?;
    let mut a = t.clone();
    add_frame_codes(&mut a, positions, &layout)?;
    let (out, cache) = mha.forward(&a, None, &layout.temporal_groups())?;
    Ok((grid_of(t.add(&out)?, x)?, StageCache { mha: cache, layout }))
}

/// Returns `(d x, d positions)`.
pub fn temporal_attention_backward(
    mha: &mut MultiHeadAttention,
    cache: &StageCache,
    dy: &LatentGrid,
    frames_in_table: usize,
) -> Result<(LatentGrid, Tensor)> {
    let (dyt, _) = tokens_of(dy, mha)?;
    let (da, _) = mha.backward(&cache.mha, &dyt, &cache.layout.temporal_groups())?;
    let d = da.last_dim();
    let mut dpos = Tensor::zeros(&[frames_in_table, d]);
    for (row, src) in da.data().chunks(d).enumerate() {
        let t = cache.layout.frame_of(row);
        dpos.row_mut(t).iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
    Ok((grid_of(dyt.add(&da)?, dy)?, dpos))
}

/// `x + Attn(x, C)`: every token attends to all rows of `cond`.
pub fn cross_attention_block(x: &LatentGrid, cond: &Tensor, mha: &MultiHeadAttention) -> Result<(LatentGrid, StageCache)> {
    let (t, layout) = tokens_of(x, mha)?;
    if cond.last_dim() != mha.wk.d_in() {
        return Err(Error::Shape {
            op: "cross_attention_block",
            left: vec![cond.rows(), mha.wk.d_in()],
            right: cond.shape().to_vec(),
        });
    }
    let (out, cache) = mha.forward(&t, Some(cond), &layout.global_group(cond.rows()))?;
    Ok((grid_of(t.add(&out)?, x)?, StageCache { mha: cache, layout }))
}

/// Returns `(d x, d cond)`.
pub fn cross_attention_block_backward(
    mha: &mut MultiHeadAttention,
    cache: &StageCache,
    dy: &LatentGrid,
    cond_rows: usize,
) -> Result<(LatentGrid, Tensor)> {
    let (dyt, _) = tokens_of(dy, mha)?;
    let (da, dc) = mha.backward(&cache.mha, &dyt, &cache.layout.global_group(cond_rows))?;
    Ok((grid_of(dyt.add(&da)?, dy)?, dc.expect("cross attention")))
}
