use crate::error::{invalid, Result};
use crate::nn::attention::{attend_backward, attend_forward, HeadSlice};
use crate::nn::Linear;
use crate::rng::Stream;
use crate::tensor::{Params, Parameter, Tensor};

/// One attention sequence: query rows attend over key rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

impl AttnGroup {
    pub fn square(rows: Vec<usize>) -> Self {
        Self {
            keys: rows.clone(),
            queries: rows,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MhaCache {
    xq: Tensor,
    xkv: Option<Tensor>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ctx: Tensor,
    /// Probabilities per (group, head), in forward order.
    probs: Vec<Vec<f64>>,
}

impl MultiHeadAttention {
    pub fn new(name: &str, d: usize, heads: usize, rng: &mut Stream) -> Result<Self> {
        Self::with_kv_dim(name, d, d, heads, rng)
    }

    pub fn with_kv_dim(name: &str, d: usize, d_kv: usize, heads: usize, rng: &mut Stream) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(invalid(format!("d_model {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(&format!("{name}.q"), d, d, rng),
            wk: Linear::new(&format!("{name}.k"), d_kv, d, rng),
            wv: Linear::new(&format!("{name}.v"), d_kv, d, rng),
            wo: Linear::new(&format!("{name}.o"), d, d, rng),
            heads,
        })
    }

    /// Replaces the output projection with zeros so the block starts as identity.
    pub fn zero_output(mut self) -> Self {
        let name = self.wo.weight.name.trim_end_matches(".weight").to_string();
        self.wo = Linear::zeros(&name, self.wo.d_in(), self.wo.d_out());
        self
    }

    fn layout(&self, h: usize) -> HeadSlice {
        let d = self.wq.d_out();
        let width = d / self.heads;
        HeadSlice {
            stride: d,
            offset: h * width,
            width,
        }
    }

    /// Attention of `xq` rows over `xkv` rows (or `xq` itself when `xkv` is
    /// `None`) within each group.
    pub fn forward(&self, xq: &Tensor, xkv: Option<&Tensor>, groups: &[AttnGroup]) -> Result<(Tensor, MhaCache)> {
        let src = xkv.unwrap_or(xq);
        let q = self.wq.forward(xq)?;
        let k = self.wk.forward(src)?;
        let v = self.wv.forward(src)?;
        let d = q.last_dim();
        let mut ctx = vec![0.0; xq.rows() * d];
        let mut probs = Vec::with_capacity(groups.len() * self.heads);
        for g in groups {
            for h in 0..self.heads {
                let mut p = vec![0.0; g.queries.len() * g.keys.len()];
                attend_forward(
                    q.data(),
                    k.data(),
                    v.data(),
                    self.layout(h),
                    &g.queries,
                    &g.keys,
                    &mut ctx,
                    &mut p,
                );
                probs.push(p);
            }
        }
        let ctx = Tensor::new(vec![xq.rows(), d], ctx)?;
        let out = self.wo.forward(&ctx)?;
        Ok((
            out,
            MhaCache {
                xq: xq.clone(),
                xkv: xkv.cloned(),
                q,
                k,
                v,
                ctx,
                probs,
            },
        ))
    }

    /// Returns `(d xq, d xkv)`; for self-attention the second is `None` and
    /// already folded into the first.
    pub fn backward(&mut self, cache: &MhaCache, dy: &Tensor, groups: &[AttnGroup]) -> Result<(Tensor, Option<Tensor>)> {
        let dctx = self.wo.backward(&cache.ctx, dy)?;
        let mut dq = vec![0.0; cache.q.len()];
        let mut dk = vec![0.0; cache.k.len()];
        let mut dv = vec![0.0; cache.v.len()];
        let mut idx = 0;
        for g in groups {
            for h in 0..self.heads {
                attend_backward(
                    cache.q.data(),
                    cache.k.data(),
                    cache.v.data(),
                    self.layout(h),
                    &g.queries,
                    &g.keys,
                    &cache.probs[idx],
                    dctx.data(),
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                idx += 1;
            }
        }
        let dq = Tensor::new(cache.q.shape().to_vec(), dq)?;
        let dk = Tensor::new(cache.k.shape().to_vec(), dk)?;
        let dv = Tensor::new(cache.v.shape().to_vec(), dv)?;
        let src = cache.xkv.as_ref().unwrap_or(&cache.xq);
        let mut dxq = self.wq.backward(&cache.xq, &dq)?;
        let mut dsrc = self.wk.backward(src, &dk)?;
        dsrc.axpy(1.0, &self.wv.backward(src, &dv)?)?;
        if cache.xkv.is_none() {
            dxq.axpy(1.0, &dsrc)?;
            Ok((dxq, None))
        } else {
            Ok((dxq, Some(dsrc)))
        }
    }
}

impl Params for MultiHeadAttention {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attention_core;
    use crate::nn::gradcheck::{grad_check, FnOp};
    use crate::rng;

    #[test]
    fn single_head_single_group_matches_core() {
        let mut r = rng::substream(3, 0, "mha");
        let mha = MultiHeadAttention::new("m", 4, 1, &mut r).unwrap();
        let x = rng::normal_tensor(&mut r, &[5, 4]);
        let (out, _) = mha.forward(&x, None, &[AttnGroup::square((0..5).collect())]).unwrap();
        let q = mha.wq.forward(&x).unwrap();
        let k = mha.wk.forward(&x).unwrap();
        let v = mha.wv.forward(&x).unwrap();
        let ctx = attention_core(&q, &k, &v).unwrap();
        let expect = mha.wo.forward(&ctx).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut r = rng::substream(0, 0, "mha");
        assert!(MultiHeadAttention::new("m", 6, 4, &mut r).is_err());
    }

    #[test]
    fn cross_attention_gradients() {
        for seed in 0..20 {
            let mut r = rng::substream(seed, 0, "mha-fd");
            let base = MultiHeadAttention::with_kv_dim("m", 4, 3, 2, &mut r).unwrap();
            let xq = rng::normal_tensor(&mut r, &[5, 4]);
            let xkv = rng::normal_tensor(&mut r, &[3, 3]);
            let groups = vec![
                AttnGroup {
                    queries: vec![0, 2, 4],
                    keys: vec![0, 1],
                },
                AttnGroup {
                    queries: vec![1, 3],
                    keys: vec![1, 2],
                },
            ];
            let g2 = groups.clone();
            let b2 = base.clone();
            let mut op = FnOp::new(
                move |i: &[Tensor]| Ok(base.forward(&i[0], Some(&i[1]), &groups)?.0),
                move |i: &[Tensor], dy: &Tensor| {
                    let mut m = b2.clone();
                    let (_, c) = m.forward(&i[0], Some(&i[1]), &g2)?;
                    let (a, b) = m.backward(&c, dy, &g2)?;
                    Ok(vec![a, b.unwrap()])
                },
            );
            let err = grad_check(&mut op, &[xq, xkv], 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut r = rng::substream(seed, 1, "mha-w");
            let base = MultiHeadAttention::new("m", 4, 2, &mut r).unwrap();
            let x = rng::normal_tensor(&mut r, &[4, 4]);
            let groups = vec![AttnGroup::square(vec![0, 1, 2, 3])];
            let build = |w: &[Tensor]| {
                let mut m = base.clone();
                m.wq.weight.value = w[0].clone();
                m.wk.weight.value = w[1].clone();
                m.wv.weight.value = w[2].clone();
                m.wo.weight.value = w[3].clone();
                m
            };
            let g2 = groups.clone();
            let x2 = x.clone();
            let mut op = FnOp::new(
                |w: &[Tensor]| Ok(build(w).forward(&x, None, &groups)?.0),
                |w: &[Tensor], dy: &Tensor| {
                    let mut m = build(w);
                    let (_, c) = m.forward(&x2, None, &g2)?;
                    m.backward(&c, dy, &g2)?;
                    Ok(vec![
                        m.wq.weight.grad.clone(),
                        m.wk.weight.grad.clone(),
                        m.wv.weight.grad.clone(),
                        m.wo.weight.grad.clone(),
                    ])
                },
            );
            let inputs = [
                base.wq.weight.value.clone(),
                base.wk.weight.value.clone(),
                base.wv.weight.value.clone(),
                base.wo.weight.value.clone(),
            ];
            let err = grad_check(&mut op, &inputs, 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }
}
