//! Scaled dot-product attention kernel shared by every attention variant.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column window `[offset, offset + width)` of row-major buffers whose rows
/// are `stride` wide. Q, K, V and their gradients all share one layout.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadSlice {
    pub stride: usize,
    pub offset: usize,
    pub width: usize,
}

impl HeadSlice {
    #[inline]
    fn range(&self, row: usize) -> std::ops::Range<usize> {
        let s = row * self.stride + self.offset;
        s..s + self.width
    }
}

/// `out[q_rows] = softmax(Q Kᵀ / √w) V` restricted to the given rows. Writes the
/// row-major `[q_rows.len(), k_rows.len()]` probabilities into `probs`. An
/// empty key set yields zero output rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: HeadSlice,
    q_rows: &[usize],
    k_rows: &[usize],
    out: &mut [f64],
    probs: &mut [f64],
) {
    let nk = k_rows.len();
    debug_assert_eq!(probs.len(), q_rows.len() * nk);
    if nk == 0 {
        for &qr in q_rows {
            out[layout.range(qr)].iter_mut().for_each(|o| *o = 0.0);
        }
        return;
    }
    let scale = 1.0 / (layout.width as f64).sqrt();
    for (a, &qr) in q_rows.iter().enumerate() {
        let qv = &q[layout.range(qr)];
        let p = &mut probs[a * nk..(a + 1) * nk];
        let mut max = f64::NEG_INFINITY;
        for (slot, &kr) in p.iter_mut().zip(k_rows) {
            let kv = &k[layout.range(kr)];
            let s = qv.iter().zip(kv).map(|(x, y)| x * y).sum::<f64>() * scale;
            *slot = s;
            if s > max {
                max = s;
            }
        }
        let mut total = 0.0;
        for slot in p.iter_mut() {
            *slot = (*slot - max).exp();
            total += *slot;
        }
        let inv = 1.0 / total;
        p.iter_mut().for_each(|x| *x *= inv);
        let o = &mut out[layout.range(qr)];
        o.iter_mut().for_each(|x| *x = 0.0);
        for (&w, &kr) in p.iter().zip(k_rows) {
            let vv = &v[layout.range(kr)];
            for (x, y) in o.iter_mut().zip(vv) {
                *x += w * y;
            }
        }
    }
}

/// Accumulates gradients of [`attend_forward`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: HeadSlice,
    q_rows: &[usize],
    k_rows: &[usize],
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let nk = k_rows.len();
    if nk == 0 {
        return;
    }
    let scale = 1.0 / (layout.width as f64).sqrt();
    let mut ds = vec![0.0; nk];
    for (a, &qr) in q_rows.iter().enumerate() {
        let p = &probs[a * nk..(a + 1) * nk];
        let go = &dout[layout.range(qr)];
        let mut inner = 0.0;
        for (b, &kr) in k_rows.iter().enumerate() {
            let vv = &v[layout.range(kr)];
            let dp: f64 = go.iter().zip(vv).map(|(x, y)| x * y).sum();
            ds[b] = dp;
            inner += p[b] * dp;
            for (d, g) in dv[layout.range(kr)].iter_mut().zip(go) {
                *d += p[b] * g;
            }
        }
        let qv = &q[layout.range(qr)];
        for (b, &kr) in k_rows.iter().enumerate() {
            let g = p[b] * (ds[b] - inner) * scale;
            if g == 0.0 {
                continue;
            }
            let kv = &k[layout.range(kr)];
            for (d, x) in dq[layout.range(qr)].iter_mut().zip(kv) {
                *d += g * x;
            }
            for (d, x) in dk[layout.range(kr)].iter_mut().zip(qv) {
                *d += g * x;
            }
        }
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    let d = q.last_dim();
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || d == 0 {
        return Err(Error::Shape {
            op: "attention_core",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if k.last_dim() != d || v.shape() != k.shape() {
        return Err(Error::Shape {
            op: "attention_core",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d) V` with row-max stabilization.
pub fn attention_core(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attention_core_with_probs(q, k, v)?.0)
}

/// Same as [`attention_core`], also returning the `[n, m]` attention weights.
pub fn attention_core_with_probs(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    check_qkv(q, k, v)?;
    let (n, m, d) = (q.rows(), k.rows(), q.last_dim());
    let layout = HeadSlice {
        stride: d,
        offset: 0,
        width: d,
    };
    let q_rows: Vec<usize> = (0..n).collect();
    let k_rows: Vec<usize> = (0..m).collect();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; n * m];
    attend_forward(q.data(), k.data(), v.data(), layout, &q_rows, &k_rows, &mut out, &mut probs);
    Ok((Tensor::new(vec![n, d], out)?, Tensor::new(vec![n, m], probs)?))
}

/// Returns `(dQ, dK, dV)` for upstream gradient `dout`.
pub fn attention_core_backward(q: &Tensor, k: &Tensor, v: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, probs) = attention_core_with_probs(q, k, v)?;
    q.check_same_shape(dout, "attention_core_backward")?;
    let (n, m, d) = (q.rows(), k.rows(), q.last_dim());
    let layout = HeadSlice {
        stride: d,
        offset: 0,
        width: d,
    };
    let q_rows: Vec<usize> = (0..n).collect();
    let k_rows: Vec<usize> = (0..m).collect();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    attend_backward(
        q.data(),
        k.data(),
        v.data(),
        layout,
        &q_rows,
        &k_rows,
        probs.data(),
        dout.data(),
        &mut dq,
        &mut dk,
        &mut dv,
    );
    Ok((
        Tensor::new(vec![n, d], dq)?,
        Tensor::new(vec![m, d], dk)?,
        Tensor::new(vec![m, d], dv)?,
    ))
}
