use crate::error::{Error, Result};
use crate::tensor::{Params, Parameter, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LnCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

/// Normalizes each trailing-axis row to zero mean and unit (population)
/// variance, then applies `gamma * xhat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LnCache)> {
    let d = x.last_dim();
    if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let n = x.rows();
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    let mut rstd = Vec::with_capacity(n);
    let (g, b) = (gamma.data(), beta.data());
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = if var + eps > 0.0 { 1.0 / (var + eps).sqrt() } else { 0.0 };
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = g[j] * h + b[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LnCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            rstd,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LnCache, gamma: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    cache.xhat.check_same_shape(dy, "layer_norm_backward")?;
    let d = dy.last_dim();
    let n = dy.rows();
    let g = gamma.data();
    let mut dx = vec![0.0; n * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let gy = dy.row(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..d {
            dgamma[j] += gy[j] * xh[j];
            dbeta[j] += gy[j];
            dxhat[j] = gy[j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![d], dgamma)?,
        Tensor::new(vec![d], dbeta)?,
    ))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: Parameter::zeros(format!("{name}.beta"), &[d]),
            eps: DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LnCache)> {
        layer_norm(x, &self.gamma.value, &self.beta.value, self.eps)
    }

    pub fn backward(&mut self, cache: &LnCache, dy: &Tensor) -> Result<Tensor> {
        let (dx, dg, db) = layer_norm_backward(cache, &self.gamma.value, dy)?;
        if self.gamma.requires_grad {
            self.gamma.grad.axpy(1.0, &dg)?;
        }
        if self.beta.requires_grad {
            self.beta.grad.axpy(1.0, &db)?;
        }
        Ok(dx)
    }
}

impl Params for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, FnOp};
    use crate::rng;

    #[test]
    fn constant_row_maps_to_zero() {
        let x = Tensor::from_rows(&[vec![4.2, 4.2, 4.2]]);
        let (y, _) = layer_norm(&x, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3]), DEFAULT_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_row() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let (y, _) = layer_norm(&x, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3]), 0.0).unwrap();
        let expect = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut r = rng::substream(seed, 0, "ln");
            let x = rng::normal_tensor(&mut r, &[3, 6]);
            let g = rng::normal_tensor(&mut r, &[6]);
            let b = rng::normal_tensor(&mut r, &[6]);
            let mut op = FnOp::new(
                |i: &[Tensor]| Ok(layer_norm(&i[0], &i[1], &i[2], DEFAULT_EPS)?.0),
                |i: &[Tensor], dy: &Tensor| {
                    let (_, c) = layer_norm(&i[0], &i[1], &i[2], DEFAULT_EPS)?;
                    let (dx, dg, db) = layer_norm_backward(&c, &i[1], dy)?;
                    Ok(vec![dx, dg, db])
                },
            );
            let err = grad_check(&mut op, &[x, g, b], 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }
}
