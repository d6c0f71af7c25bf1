use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Params, Parameter, Tensor};

/// `y = x W + b` over the trailing axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_linear(x, w, b)?;
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let n = x.rows();
    let mut out = vec![0.0; n * d_out];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        orow.copy_from_slice(bd);
        let xrow = &xd[i * d_in..(i + 1) * d_in];
        for (p, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[p * d_out..(p + 1) * d_out];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

/// Returns `(dx, dW, db)`; weight gradients are skipped when `want_params` is false.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != d_in || dy.last_dim() != d_out || x.rows() != dy.rows() {
        return Err(Error::Shape {
            op: "linear_backward",
            left: x.shape().to_vec(),
            right: dy.shape().to_vec(),
        });
    }
    let n = x.rows();
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; n * d_in];
    for i in 0..n {
        let grow = &gd[i * d_out..(i + 1) * d_out];
        let dxrow = &mut dx[i * d_in..(i + 1) * d_in];
        for (p, slot) in dxrow.iter_mut().enumerate() {
            let wrow = &wd[p * d_out..(p + 1) * d_out];
            *slot = grow.iter().zip(wrow).map(|(g, w)| g * w).sum();
        }
    }
    let params = if want_params {
        let mut dw = vec![0.0; d_in * d_out];
        let mut db = vec![0.0; d_out];
        for i in 0..n {
            let grow = &gd[i * d_out..(i + 1) * d_out];
            for (b, g) in db.iter_mut().zip(grow) {
                *b += g;
            }
            let xrow = &xd[i * d_in..(i + 1) * d_in];
            for (p, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let dwrow = &mut dw[p * d_out..(p + 1) * d_out];
                for (d, g) in dwrow.iter_mut().zip(grow) {
                    *d += xv * g;
                }
            }
        }
        Some((
            Tensor::new(vec![d_in, d_out], dw)?,
            Tensor::new(vec![d_out], db)?,
        ))
    } else {
        None
    };
    Ok((Tensor::new(x.shape().to_vec(), dx)?, params))
}

fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    if w.rank() != 2 {
        return Err(Error::Shape {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if x.last_dim() != w.shape()[0] {
        return Err(Error::Shape {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape() != [w.shape()[1]] {
        return Err(Error::Shape {
            op: "linear(bias)",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut Stream) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = Tensor::from_fn(&[d_in, d_out], |_| rng::uniform(rng, -limit, limit));
        Self {
            weight: Parameter::new(format!("{name}.weight"), w),
            bias: Parameter::zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    /// All-zero projection; used for residual branches that must start inert.
    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Parameter::zeros(format!("{name}.weight"), &[d_in, d_out]),
            bias: Parameter::zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let want = self.weight.requires_grad || self.bias.requires_grad;
        let (dx, params) = linear_backward(x, &self.weight.value, dy, want)?;
        if let Some((dw, db)) = params {
            if self.weight.requires_grad {
                self.weight.grad.axpy(1.0, &dw)?;
            }
            if self.bias.requires_grad {
                self.bias.grad.axpy(1.0, &db)?;
            }
        }
        Ok(dx)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
