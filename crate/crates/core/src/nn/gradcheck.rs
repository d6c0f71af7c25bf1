//! Central finite-difference gradient checking.
//!
//! The scalar objective is `Σ c ⊙ op(inputs)` for a fixed pseudo-random
//! cotangent `c`; a plain sum would make normalization layers look constant.
//! The error for each input tensor is
//! `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖, 1e-12)`, and the checker returns the
//! maximum over inputs.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub trait Differentiable {
    fn forward(&mut self, inputs: &[Tensor]) -> Result<Tensor>;
    /// Gradients of `Σ grad_out ⊙ forward(inputs)` with respect to each input.
    fn backward(&mut self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>>;
}

/// Adapts a pair of closures into a [`Differentiable`].
pub struct FnOp<F, B> {
    forward: F,
    backward: B,
}

impl<F, B> FnOp<F, B>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
    B: FnMut(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    pub fn new(forward: F, backward: B) -> Self {
        Self { forward, backward }
    }
}

impl<F, B> Differentiable for FnOp<F, B>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
    B: FnMut(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn forward(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }
    fn backward(&mut self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        (self.backward)(inputs, grad_out)
    }
}

/// Per-input relative errors plus their maximum.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
    pub max: f64,
}

pub fn grad_check(op: &mut dyn Differentiable, inputs: &[Tensor], h: f64) -> Result<f64> {
    Ok(grad_check_report(op, inputs, h)?.max)
}

pub fn grad_check_report(op: &mut dyn Differentiable, inputs: &[Tensor], h: f64) -> Result<GradCheckReport> {
    let y = op.forward(inputs)?;
    y.ensure_finite("grad_check forward")?;
    let mut crng = rng::substream(0x5eed, y.len() as u64, "gradcheck-cotangent");
    let cot = rng::normal_tensor(&mut crng, y.shape());
    let analytic = op.backward(inputs, &cot)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Invalid(format!(
            "backward returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        inputs[idx].check_same_shape(grad, "grad_check")?;
        grad.ensure_finite("grad_check backward")?;
        let mut fd = vec![0.0; grad.len()];
        for (e, slot) in fd.iter_mut().enumerate() {
            let orig = work[idx].data()[e];
            work[idx].data_mut()[e] = orig + h;
            let plus = op.forward(&work)?;
            work[idx].data_mut()[e] = orig - h;
            let minus = op.forward(&work)?;
            work[idx].data_mut()[e] = orig;
            plus.ensure_finite("grad_check perturbed forward")?;
            minus.ensure_finite("grad_check perturbed forward")?;
            *slot = (plus.dot(&cot)? - minus.dot(&cot)?) / (2.0 * h);
        }
        let fd = Tensor::new(grad.shape().to_vec(), fd)?;
        let diff = grad.sub(&fd)?.norm();
        let denom = grad.norm().max(fd.norm()).max(1e-12);
        per_input.push(diff / denom);
    }
    let max = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { per_input, max })
}
