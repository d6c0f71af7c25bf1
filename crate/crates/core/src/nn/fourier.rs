use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Expands every element `x` into `[sin(2^j π x), cos(2^j π x)]` for
/// `j = 0..bands`, appending a trailing axis of width `2 * bands`.
pub fn fourier_features(x: &Tensor, bands: usize) -> Result<Tensor> {
    if bands == 0 {
        return Err(invalid("fourier_features needs at least one band"));
    }
    let mut data = Vec::with_capacity(x.len() * 2 * bands);
    for &v in x.data() {
        let mut freq = PI;
        for _ in 0..bands {
            let (s, c) = (freq * v).sin_cos();
            data.push(s);
            data.push(c);
            freq *= 2.0;
        }
    }
    let mut shape = x.shape().to_vec();
    shape.push(2 * bands);
    Tensor::new(shape, data)
}

pub fn fourier_features_backward(x: &Tensor, bands: usize, dy: &Tensor) -> Result<Tensor> {
    let mut dx = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let g = &dy.data()[i * 2 * bands..(i + 1) * 2 * bands];
        let mut freq = PI;
        let mut acc = 0.0;
        for j in 0..bands {
            let (s, c) = (freq * v).sin_cos();
            acc += g[2 * j] * freq * c - g[2 * j + 1] * freq * s;
            freq *= 2.0;
        }
        dx.push(acc);
    }
    Tensor::new(x.shape().to_vec(), dx)
}
