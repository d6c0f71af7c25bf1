use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, FnOp};
    use crate::rng;

    #[test]
    fn silu_gradcheck() {
        for seed in 0..20 {
            let mut r = rng::substream(seed, 0, "silu");
            let x = rng::normal_tensor(&mut r, &[4, 3]).scale(3.0);
            let mut op = FnOp::new(
                |i: &[Tensor]| Ok(silu(&i[0])),
                |i: &[Tensor], dy: &Tensor| Ok(vec![silu_backward(&i[0], dy)]),
            );
            assert!(grad_check(&mut op, &[x], 1e-5).unwrap() <= 1e-6);
        }
    }
}
