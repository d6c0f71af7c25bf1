use crate::error::Result;
use crate::nn::{silu, silu_backward, Linear};
use crate::rng::Stream;
use crate::tensor::{Params, Parameter, Tensor};

/// Two-layer perceptron with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Stream) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(x)?;
        let act = silu(&pre);
        let out = self.fc2.forward(&act)?;
        Ok((
            out,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Tensor) -> Result<Tensor> {
        let dact = self.fc2.backward(&cache.act, dy)?;
        let dpre = silu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre)
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
