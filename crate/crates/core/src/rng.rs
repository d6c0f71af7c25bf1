//! Counter-based random streams.
//!
//! Every consumer of randomness asks for a substream keyed by
//! `(seed, item id, purpose)`. The key selects a ChaCha stream id, so draws for
//! one scene never depend on how many draws another scene consumed, and
//! parallel work is order-independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type Stream = ChaCha8Rng;

pub fn substream(seed: u64, item: u64, purpose: &str) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix64(item ^ fnv1a64(purpose.as_bytes()).rotate_left(17)));
    rng
}

/// Derives a fresh stream from an existing one without disturbing it.
pub fn child(parent: &Stream, label: u64) -> Stream {
    let mut rng = ChaCha8Rng::from_seed(parent.get_seed());
    rng.set_stream(mix64(parent.get_stream() ^ mix64(label.wrapping_add(0x9E37_79B9_7F4A_7C15))));
    rng
}

pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| normal(rng))
}

pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
