//! Seeded, counter-based random streams.
//!
//! Built on ChaCha8 (a counter-mode stream cipher): a `(seed, stream)` pair
//! fully determines the sequence on every platform, and [`RngStream::substream`]
//! derives independent child streams by key mixing, so parallel consumers can
//! draw without coordinating.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Element, Tensor};

/// Resumable position of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Independent child stream `k`; drawing from the child never disturbs the
    /// parent, so per-item generation is order-independent.
    pub fn substream(&self, k: u64) -> RngStream {
        Self::with_stream(self.seed, splitmix64(self.stream ^ splitmix64(k.wrapping_add(1))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(state: RngState) -> Self {
        let mut s = Self::with_stream(state.seed, state.stream);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("std must be finite").sample(&mut self.rng)
    }

    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        items.shuffle(&mut self.rng);
    }

    pub fn normal_tensor<T: Element>(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Tensor<T> {
        let n = super::numel(&shape);
        let dist = Normal::new(mean, std).expect("std must be finite");
        let data = (0..n).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect();
        Tensor::leaf(shape, data)
    }

    /// Normal(0, std) resampled until within `2*std` (ViT-style init).
    pub fn trunc_normal_tensor<T: Element>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let n = super::numel(&shape);
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let bound = 2.0 * std;
        let data = (0..n)
            .map(|_| {
                loop {
                    let v = dist.sample(&mut self.rng);
                    if v.abs() <= bound {
                        break T::from_f64(v);
                    }
                }
            })
            .collect();
        Tensor::leaf(shape, data)
    }

    pub fn uniform_tensor<T: Element>(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
        let n = super::numel(&shape);
        let data = (0..n).map(|_| T::from_f64(self.uniform_in(lo, hi))).collect();
        Tensor::leaf(shape, data)
    }
}
