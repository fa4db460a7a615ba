//! Named, reproducible random streams.
//!
//! Every consumer of randomness (weight init, head init, shuffling,
//! augmentation, dropout, subsampling) draws from its own ChaCha8 stream keyed
//! by `(seed, purpose, index)`. Streams never share state, so adding heads to a
//! model cannot perturb the numbers the backbone sees.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Purpose of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamId {
    BackboneInit = 1,
    HeadInit = 2,
    Shuffle = 3,
    Augment = 4,
    Dropout = 5,
    Subsample = 6,
}

impl StreamId {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => StreamId::BackboneInit,
            2 => StreamId::HeadInit,
            3 => StreamId::Shuffle,
            4 => StreamId::Augment,
            5 => StreamId::Dropout,
            6 => StreamId::Subsample,
            _ => return None,
        })
    }
}

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: StreamId,
    pub index: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngStream {
    seed: u64,
    stream_id: StreamId,
    index: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: StreamId) -> Self {
        Self::derived(seed, stream_id, 0)
    }

    /// A stream for one member of a family, e.g. the shuffle order of a given
    /// epoch. Index occupies the upper 56 bits of the ChaCha stream nonce.
    pub fn derived(seed: u64, stream_id: StreamId, index: u64) -> Self {
        assert!(index < (1 << 56), "stream index out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((index << 8) | stream_id as u64);
        Self {
            seed,
            stream_id,
            index,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> StreamId {
        self.stream_id
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            index: self.index,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Result<Self> {
        if state.index >= (1 << 56) {
            return Err(Error::arg("rng stream index out of range"));
        }
        let mut s = Self::derived(state.seed, state.stream_id, state.index);
        s.rng.set_word_pos(state.word_pos);
        Ok(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
