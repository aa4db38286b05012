//! Counter-based random streams.
//!
//! A stream is the triple `(root_seed, stream_id, counter)`. It is a plain
//! value: reconstructing a ChaCha20 generator from the triple always yields
//! the same sequence, so streams can be cloned, stored or handed to worker
//! threads without any shared generator state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{EmoeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub root_seed: u64,
    pub stream_id: u64,
    /// ChaCha word position; advanced by every draw.
    pub counter: u64,
}

/// SplitMix64 finalizer, used to derive child stream ids.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self {
            root_seed,
            stream_id,
            counter: 0,
        }
    }

    /// A fresh child stream whose id is derived from this stream's id and
    /// `label`. The child starts at counter 0 and shares nothing with the
    /// parent except the root seed.
    pub fn child(&self, label: u64) -> Self {
        Self::new(self.root_seed, mix64(self.stream_id ^ mix64(label)))
    }

    fn generator(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.root_seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(u128::from(self.counter));
        rng
    }

    /// Runs `f` against a generator positioned at this stream's counter and
    /// advances the counter past every word `f` consumed.
    pub fn with_rng<R>(&mut self, f: impl FnOnce(&mut ChaCha20Rng) -> R) -> R {
        let mut rng = self.generator();
        let out = f(&mut rng);
        self.counter = rng.get_word_pos() as u64;
        out
    }

    pub fn next_f64(&mut self) -> f64 {
        self.with_rng(|r| r.random::<f64>())
    }

    /// Uniform integer in `lo..hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.with_rng(|r| r.random_range(lo..hi))
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        self.with_rng(|r| (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
    }
}

/// I.i.d. standard-normal tensor drawn from `stream`.
pub fn gaussian(stream: &mut RngStream, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(EmoeError::EmptyShape);
    }
    let n = shape.iter().product();
    Ok(Tensor::from_parts(shape.to_vec(), stream.normal_vec(n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_values() {
        let s = RngStream::new(7, 0);
        let a = gaussian(&mut s.clone(), &[4]).unwrap();
        let b = gaussian(&mut s.clone(), &[4]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn counter_advances_and_continues_sequence() {
        let mut s = RngStream::new(11, 3);
        let first = gaussian(&mut s, &[3]).unwrap();
        assert!(s.counter > 0);
        let second = gaussian(&mut s, &[3]).unwrap();
        let mut whole = RngStream::new(11, 3);
        let joined = gaussian(&mut whole, &[6]).unwrap();
        assert_eq!(&joined.data()[..3], first.data());
        assert_eq!(&joined.data()[3..], second.data());
    }

    #[test]
    fn distinct_streams_differ() {
        let a = gaussian(&mut RngStream::new(1, 0), &[8]).unwrap();
        let b = gaussian(&mut RngStream::new(1, 1), &[8]).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn empty_shape_is_rejected() {
        let mut s = RngStream::new(0, 0);
        assert!(matches!(gaussian(&mut s, &[]), Err(EmoeError::EmptyShape)));
        assert!(matches!(gaussian(&mut s, &[2, 0]), Err(EmoeError::EmptyShape)));
    }

    #[test]
    fn moments_match_standard_normal() {
        let n = 100_000;
        let x = gaussian(&mut RngStream::new(7, 0), &[n]).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        // 3 / sqrt(1e5) ~= 0.0095
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        // sd of the sample variance is sqrt(2/n) ~= 0.0045
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
