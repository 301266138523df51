//! Counter-based noise streams.
//!
//! Every stream is a ChaCha8 keystream keyed by `(seed, lane)` and selected by
//! `stream_id`, so the numbers a trajectory sees depend only on its own key and
//! never on how trajectories are scheduled across threads.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    lane: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, lane: u64) -> [u8; 32] {
    let mut state = seed ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::with_lane(seed, stream_id, 0)
    }

    pub fn with_lane(seed: u64, stream_id: u64, lane: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(derive_key(seed, lane));
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            lane,
            rng,
        }
    }

    /// An independent stream for the same trajectory (another noise source).
    pub fn lane(&self, lane: u64) -> Self {
        Self::with_lane(self.seed, self.stream_id, lane)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn lane_id(&self) -> u64 {
        self.lane
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn seek(&mut self, counter: u128) {
        self.rng.set_word_pos(counter);
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits in [0, 1).
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fair coin.
    #[inline]
    pub fn sign(&mut self) -> f64 {
        if self.rng.next_u32() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// `n` independent N(0, dt) increments drawn from `stream`.
pub fn wiener_increments(stream: &mut NoiseStream, n: usize, dt: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("wiener_increments needs n >= 1"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("wiener_increments needs dt > 0, got {dt}")));
    }
    let sd = dt.sqrt();
    Ok((0..n).map(|_| sd * stream.normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_have_mean_zero_and_variance_dt() {
        let mut s = NoiseStream::new(11, 3);
        let n = 100_000;
        let dt = 0.01;
        let w = wiener_increments(&mut s, n, dt).unwrap();
        let mean = w.iter().sum::<f64>() / n as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn same_key_same_sequence() {
        let a = wiener_increments(&mut NoiseStream::new(5, 9), 64, 0.1).unwrap();
        let b = wiener_increments(&mut NoiseStream::new(5, 9), 64, 0.1).unwrap();
        assert_eq!(a, b);
        let c = wiener_increments(&mut NoiseStream::new(5, 10), 64, 0.1).unwrap();
        assert_ne!(a, c);
        let d = wiener_increments(&mut NoiseStream::with_lane(5, 9, 1), 64, 0.1).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn seek_replays_the_keystream() {
        let mut s = NoiseStream::new(1, 2);
        let _ = s.normal();
        let pos = s.counter();
        let x: Vec<f64> = (0..10).map(|_| s.normal()).collect();
        s.seek(pos);
        let y: Vec<f64> = (0..10).map(|_| s.normal()).collect();
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut s = NoiseStream::new(0, 0);
        assert!(wiener_increments(&mut s, 0, 0.1).is_err());
        assert!(wiener_increments(&mut s, 3, 0.0).is_err());
        assert!(wiener_increments(&mut s, 3, -1.0).is_err());
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 50_000;
        let a = wiener_increments(&mut NoiseStream::new(3, 0), n, 1.0).unwrap();
        let b = wiener_increments(&mut NoiseStream::new(3, 1), n, 1.0).unwrap();
        let c: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(c.abs() < 4.0 / (n as f64).sqrt(), "corr {c}");
    }
}
