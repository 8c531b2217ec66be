//! Counter-based deterministic random streams.
//!
//! Output `i` of a stream is a pure function of `(seed, stream-id, i)`, so
//! identical seeds reproduce identical tensors regardless of what other
//! streams were consumed in between. Per-purpose streams are derived by
//! hashing a label, which keeps initialization, masking and corruption
//! draws independent of each other.

use crate::tensor::{elem, Element, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; bijective on u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; used to derive stream ids from purposes.
pub fn stream_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Deterministic counter-based generator.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        // Decorrelate seed and stream before combining so (s, t) and (t, s)
        // produce unrelated keys.
        let key = mix(seed ^ mix(stream.wrapping_add(GOLDEN)));
        Rng { key, counter: 0 }
    }

    pub fn from_label(seed: u64, label: &str) -> Self {
        Rng::new(seed, stream_id(label))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n) via multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (consumes two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal truncated to two standard deviations, rescaled by `std`.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Poisson draw by Knuth's product method; adequate for the small rates
    /// used by shot noise.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        let l = (-lambda).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= self.next_f64();
            if p <= l {
                return k;
            }
            k += 1;
        }
    }

    /// Fisher-Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
        v
    }

    /// k distinct indices sampled uniformly from 0..n, in draw order.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p = self.permutation(n);
        p.truncate(k);
        p
    }

    pub fn tensor_uniform<T: Element>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| elem(self.uniform(lo, hi)))
    }

    pub fn tensor_normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| elem(self.normal() * std))
    }

    pub fn tensor_trunc_normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| elem(self.trunc_normal(std)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_is_bit_identical() {
        let mut a = Rng::new(7, 3);
        let mut b = Rng::new(7, 3);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta: Tensor<f32> = Rng::new(9, 1).tensor_normal(&[64], 0.02);
        let tb: Tensor<f32> = Rng::new(9, 1).tensor_normal(&[64], 0.02);
        assert_eq!(ta, tb);
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::from_label(7, "init/a");
        let mut b = Rng::from_label(7, "init/b");
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_in_range() {
        let mut r = Rng::new(1, 1);
        for _ in 0..1000 {
            let v = r.uniform(-0.25, 0.25);
            assert!((-0.25..0.25).contains(&v));
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = Rng::new(11, 4);
        let p = r.permutation(100);
        let mut seen = vec![false; 100];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn poisson_mean_is_close() {
        let mut r = Rng::new(5, 5);
        let n = 20000;
        let mean: f64 = (0..n).map(|_| r.poisson(4.0) as f64).sum::<f64>() / n as f64;
        assert!((mean - 4.0).abs() < 0.1, "poisson mean {mean}");
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = Rng::new(2, 9);
        let n = 20000;
        let samples: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.1);
    }
}
