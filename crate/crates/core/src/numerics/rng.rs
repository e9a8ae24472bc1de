use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Lower clamp for uniforms fed into the Gumbel transform.
pub const GUMBEL_CLAMP: f64 = 1e-12;

/// Deterministic counter-based random stream.
///
/// Backed by ChaCha8: the key comes from `seed`, `stream_id` selects the
/// ChaCha nonce and the position within the stream is the word counter. Two
/// streams with equal `(seed, stream_id, counter)` produce identical draws, and
/// child streams can be derived without touching shared state.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    /// Reopens a stream at an arbitrary word position.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut s = Self::new(seed, stream_id);
        s.rng.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Child stream keyed by `tag`; independent of how much of `self` was used.
    pub fn derive(&self, tag: u64) -> Self {
        Self::new(self.seed, mix(self.stream_id, tag))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// `-ln(-ln v)` with `v` kept inside `[1e-12, 1 - 1e-12]`.
    pub fn gumbel(&mut self) -> f64 {
        gumbel_transform(self.uniform())
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

pub fn gumbel_transform(v: f64) -> f64 {
    let v = v.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-v.ln()).ln()
}

/// SplitMix64-style mixer used to derive stream ids.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for a feature row, used to key per-example streams.
pub fn hash_row(row: &[f64]) -> u64 {
    row.iter().fold(0x243F_6A88_85A3_08D3, |acc, x| mix(acc, x.to_bits()))
}

pub fn sample_standard_normal(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).expect("shape product matches")
}

pub fn sample_gumbel(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gumbel()).collect()).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_draws() {
        let a = sample_standard_normal(&mut RngStream::new(7, 3), &[4, 5]);
        let b = sample_standard_normal(&mut RngStream::new(7, 3), &[4, 5]);
        assert_eq!(a, b);
        let c = sample_standard_normal(&mut RngStream::new(7, 4), &[4, 5]);
        assert_ne!(a, c);
    }

    #[test]
    fn counter_resumes_stream() {
        let mut s = RngStream::new(11, 2);
        let _ = s.normals(10);
        let pos = s.counter();
        let rest = s.normals(5);
        let mut resumed = RngStream::at(11, 2, pos);
        assert_eq!(resumed.normals(5), rest);
    }

    #[test]
    fn gumbel_fixed_point() {
        assert!(gumbel_transform(1.0 / std::f64::consts::E).abs() < 1e-15);
        assert!(gumbel_transform(0.0).is_finite());
        assert!(gumbel_transform(1.0).is_finite());
    }

    #[test]
    fn gumbel_repeatable() {
        let a = sample_gumbel(&mut RngStream::new(1, 1), &[100]);
        let b = sample_gumbel(&mut RngStream::new(1, 1), &[100]);
        assert_eq!(a, b);
    }

    #[test]
    fn derive_is_position_independent() {
        let mut s = RngStream::new(5, 0);
        let child_before = s.derive(9).normals(3);
        let _ = s.normals(100);
        assert_eq!(s.derive(9).normals(3), child_before);
    }
}
