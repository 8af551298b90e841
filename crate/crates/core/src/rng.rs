//! Counter-based random streams.
//!
//! Every random draw in the crate comes from Philox4x32-10 (Salmon et al.,
//! "Parallel random numbers: as easy as 1, 2, 3"). A stream is addressed by
//! `(seed, stream_id, counter)`:
//!
//! * key words: `(seed & 0xffff_ffff, seed >> 32)`
//! * counter words: `(counter & 0xffff_ffff, counter >> 32, stream_id & 0xffff_ffff, stream_id >> 32)`
//!
//! Each block yields four `u32` words which are consumed in order. Derived
//! draws are defined as follows so that other implementations can reproduce
//! them bit for bit:
//!
//! * `next_u64` = `lo | (hi << 32)` of two consecutive words
//! * `uniform` = `(next_u64 >> 11) * 2^-53`, in `[0, 1)`
//! * `bernoulli(p)` = `uniform < p`
//! * `normal` = Box-Muller on `(1 - uniform, uniform)`; the cosine branch is
//!   returned first and the sine branch is cached for the next call.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;
const ROUNDS: usize = 10;

/// Stream-id domains, placed in the top 16 bits of the stream id.
pub mod domain {
    pub const LABELS: u16 = 1;
    pub const FLIPS: u16 = 2;
    pub const THETA: u16 = 3;
    pub const SINGLETON_NOISE: u16 = 4;
    pub const AUXILIARY_NOISE: u16 = 5;
    pub const COMPOUND_NOISE: u16 = 6;
    pub const CLASS_PARAMS: u16 = 7;
    pub const PROMPTS: u16 = 8;
    pub const MONTE_CARLO: u16 = 9;
}

/// Compose a stream id from a domain tag and a 48-bit index.
pub fn stream_id(domain: u16, index: u64) -> u64 {
    debug_assert!(index < (1 << 48));
    (u64::from(domain) << 48) | (index & ((1 << 48) - 1))
}

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32-10 block.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..ROUNDS {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[derive(Debug, Clone)]
pub struct Stream {
    key: [u32; 2],
    stream: u64,
    counter: u64,
    block: [u32; 4],
    used: usize,
    cached_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            stream: stream_id,
            counter: 0,
            block: [0; 4],
            used: 4,
            cached_normal: None,
        }
    }

    pub fn for_domain(seed: u64, domain: u16, index: u64) -> Self {
        Self::new(seed, stream_id(domain, index))
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            let ctr = [
                self.counter as u32,
                (self.counter >> 32) as u32,
                self.stream as u32,
                (self.stream >> 32) as u32,
            ];
            self.block = philox4x32_10(ctr, self.key);
            self.counter = self.counter.wrapping_add(1);
            self.used = 0;
        }
        let w = self.block[self.used];
        self.used += 1;
        w
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        lo | (hi << 32)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n` by `floor(uniform * n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors shipped with Random123.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut s = Stream::new(7, 3);
            (0..10).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = Stream::new(7, 3);
            (0..10).map(|_| s.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut s = Stream::new(7, 4);
            (0..10).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn first_words_come_from_counter_zero() {
        let mut s = Stream::new(0, 0);
        let words: Vec<u32> = (0..4).map(|_| s.next_u32()).collect();
        assert_eq!(words, philox4x32_10([0; 4], [0; 2]).to_vec());
    }

    #[test]
    fn uniform_moments() {
        let mut s = Stream::new(11, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (1.0 / 12.0f64 / n as f64).sqrt() * 2.0);
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(5, 9);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }
}
