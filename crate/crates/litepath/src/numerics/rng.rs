/// Counter-based deterministic random generator.
///
/// The core is the SplitMix64 sequence: the state walks the integers
/// `seed, seed+GAMMA, seed+2*GAMMA, ...` (wrapping) and each output is a
/// fixed avalanche mix of the current counter value. The stream for a given
/// seed is therefore a pure function of (seed, call index) and bit-identical
/// on every platform; floating-point derivations below use only IEEE
/// arithmetic and `libm`, which is pure Rust.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    spare_normal: Option<f64>,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            state: seed,
            spare_normal: None,
        }
    }

    /// Deterministic substream: the same (seed, label) pair always yields the
    /// same stream. Used for per-slide / per-replicate generators.
    pub fn derive(&self, label: u64) -> SeededRng {
        SeededRng::new(mix(self.state ^ mix(label.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; used where a log of the draw is taken.
    fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) by rejection, free of modulo bias.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; the second draw of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Normal truncated to two standard deviations, then scaled by `sigma`.
    /// This is the initializer distribution for all linear weights.
    pub fn truncated_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}
