//! Counter-based random stream.
//!
//! Every draw is a pure function of `(key, counter)`:
//!
//! ```text
//! x   = mix64(counter * 0x9E3779B97F4A7C15  XOR  key)
//! out = mix64(x XOR rotl(key, 32))
//! ```
//!
//! where `mix64` is the SplitMix64 finaliser. All arithmetic is wrapping
//! 64-bit integer arithmetic, so the stream is identical on every platform.
//! Named sub-streams are derived with [`Rng::fork`], which hashes the name
//! (FNV-1a) into a fresh key and restarts the counter at zero.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, key: mix64(seed ^ GOLDEN), counter: 0, spare_normal: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sub-stream named `name`. Does not advance `self`.
    pub fn fork(&self, name: &str) -> Rng {
        let key = mix64(self.key ^ fnv1a(name.as_bytes()));
        Rng { seed: self.seed, key, counter: 0, spare_normal: None }
    }

    pub fn fork_index(&self, index: u64) -> Rng {
        let key = mix64(self.key ^ mix64(index.wrapping_add(GOLDEN)));
        Rng { seed: self.seed, key, counter: 0, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = mix64(self.counter.wrapping_mul(GOLDEN) ^ self.key);
        self.counter = self.counter.wrapping_add(1);
        mix64(x ^ self.key.rotate_left(32))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller; the second variate is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
