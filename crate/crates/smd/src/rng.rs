//! Counter-based random streams for reproducible simulation.
//!
//! Every draw is a pure function of a stream key and a 64-bit counter, so
//! streams support O(1) random access, cheap splitting into independent child
//! streams, and output that cannot depend on thread scheduling. A normal
//! variate consumes exactly two counter slots; consumption is never
//! data-dependent, which keeps stream positions deterministic.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer; bijective avalanche mix on u64.
#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A random stream addressed by a counter. Copyable; copies share no state.
#[derive(Clone, Copy, Debug)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
}

impl CounterRng {
    /// Root stream for a user seed. Nearby seeds give unrelated streams.
    pub fn from_seed(seed: u64) -> Self {
        Self { key: mix64(seed ^ GOLDEN), ctr: 0 }
    }

    /// Independent child stream for `index`. Splitting commutes with nothing:
    /// the child's draws are unrelated to the parent's and to other indices.
    pub fn split(&self, index: u64) -> Self {
        Self { key: mix64(self.key.wrapping_add(mix64(index.wrapping_add(GOLDEN)))), ctr: 0 }
    }

    /// The value at counter slot `ctr`, independent of the stream position.
    #[inline(always)]
    pub fn u64_at(&self, ctr: u64) -> u64 {
        mix64(self.key.wrapping_add(ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform in (0, 1] at slot `ctr` (strictly positive: safe under log).
    #[inline(always)]
    pub fn unit_at(&self, ctr: u64) -> f64 {
        ((self.u64_at(ctr) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw number `n`; occupies counter slots 2n and 2n+1.
    ///
    /// Box-Muller on two uniforms with fixed consumption. The sine twin is
    /// discarded so that draw `n` never depends on draw parity.
    #[inline(always)]
    pub fn normal_at(&self, n: u64) -> f64 {
        let u1 = self.unit_at(2 * n);
        let u2 = self.unit_at(2 * n + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sequential draw; equals `u64_at` of the current position.
    #[inline(always)]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.u64_at(self.ctr);
        self.ctr += 1;
        v
    }

    /// Sequential uniform in (0, 1].
    #[inline(always)]
    pub fn next_unit(&mut self) -> f64 {
        let v = self.unit_at(self.ctr);
        self.ctr += 1;
        v
    }

    /// Sequential standard normal; consumes the next two counter slots.
    #[inline(always)]
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, bound) by multiply-shift; bound must be > 0.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}
