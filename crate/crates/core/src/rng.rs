use rand::{Rng, RngCore, SeedableRng};
use rand_pcg::Pcg32;

/// PCG32 (XSH-RR, 64-bit state, 64-bit stream selector).
///
/// Streams give independent per-ray substreams: the same `(seed, stream)`
/// pair always yields the same sequence on every platform.
#[derive(Debug, Clone)]
pub struct Prng(Pcg32);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Prng(Pcg32::new(seed, stream))
    }

    /// Derives a child generator keyed by `stream`, consuming one draw.
    pub fn fork(&mut self, stream: u64) -> Self {
        let seed = self.0.next_u64();
        Self::with_stream(seed, stream)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
}

impl RngCore for Prng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

impl SeedableRng for Prng {
    type Seed = <Pcg32 as SeedableRng>::Seed;
    fn from_seed(seed: Self::Seed) -> Self {
        Prng(Pcg32::from_seed(seed))
    }
}
