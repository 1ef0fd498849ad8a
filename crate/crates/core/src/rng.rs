//! Counter-based random streams.
//!
//! Every draw is keyed on `(seed, domain, slice, index)`, so the value a
//! particle sees never depends on evaluation order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent stream families sharing one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Sample = 1,
    Noise = 2,
    Centers = 3,
    Target = 4,
}

/// Stream for one `(seed, domain, slice, index)` key.
pub fn stream(seed: u64, domain: Domain, slice: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix(seed ^ splitmix(domain as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(splitmix(slice).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng
}

/// Fills `out` with standard normal draws from the keyed stream.
pub fn fill_normal(seed: u64, domain: Domain, slice: u64, index: u64, out: &mut [f64]) {
    let mut rng = stream(seed, domain, slice, index);
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
