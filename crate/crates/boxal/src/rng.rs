//! Deterministic random streams.
//!
//! Every stochastic step derives its own ChaCha8 stream from the run seed
//! plus a purpose tag and entity indices (cycle, image id, object index).
//! Streams are therefore independent of processing order: simulating image
//! 7 before image 3 draws exactly the same numbers for both, which is what
//! makes reports byte-identical across runs and safe to parallelize.
//!
//! Only `u64` and `f64` sampling paths are used. The f64 path is the
//! 53-bit mantissa conversion and the jitter distribution is triangular
//! (sum of two uniforms), so no transcendental functions sit between the
//! generator and the sampled values.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One deterministic random stream.
pub type Stream = ChaCha8Rng;

/// splitmix64 finalizer: a full-avalanche 64-bit mix.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from `seed` and a tag path.
///
/// Tags are folded through splitmix64 one at a time, so distinct paths
/// (e.g. `[DETECT, cycle, image_id, object]` vs `[EVAL, image_id, object]`)
/// land on unrelated ChaCha8 key schedules.
pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    let mut h = mix64(seed ^ 0xA076_1D64_78BD_642F);
    for &t in tags {
        h = mix64(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_in(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Symmetric triangular draw on `(-1, 1)` with mode 0.
pub fn triangular(rng: &mut Stream) -> f64 {
    rng.random::<f64>() + rng.random::<f64>() - 1.0
}

/// Uniform index in `[0, n)`. `n` must be nonzero.
pub fn index(rng: &mut Stream, n: usize) -> usize {
    rng.random_range(0..n as u64) as usize
}

/// Poisson draw via Knuth's product-of-uniforms method.
///
/// Suitable for the small rates used here (object counts, false-positive
/// counts); runtime is O(lambda).
pub fn poisson(rng: &mut Stream, lambda: f64) -> u64 {
    debug_assert!((0.0..64.0).contains(&lambda), "small-rate sampler");
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0u64;
    let mut product = rng.random::<f64>();
    while product > limit {
        k += 1;
        product *= rng.random::<f64>();
    }
    k
}

/// Uniform sample of `k` distinct indices from `[0, n)`, in draw order.
///
/// Partial Fisher-Yates over an explicit index table; `k > n` is clamped
/// to `n`.
pub fn sample_indices(rng: &mut Stream, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut table: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + index(rng, n - i);
        table.swap(i, j);
    }
    table.truncate(k);
    table
}
