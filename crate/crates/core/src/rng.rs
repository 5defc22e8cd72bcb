//! Named random substreams derived from a single 64-bit master seed.
//!
//! Every consumer of randomness asks for a stream by name (`"dataset"`,
//! `"mc-pi"`, `"mc-phi"`, `"mc-mu0"`, `"init"`, ...). Streams with different
//! names are independent ChaCha streams over the same key, so adding a new
//! consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const DATASET: &str = "dataset";
pub const MC_PI: &str = "mc-pi";
pub const MC_PHI: &str = "mc-phi";
pub const MC_MU0: &str = "mc-mu0";
pub const INIT: &str = "init";
pub const EVAL: &str = "eval";

fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Independent stream `name` under `master`.
pub fn substream(master: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(fnv1a(name));
    rng
}

/// Stream `name` further split by an index (per trajectory, per iteration, ...).
pub fn indexed_substream(master: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name));
    rng
}
