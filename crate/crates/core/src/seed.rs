//! Counter-based random streams.
//!
//! Every random draw in the system comes from a ChaCha8 generator seeded by
//! hashing a root seed together with a path of integers, e.g.
//! `(root, [Substream::Train, step, 0])`. Streams never carry state across
//! steps, so resuming from a checkpoint only needs the root seed and the
//! step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Top-level substreams derived from a run's single `--seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Dataset = 1,
    Init = 2,
    Train = 3,
    Eval = 4,
    Augment = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with a path into a new 64-bit seed.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    let mut h = splitmix(root ^ 0x6A09_E667_F3BC_C908);
    for (i, &p) in path.iter().enumerate() {
        h = splitmix(h ^ splitmix(p.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))));
    }
    h
}

pub fn rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}

/// Seed of a named substream of a run seed.
pub fn substream(root: u64, s: Substream) -> u64 {
    derive(root, &[s as u64])
}
