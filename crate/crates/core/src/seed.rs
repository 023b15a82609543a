//! Deterministic RNG stream derivation.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by the
//! experiment seed plus a tuple of tags (client, frame, round, purpose), so
//! the order in which clients are evaluated never changes the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Position = 1,
    Shadowing = 2,
    ComputeDelay = 3,
    Training = 4,
    Replay = 5,
    Samples = 6,
    Policy = 7,
    ModelInit = 8,
    Scenario = 9,
    Evaluation = 10,
    ClassMeans = 11,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of tags into a new 64-bit seed.
pub fn derive(base: u64, stream: Stream, tags: &[u64]) -> u64 {
    let mut h = splitmix(base ^ (stream as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    for &t in tags {
        h = splitmix(h ^ t.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(base: u64, stream: Stream, tags: &[u64]) -> ChaCha8Rng {
    rng(derive(base, stream, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(7, Stream::Training, &[1, 2, 3]).random();
        let b: u64 = stream_rng(7, Stream::Training, &[1, 2, 3]).random();
        let c: u64 = stream_rng(7, Stream::Training, &[1, 2, 4]).random();
        let d: u64 = stream_rng(7, Stream::Shadowing, &[1, 2, 3]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
