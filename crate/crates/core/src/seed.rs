//! Labeled seed streams.
//!
//! Every stochastic choice in a run draws from its own stream, derived from the
//! master seed, a stream label and a list of indices (round, client, ...):
//!
//! ```text
//! seed = mix(mix(mix(master ^ fnv1a(label)) ^ i0) ^ i1) ...
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Streams used by the simulator:
//! `init`, `split`, `partition`, `poison/<client>`, `benign/<round>/<client>`,
//! `malicious/<round>/<client>`, `participants/<round>`, `aggregate/<round>`,
//! `csft`, `sweep/<repeat>`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive a child seed from `master` for the stream `label` at `indices`.
pub fn derive(master: u64, label: &str, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(splitmix(master ^ fnv1a(label)), |s, &i| splitmix(s ^ i))
}

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let a = derive(1, "benign", &[0, 1]);
        let b = derive(1, "benign", &[1, 0]);
        let c = derive(1, "malicious", &[0, 1]);
        let d = derive(2, "benign", &[0, 1]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, derive(1, "benign", &[0, 1]));
    }
}
