//! Deterministic random-number streams.
//!
//! Every stochastic stage derives its generator from a master seed plus a
//! `(domain, index)` pair instead of sharing one sequential generator. Each
//! `(seed, domain, index)` triple names an independent ChaCha12 stream, so
//!
//! * reruns with the same seed are byte-identical,
//! * parallel replicates can be computed in any order or on any number of
//!   threads without changing results, and
//! * adding draws to one stage never perturbs another.
//!
//! The 32-byte ChaCha key is the little-endian concatenation
//! `[seed, domain, index, 0x5eed_cafe_f00d_0001]`; the final word separates
//! this scheme from any other ChaCha use of the same seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stage labels for stream derivation. The numeric values are part of the
/// output-stability contract: renumbering changes every downstream draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Market generation (one index per loan block).
    Simulate = 1,
    /// Repayment imputation for unfunded or censored loans.
    Impute = 2,
    /// Bootstrap resampling and per-replicate refits.
    Bootstrap = 3,
    /// Posterior sampling chains.
    Sampler = 4,
    /// Miscellaneous test fixtures.
    Fixture = 99,
}

/// Derive the generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&0x5eed_cafe_f00d_0001u64.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, Domain::Impute, 3);
        let mut b = stream(7, Domain::Impute, 3);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ_across_domain_and_index() {
        let mut base = stream(7, Domain::Impute, 3);
        for (d, i) in [
            (Domain::Impute, 4),
            (Domain::Bootstrap, 3),
            (Domain::Simulate, 3),
        ] {
            let mut other = stream(7, d, i);
            assert_ne!(base.next_u64(), other.next_u64());
        }
    }
}
