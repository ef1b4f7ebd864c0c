//! Deterministic seed derivation.
//!
//! Every stochastic component gets its own substream derived from a user
//! seed plus a fixed purpose tag and position words (core id, neuron index,
//! epoch, ...). Substreams are therefore stable under reordering and
//! parallel evaluation: generating motor unit 7 consumes the same random
//! numbers no matter what happened to motor units 0..6.
//!
//! Derivation folds the words through the splitmix64 finalizer, which is
//! well mixed enough that adjacent seeds and tags land in unrelated
//! streams.

/// Purpose tags. Each consumer of [`derive_seed`] uses a distinct tag so
/// identical position words never collide across subsystems.
pub mod tag {
    pub const MISMATCH: u64 = 0x6d69_736d; // "mism"
    pub const NOISE: u64 = 0x6e6f_6973; // "nois"
    pub const MU_POPULATION: u64 = 0x6d75_706f; // "mupo"
    pub const MU_SPIKES: u64 = 0x6d75_7370; // "musp"
    pub const SHADOW_INIT: u64 = 0x7368_6164; // "shad"
    pub const ROUND: u64 = 0x726f_756e; // "roun"
    pub const TRIAL: u64 = 0x7472_6961; // "tria"
    pub const REPETITION: u64 = 0x7265_7065; // "repe"
    pub const FINGER: u64 = 0x6669_6e67; // "fing"
}

/// One step of the splitmix64 sequence: advance by the Weyl constant and
/// apply the finalizer. Bijective on u64.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a sequence of position words.
///
/// The empty sequence already yields a value different from `base`, so a
/// derived stream never aliases the parent.
pub fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &w in words {
        // Mix the word in before finalizing again; xor alone would make
        // (a ^ x) and (b ^ y) collide whenever a ^ x == b ^ y, but the
        // intermediate finalizer breaks the linearity chain.
        h = splitmix64(h ^ splitmix64(w));
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn distinct_across_words_and_tags() {
        let mut seen = HashSet::new();
        for base in [0u64, 1, 42, u64::MAX] {
            for t in [tag::MISMATCH, tag::NOISE, tag::ROUND] {
                for a in 0..8u64 {
                    for b in 0..8u64 {
                        assert!(seen.insert(derive_seed(base, &[t, a, b])));
                    }
                }
            }
        }
    }

    #[test]
    fn word_order_matters() {
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
    }

    #[test]
    fn stable_values() {
        // Frozen so a refactor cannot silently re-seed every experiment.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(derive_seed(42, &[tag::NOISE, 3]), derive_seed(42, &[tag::NOISE, 3]));
    }
}
