//! Stream ids carved out of a single run seed.
//!
//! Each consumer of randomness draws from its own ChaCha stream so that, for
//! example, adding a pathway never perturbs the batch order.

pub const INIT: u64 = 0;
pub const SHUFFLE: u64 = 1;
pub const SPLIT: u64 = 2;
pub const SYNTH: u64 = 3;
pub const ABLATION: u64 = 4;
pub const HEAD_DROPOUT: u64 = 15;

/// Dropout stream of branch `i` (concatenation order).
pub const fn branch_dropout(i: usize) -> u64 {
    16 + i as u64
}
