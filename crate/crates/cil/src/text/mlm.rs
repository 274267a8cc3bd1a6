//! Masked-language-model corruption of encoded sentences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{MASK, N_SPECIAL};

/// Corrupts an id sequence for reconstruction training. Only ordinary word
/// positions (id at or above the special range) are candidates; each is
/// chosen with probability `mask_prob`, then 80% become `[MASK]`, 10% a
/// random word, 10% stay as they are. Returns the corrupted ids and the
/// `(position, original id)` targets, which include the kept 10%.
///
/// Draws happen left to right, one selection draw per candidate, so the
/// stream of random numbers consumed is a function of the input alone.
pub fn mask_for_mlm(
    ids: &[usize],
    vocab_size: usize,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<(usize, usize)>) {
    assert!((0.0..=1.0).contains(&mask_prob), "mask_prob {mask_prob} out of [0, 1]");
    let mut out = ids.to_vec();
    let mut targets = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if id < N_SPECIAL {
            continue;
        }
        debug_assert!(id < vocab_size, "id {id} outside vocab of {vocab_size}");
        if !rng.gen_bool(mask_prob) {
            continue;
        }
        let action: f64 = rng.gen();
        if action < 0.8 {
            out[i] = MASK;
        } else if action < 0.9 {
            out[i] = rng.gen_range(N_SPECIAL..vocab_size);
        }
        targets.push((i, id));
    }
    (out, targets)
}
