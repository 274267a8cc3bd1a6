//! Fixed-length id sequences with entity markers. Layout:
//!
//! ```text
//! [CLS] w .. [H-CLS] head .. [H-SEP] w .. [T-CLS] tail .. [T-SEP] w .. [SEP] [PAD]*
//! ```
//!
//! Marker pairs appear in the order the entities appear in the sentence, so a
//! tail-first sentence opens with its tail markers. Over-long sentences keep
//! a window centered on the entity pair.

use crate::corpus::Instance;
use crate::error::{Error, Result};

use super::vocab::{Vocab, CLS, H_CLS, H_SEP, PAD, SEP, T_CLS, T_SEP};

/// Markers, `[CLS]`, and `[SEP]` claim six positions of every sequence.
const OVERHEAD: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    /// Exactly `max_len` ids, padded with `[PAD]`.
    pub ids: Vec<usize>,
    /// Count of non-pad positions.
    pub n_real: usize,
    /// Index of `[H-CLS]`.
    pub head_marker: usize,
    /// Index of `[T-CLS]`.
    pub tail_marker: usize,
}

impl EncodedSentence {
    /// 1 on real positions, 0 on the padded tail.
    pub fn attention_mask(&self) -> Vec<u8> {
        (0..self.ids.len()).map(|i| u8::from(i < self.n_real)).collect()
    }
}

/// Encodes one instance. Fails when the entity spans plus overhead cannot fit
/// in `max_len`; otherwise context words are dropped from the far ends,
/// alternating sides starting from the left.
pub fn encode(inst: &Instance, vocab: &Vocab, max_len: usize) -> Result<EncodedSentence> {
    let len = inst.tokens.len();
    let head = inst.head_span;
    let tail = inst.tail_span;
    let head_first = head.0 <= tail.0;
    let (first, second) = if head_first { (head, tail) } else { (tail, head) };

    let budget = max_len.saturating_sub(OVERHEAD);
    let core = second.1 - first.0;
    if core > budget {
        return Err(Error::config(format!(
            "entity window of {core} tokens plus {OVERHEAD} specials exceeds max_len {max_len}"
        )));
    }

    // Grow the kept window around the entity pair, one word at a time,
    // preferring the left side; an exhausted side cedes to the other.
    let (mut w0, mut w1) = (first.0, second.1);
    let mut left_turn = true;
    while w1 - w0 < budget && (w0 > 0 || w1 < len) {
        let took_left = left_turn && w0 > 0 || !left_turn && w1 == len;
        if took_left {
            w0 -= 1;
        } else {
            w1 += 1;
        }
        left_turn = !left_turn;
    }

    let mut ids = Vec::with_capacity(max_len);
    let mut head_marker = 0;
    let mut tail_marker = 0;
    ids.push(CLS);
    for i in w0..w1 {
        if i == head.0 {
            head_marker = ids.len();
            ids.push(H_CLS);
        }
        if i == tail.0 {
            tail_marker = ids.len();
            ids.push(T_CLS);
        }
        ids.push(vocab.id(&inst.tokens[i]));
        if i + 1 == head.1 {
            ids.push(H_SEP);
        }
        if i + 1 == tail.1 {
            ids.push(T_SEP);
        }
    }
    ids.push(SEP);
    let n_real = ids.len();
    debug_assert!(n_real <= max_len);
    ids.resize(max_len, PAD);
    Ok(EncodedSentence { ids, n_real, head_marker, tail_marker })
}

/// Token strings for an id sequence, padding excluded. For debugging and
/// example programs.
pub fn decode(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .take_while(|&&id| id != PAD)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
