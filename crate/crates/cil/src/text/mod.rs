//! Text pipeline: vocabulary, sentence encoding with entity markers,
//! tf-idf driven augmentation, and masked-language-model corruption.

mod encode;
mod mlm;
mod tfidf;
mod vocab;

pub use encode::{decode, encode, EncodedSentence};
pub use mlm::mask_for_mlm;
pub use tfidf::{augment, AugmentConfig, AugmentStats, TfidfModel};
pub use vocab::{
    Vocab, CLS, H_CLS, H_SEP, MASK, N_SPECIAL, PAD, SEP, SPECIAL_TOKENS, T_CLS, T_SEP, UNK,
};
