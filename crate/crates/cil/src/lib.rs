//! Contrastive instance learning for distantly supervised relation
//! extraction, from tensors up.
//!
//! Distant supervision labels a bag of sentences by the entity pair they
//! share, so individual sentences are often mislabeled. The model here
//! learns under that noise in two stages that share one encoder: a
//! multi-instance bag classifier whose selective attention downweights
//! off-label sentences, and an instance-level contrastive objective that
//! treats an augmented copy of each sentence as its positive and sentences
//! from other bags as negatives. A sigmoid schedule hands weight to the
//! contrastive term only once bag-level training has made the attention
//! scores meaningful, and masked-language modeling regularizes the encoder
//! throughout.
//!
//! Everything is self-contained: a reverse-mode autodiff [`tensor`] core, a
//! transformer [`encoder`], synthetic [`corpus`] generation with controlled
//! label noise, TF-IDF augmentation in [`text`], the training loop with
//! exact checkpoint resume in [`train`], ranking metrics in [`eval`], and a
//! [`cli`] covering data generation through ablation. Runs are deterministic
//! for a fixed seed; the `examples/` directory demonstrates each capability
//! end to end.

pub mod bag_encoder;
pub mod cli;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod tensor;
pub mod text;
pub mod train;
