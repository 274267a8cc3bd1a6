//! Selective attention over the instances of a bag, and the relation
//! classifier on top of the attended representation.
//!
//! Instance i of a bag labeled r scores `f_i = h_i . (diag * q_r)`; the
//! attention weights are `softmax(f)` and the bag representation is the
//! weighted sum of instance representations.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BagAttnParams {
    /// Learned diagonal of the bilinear form, `[rep_dim]`.
    pub diag: Tensor,
    /// One query vector per relation, `[n_relations, rep_dim]`.
    pub queries: Tensor,
}

impl BagAttnParams {
    /// Diagonal starts at identity so scores begin as plain inner products;
    /// queries start small and random.
    pub fn init(n_relations: usize, rep_dim: usize, rng: &mut ChaCha8Rng) -> BagAttnParams {
        let dist = Normal::new(0.0, 0.02).expect("valid normal");
        let queries: Vec<f64> = (0..n_relations * rep_dim).map(|_| dist.sample(rng)).collect();
        BagAttnParams {
            diag: Tensor::param(&[rep_dim], vec![1.0; rep_dim]),
            queries: Tensor::param(&[n_relations, rep_dim], queries),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        vec![
            ("attn.diag".to_string(), self.diag.clone()),
            ("attn.queries".to_string(), self.queries.clone()),
        ]
    }

    pub fn n_relations(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn rep_dim(&self) -> usize {
        self.queries.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    /// Relation projection, `[n_relations, rep_dim]`.
    pub proj: Tensor,
    pub bias: Tensor,
}

impl ClassifierParams {
    pub fn init(n_relations: usize, rep_dim: usize, rng: &mut ChaCha8Rng) -> ClassifierParams {
        let dist = Normal::new(0.0, 0.02).expect("valid normal");
        let proj: Vec<f64> = (0..n_relations * rep_dim).map(|_| dist.sample(rng)).collect();
        ClassifierParams {
            proj: Tensor::param(&[n_relations, rep_dim], proj),
            bias: Tensor::param(&[n_relations], vec![0.0; n_relations]),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        vec![
            ("cls.proj".to_string(), self.proj.clone()),
            ("cls.bias".to_string(), self.bias.clone()),
        ]
    }
}

pub struct BagAttention {
    /// Attended bag representations, `[bags, rep_dim]`.
    pub bag_reps: Tensor,
    /// Attention weights, `[bags, k]`; each row sums to one.
    pub alphas: Tensor,
}

/// Attends each bag's `k` instance representations with the query of its
/// labeled relation. `reps` is `[bags, k, rep_dim]`, one relation id per bag.
pub fn attend(reps: &Tensor, relation_ids: &[usize], attn: &BagAttnParams) -> BagAttention {
    let shape = reps.shape().to_vec();
    assert_eq!(shape.len(), 3, "attend wants [bags, k, rep_dim], got {shape:?}");
    let (g, k, rd) = (shape[0], shape[1], shape[2]);
    assert_eq!(rd, attn.rep_dim(), "rep_dim mismatch: {rd} vs {}", attn.rep_dim());
    assert_eq!(relation_ids.len(), g, "one relation per bag");

    let scaled = reps.mul(&attn.diag);
    let q = Tensor::embedding_lookup(&attn.queries, relation_ids, &[g]).reshape(&[g, rd, 1]);
    let scores = scaled.matmul(&q).reshape(&[g, k]);
    let alphas = scores.softmax(1);
    let bag_reps = alphas.reshape(&[g, 1, k]).matmul(reps).reshape(&[g, rd]);
    BagAttention { bag_reps, alphas }
}

/// Relation logits for attended bag representations: `[bags, n_relations]`.
pub fn classify(bag_reps: &Tensor, cls: &ClassifierParams) -> Tensor {
    bag_reps.matmul(&cls.proj.transpose()).add(&cls.bias)
}

/// Mean cross-entropy of the labeled relations under the logits.
pub fn bag_loss(logits: &Tensor, labels: &[usize]) -> Tensor {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2, "bag_loss wants [bags, n_relations], got {shape:?}");
    let (g, n_r) = (shape[0], shape[1]);
    assert_eq!(labels.len(), g, "one label per bag");
    let mut onehot = vec![0.0; g * n_r];
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < n_r, "label {l} out of range ({n_r} relations)");
        onehot[i * n_r + l] = 1.0;
    }
    let picked = logits.log_softmax(1).mul(&Tensor::new(&[g, n_r], onehot));
    picked.sum_all().scale(-1.0 / g as f64)
}

/// Test-time scorer. For each candidate relation the bag is re-attended with
/// that relation's query and the candidate's probability is read off the
/// classifier, so every relation sees the instance mix it would select.
/// Works on plain values; scoring consumes no randomness and builds no graph.
pub struct BagScorer {
    n_relations: usize,
    rep_dim: usize,
    diag: Vec<f64>,
    queries: Vec<f64>,
    proj: Vec<f64>,
    bias: Vec<f64>,
}

impl BagScorer {
    pub fn new(attn: &BagAttnParams, cls: &ClassifierParams) -> BagScorer {
        assert_eq!(attn.queries.shape(), cls.proj.shape(), "attention and classifier disagree");
        BagScorer {
            n_relations: attn.n_relations(),
            rep_dim: attn.rep_dim(),
            diag: attn.diag.values(),
            queries: attn.queries.values(),
            proj: cls.proj.values(),
            bias: cls.bias.values(),
        }
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    /// `reps` holds k instance representations back to back; returns one
    /// probability per relation.
    pub fn score(&self, reps: &[f64]) -> Vec<f64> {
        let rd = self.rep_dim;
        assert!(!reps.is_empty() && reps.len() % rd == 0, "reps not a multiple of rep_dim {rd}");
        let k = reps.len() / rd;
        let mut out = Vec::with_capacity(self.n_relations);
        let mut scores = vec![0.0; k];
        let mut bag = vec![0.0; rd];
        let mut logits = vec![0.0; self.n_relations];
        for r in 0..self.n_relations {
            let q = &self.queries[r * rd..(r + 1) * rd];
            for i in 0..k {
                let h = &reps[i * rd..(i + 1) * rd];
                scores[i] = (0..rd).map(|j| h[j] * self.diag[j] * q[j]).sum();
            }
            softmax_inplace(&mut scores);
            bag.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..k {
                let h = &reps[i * rd..(i + 1) * rd];
                for j in 0..rd {
                    bag[j] += scores[i] * h[j];
                }
            }
            for (c, logit) in logits.iter_mut().enumerate() {
                let row = &self.proj[c * rd..(c + 1) * rd];
                *logit = self.bias[c] + (0..rd).map(|j| row[j] * bag[j]).sum::<f64>();
            }
            softmax_inplace(&mut logits);
            out.push(logits[r]);
        }
        out
    }
}

fn softmax_inplace(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}
