//! Instance-level contrastive objective, its pairing strategies, the masked
//! language model loss, and the warm-up weight schedule.
//!
//! Each sampled instance is an anchor. Its positive is an augmented twin by
//! default (other sources exist for ablations) and its negatives are the
//! attended representations of the other bags in the batch, so an anchor is
//! pulled toward its own rewording and pushed off every other bag's summary.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where an anchor's positive comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveSource {
    /// The same sentence re-encoded after token augmentation.
    Augmented,
    /// Another sampled instance of the same bag.
    RandomInstance,
    /// The anchor's own bag representation.
    BagRep,
}

/// Where an anchor's negatives come from. One negative per other bag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    /// The other bag's attended representation.
    BagRep,
    /// A random sampled instance of the other bag.
    RandomInstance,
}

/// A representation referenced by a pair plan, addressed by batch slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairRef {
    /// Augmented twin of instance slot (bag, k).
    Augmented(usize, usize),
    /// Original instance at slot (bag, k).
    Instance(usize, usize),
    /// Attended representation of a bag.
    BagRep(usize),
}

/// Contrastive pairing for one anchor instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPlan {
    /// Anchor slot (bag, k).
    pub anchor: (usize, usize),
    pub positive: PairRef,
    /// Exactly one entry per other bag, in bag order.
    pub negatives: Vec<PairRef>,
}

/// Plans pairs for a batch of `g` bags with `k` sampled instances each.
/// Anchors are visited bag-major; random draws happen in anchor order,
/// positive before negatives, negatives in bag order. That fixed order is
/// what makes runs reproducible.
pub fn plan_pairs(
    g: usize,
    k: usize,
    positives: PositiveSource,
    negatives: NegativeSource,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairPlan>> {
    if g < 2 {
        return Err(Error::config(format!(
            "contrastive batches need at least 2 bags to draw negatives, got {g}"
        )));
    }
    if k < 2 && positives == PositiveSource::RandomInstance {
        return Err(Error::config(format!(
            "random-instance positives need at least 2 instances per bag, got {k}"
        )));
    }
    let mut plans = Vec::with_capacity(g * k);
    for bag in 0..g {
        for slot in 0..k {
            let positive = match positives {
                PositiveSource::Augmented => PairRef::Augmented(bag, slot),
                PositiveSource::BagRep => PairRef::BagRep(bag),
                PositiveSource::RandomInstance => {
                    // Uniform over the other slots of the same bag.
                    let mut pick = rng.gen_range(0..k - 1);
                    if pick >= slot {
                        pick += 1;
                    }
                    PairRef::Instance(bag, pick)
                }
            };
            let mut negs = Vec::with_capacity(g - 1);
            for other in (0..g).filter(|&o| o != bag) {
                negs.push(match negatives {
                    NegativeSource::BagRep => PairRef::BagRep(other),
                    NegativeSource::RandomInstance => {
                        PairRef::Instance(other, rng.gen_range(0..k))
                    }
                });
            }
            plans.push(PairPlan { anchor: (bag, slot), positive, negatives: negs });
        }
    }
    Ok(plans)
}

/// Temperature-scaled cosine similarity of two equal-length vectors.
pub fn similarity(a: &Tensor, b: &Tensor, tau: f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "similarity wants equal shapes");
    assert!(tau > 0.0, "temperature must be positive");
    let na = a.mul(a).sum_all().sqrt();
    let nb = b.mul(b).sum_all().sqrt();
    assert!(
        na.item() > 0.0 && nb.item() > 0.0,
        "similarity: zero-norm vector has no direction"
    );
    a.mul(b).sum_all().div(&na).div(&nb).scale(1.0 / tau)
}

/// Softmax cross-entropy of the positive against positive plus negatives:
/// `-log( e^{s+} / (e^{s+} + sum e^{s-}) )`.
pub fn contrastive_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
    tau: f64,
) -> Tensor {
    assert!(!negatives.is_empty(), "contrastive loss needs negatives");
    let mut sims = Vec::with_capacity(1 + negatives.len());
    sims.push(similarity(anchor, positive, tau).reshape(&[1]));
    for n in negatives {
        sims.push(similarity(anchor, n, tau).reshape(&[1]));
    }
    let stacked = Tensor::concat(&sims, 0);
    stacked.log_softmax(0).slice(0, 0, 1).reshape(&[]).scale(-1.0)
}

/// Resolves plans against batch representations and averages the anchor
/// losses. `reps` and `reps_aug` are `[g, k, rep_dim]`, `bag_reps` is
/// `[g, rep_dim]`; `reps_aug` is only consulted for augmented positives.
pub fn batch_contrastive_loss(
    plans: &[PairPlan],
    reps: &Tensor,
    reps_aug: Option<&Tensor>,
    bag_reps: &Tensor,
    tau: f64,
) -> Tensor {
    assert!(!plans.is_empty(), "no pair plans");
    let shape = reps.shape().to_vec();
    let (g, k, rd) = (shape[0], shape[1], shape[2]);
    let row = |t: &Tensor, bag: usize, slot: usize| {
        t.slice(0, bag, bag + 1).slice(1, slot, slot + 1).reshape(&[rd])
    };
    let resolve = |r: &PairRef| match *r {
        PairRef::Instance(b, s) => {
            assert!(b < g && s < k, "plan slot ({b},{s}) outside batch");
            row(reps, b, s)
        }
        PairRef::Augmented(b, s) => {
            let aug = reps_aug.expect("plan wants augmented reps but none were given");
            row(aug, b, s)
        }
        PairRef::BagRep(b) => bag_reps.slice(0, b, b + 1).reshape(&[rd]),
    };
    let mut losses = Vec::with_capacity(plans.len());
    for plan in plans {
        let anchor = row(reps, plan.anchor.0, plan.anchor.1);
        let positive = resolve(&plan.positive);
        let negatives: Vec<Tensor> = plan.negatives.iter().map(&resolve).collect();
        losses.push(contrastive_loss(&anchor, &positive, &negatives, tau).reshape(&[1]));
    }
    Tensor::concat(&losses, 0).mean_all()
}

/// Mean cross-entropy of masked-position logits `[targets, vocab]` against
/// the original token ids. Zero when nothing was masked.
pub fn mlm_loss(logits: &Tensor, targets: &[usize]) -> Tensor {
    if targets.is_empty() {
        return Tensor::scalar(0.0);
    }
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2, "mlm_loss wants [targets, vocab], got {shape:?}");
    let (t, v) = (shape[0], shape[1]);
    assert_eq!(targets.len(), t, "one target id per logit row");
    let mut onehot = vec![0.0; t * v];
    for (i, &id) in targets.iter().enumerate() {
        assert!(id < v, "target id {id} outside vocabulary of {v}");
        onehot[i * v + id] = 1.0;
    }
    let picked = logits.log_softmax(1).mul(&Tensor::new(&[t, v], onehot));
    picked.sum_all().scale(-1.0 / t as f64)
}

/// Warm-up weight as a function of scaled time `t >= 0`: `2/(1+e^-t) - 1`.
/// Zero at the start, saturating toward one.
pub fn lambda_of_t(t: f64) -> f64 {
    2.0 / (1.0 + (-t).exp()) - 1.0
}

/// Warm-up weight at a training step: `t = kappa * step / total_steps`.
pub fn lambda_at(step: usize, total_steps: usize, kappa: f64) -> f64 {
    assert!(total_steps > 0, "total_steps must be positive");
    lambda_of_t(kappa * step as f64 / total_steps as f64)
}
