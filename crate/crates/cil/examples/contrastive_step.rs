//! The contrastive side of training: pair planning, the InfoNCE loss, and
//! the sigmoid weight schedule that phases it in.
//!
//! Each batch instance becomes an anchor. Its positive is an augmented twin
//! of the same sentence (other strategies swap in a random bag-mate or the
//! bag representation) and its negatives are the bag representations of the
//! other bags in the batch, so instances are pulled toward their own bag's
//! semantics and pushed away from everyone else's.

use cil::contrastive::{
    batch_contrastive_loss, contrastive_loss, lambda_at, plan_pairs, NegativeSource,
    PositiveSource,
};
use cil::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

fn main() {
    let (g, k, rep_dim, tau) = (3usize, 2usize, 8usize, 0.1f64);
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let plans = plan_pairs(g, k, PositiveSource::Augmented, NegativeSource::BagRep, &mut rng)
        .expect("valid batch geometry");
    println!("pair plan for {g} bags x {k} instances:");
    for plan in &plans {
        println!(
            "  anchor (bag {}, slot {})  positive {:?}  negatives {:?}",
            plan.anchor.0, plan.anchor.1, plan.positive, plan.negatives
        );
    }

    // Synthetic representations make the loss arithmetic easy to follow:
    // anchors near their positives, negatives scattered.
    let mut init = ChaCha8Rng::seed_from_u64(4);
    let reps = randn(&[g, k, rep_dim], 1.0, &mut init);
    let noise = randn(&[g, k, rep_dim], 0.05, &mut init);
    let reps_aug = reps.add(&noise);
    let bag_reps = randn(&[g, rep_dim], 1.0, &mut init);

    let loss = batch_contrastive_loss(&plans, &reps, Some(&reps_aug), &bag_reps, tau);
    println!("\nmean InfoNCE over {} anchors: {:.4}", plans.len(), loss.values()[0]);

    // One anchor by hand: tight positive, one distant negative.
    let anchor = Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]);
    let positive = Tensor::new(&[4], vec![0.9, 0.1, 0.0, 0.0]);
    let negative = Tensor::new(&[4], vec![-1.0, 0.0, 0.0, 0.0]);
    let l = contrastive_loss(&anchor, &positive, &[negative], 0.5);
    println!("hand-built anchor loss at tau 0.5: {:.4}", l.values()[0]);

    // The schedule: zero at step 0, saturating toward 1.
    println!("\ncontrastive weight lambda over a 2000-step run (kappa 10):");
    for step in [0usize, 50, 100, 200, 400, 800, 1400, 2000] {
        let lambda = lambda_at(step, 2000, 10.0);
        let bar = "#".repeat((lambda * 40.0).round() as usize);
        println!("  step {step:>4}  lambda {lambda:.4}  {bar}");
    }
}
