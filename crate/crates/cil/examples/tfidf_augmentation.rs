//! Label-safe data augmentation driven by TF-IDF importance.
//!
//! An augmented sentence should still express the same relation, so edits
//! avoid everything that carries the relational signal: entity tokens are
//! untouchable, substitutions target the lowest-scoring words first, and
//! replacement material comes from the low-IDF (uninformative) end of the
//! vocabulary. Each call spends a budget of max(1, round(ratio * non-entity
//! tokens)) edits, each either a substitution or an insertion.

use cil::corpus::{generate_synthetic, SynthConfig};
use cil::text::{augment, AugmentConfig, TfidfModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let data = generate_synthetic(&SynthConfig {
        n_relations: 5,
        n_triples: 200,
        seed: 29,
        ..SynthConfig::default()
    })
    .expect("valid generator config");
    let corpus = &data.train;

    let tfidf = TfidfModel::fit(corpus);
    let cfg = AugmentConfig::default();
    let pool = tfidf.low_idf_pool(cfg.low_score_quantile);
    println!("replacement pool: {} low-IDF words, e.g. {:?}", pool.len(), &pool[..5.min(pool.len())]);

    let inst = &corpus.bags.iter().find(|b| b.relation_id != 0).unwrap().instances[0];
    println!("\noriginal:  {}", inst.tokens.join(" "));
    println!("entities:  {:?} / {:?}", inst.head_text(), inst.tail_text());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for round in 0..4 {
        let (aug, stats) = augment(inst, &tfidf, &pool, &cfg, &mut rng);
        println!(
            "twin {round}:    {}   ({} subs, {} inserts)",
            aug.tokens.join(" "),
            stats.substitutions,
            stats.inserts
        );
        assert_eq!(aug.head_text(), inst.head_text(), "entities are never edited");
        assert_eq!(aug.tail_text(), inst.tail_text());
    }

    // The edit budget holds across the corpus, not just on one sentence.
    let mut total_edits = 0usize;
    let mut instances = 0usize;
    for bag in &corpus.bags {
        for inst in &bag.instances {
            let (_, stats) = augment(inst, &tfidf, &pool, &cfg, &mut rng);
            let non_entity = inst.tokens.len()
                - (inst.head_span.1 - inst.head_span.0)
                - (inst.tail_span.1 - inst.tail_span.0);
            let budget = ((cfg.ratio * non_entity as f64).round() as usize).max(1);
            assert!(stats.total() <= budget);
            total_edits += stats.total();
            instances += 1;
        }
    }
    println!("\n{instances} instances augmented, {:.2} edits each on average", total_edits as f64 / instances as f64);
}
