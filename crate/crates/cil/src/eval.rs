//! Held-out evaluation: per-bag relation scoring plus the usual
//! distant-supervision metrics (PR curve, AUC, P@N, micro-F1).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bag_encoder::BagScorer;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::text::{encode, Vocab};
use crate::train::ModelParams;

/// Default top-N cutoffs; sized for synthetic test sets.
pub const DEFAULT_P_AT: [usize; 3] = [50, 100, 200];

/// Sentences per encoder forward while scoring.
const SCORE_CHUNK: usize = 64;

/// Full score vector for one test bag. `scores[r]` is the classifier's
/// probability for relation `r` under the attention query of `r` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct BagScores {
    pub bag: usize,
    pub gold: usize,
    pub scores: Vec<f64>,
}

/// One (bag, candidate relation) entry for PR scoring. NA never appears:
/// ranking NA "predictions" would only dilute the curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub bag: usize,
    pub relation: usize,
    pub score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(recall, precision)` after each ranked prefix; recall is non-decreasing.
    pub pr_points: Vec<(f64, f64)>,
    pub auc: f64,
    pub p_at: BTreeMap<usize, f64>,
    pub p_mean: f64,
    pub micro_f1: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

/// Scores every bag of `test`. Encoder forwards run without dropout in
/// fixed-size chunks; per-bag attention scoring then fans out over bags.
pub fn score_corpus(model: &ModelParams, vocab: &Vocab, test: &Corpus) -> Result<Vec<BagScores>> {
    let scorer = BagScorer::new(&model.attn, &model.cls);
    if scorer.n_relations() != test.n_relations() {
        return Err(Error::config(format!(
            "model scores {} relations but the test corpus defines {}",
            scorer.n_relations(),
            test.n_relations()
        )));
    }
    let rep_dim = 2 * model.encoder.cfg.d_model;
    let max_len = model.encoder.cfg.max_len;

    let mut encoded = Vec::new();
    for bag in &test.bags {
        for inst in &bag.instances {
            encoded.push(encode(inst, vocab, max_len)?);
        }
    }

    // Instance representations in corpus order, so each bag's rows are contiguous.
    let mut reps = Vec::with_capacity(encoded.len() * rep_dim);
    for chunk in encoded.chunks(SCORE_CHUNK) {
        let out = model.encoder.forward(chunk, None);
        reps.extend_from_slice(&out.reps.values());
    }

    let mut offsets = Vec::with_capacity(test.bags.len());
    let mut start = 0;
    for bag in &test.bags {
        offsets.push(start);
        start += bag.instances.len();
    }

    Ok(test
        .bags
        .par_iter()
        .enumerate()
        .map(|(b, bag)| {
            let rows = &reps[offsets[b] * rep_dim..(offsets[b] + bag.instances.len()) * rep_dim];
            BagScores { bag: b, gold: bag.relation_id, scores: scorer.score(rows) }
        })
        .collect())
}

/// Flattens bag scores into ranked-retrieval entries, one per non-NA relation,
/// in (bag, relation) order. That order is the tie-break under a stable sort.
pub fn predictions(bag_scores: &[BagScores]) -> Vec<ScoredPrediction> {
    let mut preds = Vec::new();
    for bs in bag_scores {
        for (relation, &score) in bs.scores.iter().enumerate().skip(1) {
            preds.push(ScoredPrediction {
                bag: bs.bag,
                relation,
                score,
                correct: bs.gold == relation,
            });
        }
    }
    preds
}

fn rank(preds: &[ScoredPrediction]) -> Vec<ScoredPrediction> {
    let mut ranked = preds.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.bag.cmp(&b.bag))
            .then(a.relation.cmp(&b.relation))
    });
    ranked
}

/// Precision/recall after each ranked prefix plus trapezoid AUC over recall.
/// The curve is anchored at (recall 0, precision 1) for the first trapezoid.
pub fn pr_curve(preds: &[ScoredPrediction]) -> Result<(Vec<(f64, f64)>, f64)> {
    let positives = preds.iter().filter(|p| p.correct).count();
    if positives == 0 {
        return Err(Error::config("no correct prediction exists, recall is undefined"));
    }
    let ranked = rank(preds);
    let mut points = Vec::with_capacity(ranked.len());
    let mut hits = 0usize;
    let (mut auc, mut prev_r, mut prev_p) = (0.0, 0.0, 1.0);
    for (i, p) in ranked.iter().enumerate() {
        hits += p.correct as usize;
        let recall = hits as f64 / positives as f64;
        let precision = hits as f64 / (i + 1) as f64;
        auc += (recall - prev_r) * (prev_p + precision) / 2.0;
        points.push((recall, precision));
        (prev_r, prev_p) = (recall, precision);
    }
    Ok((points, auc))
}

/// Precision within the top N for each requested N, plus their mean.
pub fn p_at_n(preds: &[ScoredPrediction], ns: &[usize]) -> Result<(BTreeMap<usize, f64>, f64)> {
    if ns.is_empty() {
        return Err(Error::config("p_at_n needs at least one cutoff"));
    }
    for &n in ns {
        if n == 0 || n > preds.len() {
            return Err(Error::config(format!(
                "P@{n} is undefined for {} predictions",
                preds.len()
            )));
        }
    }
    let ranked = rank(preds);
    let mut map = BTreeMap::new();
    for &n in ns {
        let hits = ranked[..n].iter().filter(|p| p.correct).count();
        map.insert(n, hits as f64 / n as f64);
    }
    let mean = ns.iter().map(|n| map[n]).sum::<f64>() / ns.len() as f64;
    Ok((map, mean))
}

/// Per-bag decision: the best non-NA relation wins if it outscores NA,
/// otherwise the bag is predicted NA. F1 pools TP/FP/FN over non-NA classes.
pub fn micro_f1(bag_scores: &[BagScores]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for bs in bag_scores {
        assert!(bs.scores.len() >= 2, "scores must cover NA plus one relation");
        let mut best = 1;
        for r in 2..bs.scores.len() {
            if bs.scores[r] > bs.scores[best] {
                best = r;
            }
        }
        let pred = if bs.scores[best] > bs.scores[0] { best } else { 0 };
        if pred != 0 {
            if pred == bs.gold {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if bs.gold != 0 && pred != bs.gold {
            fnn += 1;
        }
    }
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        // Nothing demanded and nothing wrongly asserted.
        return 1.0;
    }
    2.0 * tp as f64 / denom as f64
}

/// Runs the whole held-out protocol against one model snapshot.
pub fn evaluate(
    model: &ModelParams,
    vocab: &Vocab,
    test: &Corpus,
    ns: &[usize],
) -> Result<EvalReport> {
    let bag_scores = score_corpus(model, vocab, test)?;
    let preds = predictions(&bag_scores);
    let (pr_points, auc) = pr_curve(&preds)?;
    let (p_at, p_mean) = p_at_n(&preds, ns)?;
    let micro_f1 = micro_f1(&bag_scores);
    Ok(EvalReport { pr_points, auc, p_at, p_mean, micro_f1 })
}

/// Two-column CSV of the PR curve for external plotting.
pub fn write_pr_csv(path: &Path, pr_points: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("recall,precision\n");
    for (r, p) in pr_points {
        out.push_str(&format!("{r},{p}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
