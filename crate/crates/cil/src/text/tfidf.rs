//! Instance-level tf-idf and the augmentation built on it: substitute the
//! least informative words, insert common ones, and never touch an entity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Instance};
use crate::error::{Error, Result};

/// Document frequencies over a corpus, one instance = one document.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    docs: usize,
    df: BTreeMap<String, usize>,
}

impl TfidfModel {
    pub fn fit(corpus: &Corpus) -> TfidfModel {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut docs = 0;
        for bag in &corpus.bags {
            for inst in &bag.instances {
                docs += 1;
                let distinct: HashSet<&str> = inst.tokens.iter().map(String::as_str).collect();
                for w in distinct {
                    *df.entry(w.to_string()).or_insert(0) += 1;
                }
            }
        }
        TfidfModel { docs, df }
    }

    pub fn n_docs(&self) -> usize {
        self.docs
    }

    pub fn df(&self, word: &str) -> usize {
        self.df.get(word).copied().unwrap_or(0)
    }

    /// Smoothed inverse document frequency. Unseen words take the maximum
    /// (df = 0), so they are never chosen for substitution over known words.
    pub fn idf(&self, word: &str) -> f64 {
        ((1 + self.docs) as f64 / (1 + self.df(word)) as f64).ln() + 1.0
    }

    /// tf-idf of a word appearing `count` times in one instance.
    pub fn score(&self, word: &str, count: usize) -> f64 {
        count as f64 * self.idf(word)
    }

    /// The least informative `quantile` of known words, ordered by rising
    /// idf with alphabetical ties; always at least one word. These serve as
    /// replacement and insertion material.
    pub fn low_idf_pool(&self, quantile: f64) -> Vec<String> {
        assert!((0.0..=1.0).contains(&quantile), "quantile {quantile} out of [0, 1]");
        assert!(!self.df.is_empty(), "tf-idf model fit on an empty corpus");
        let mut words: Vec<(&String, usize)> = self.df.iter().map(|(w, &d)| (w, d)).collect();
        // Larger df means smaller idf; BTreeMap order breaks ties by word.
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let k = ((words.len() as f64 * quantile).floor() as usize).clamp(1, words.len());
        words.into_iter().take(k).map(|(w, _)| w.clone()).collect()
    }

    /// JSON object of word -> document frequency, with the document count
    /// under the reserved `_docs` key. A corpus word spelled `_docs` would
    /// collide and is rejected at save time.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.df.contains_key("_docs") {
            return Err(Error::config("corpus contains the reserved word \"_docs\"".to_string()));
        }
        let mut map = serde_json::Map::new();
        map.insert("_docs".to_string(), serde_json::json!(self.docs));
        for (w, d) in &self.df {
            map.insert(w.clone(), serde_json::json!(d));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), &serde_json::Value::Object(map))
            .map_err(|e| Error::data(path, 1, e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TfidfModel> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_reader(BufReader::new(file))
                .map_err(|e| Error::data(path, 1, e.to_string()))?;
        let as_count = |v: &serde_json::Value| -> Option<usize> {
            v.as_u64().map(|n| n as usize)
        };
        let docs = map
            .get("_docs")
            .and_then(as_count)
            .ok_or_else(|| Error::data(path, 1, "missing or invalid _docs"))?;
        let mut df = BTreeMap::new();
        for (w, v) in &map {
            if w == "_docs" {
                continue;
            }
            let count = as_count(v)
                .ok_or_else(|| Error::data(path, 1, format!("bad count for {w:?}")))?;
            df.insert(w.clone(), count);
        }
        Ok(TfidfModel { docs, df })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Edit budget as a fraction of the non-entity token count; the budget
    /// is `max(1, round(ratio * count))`.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Chance an edit is an insertion rather than a substitution.
    #[serde(default = "default_insert_prob")]
    pub insert_prob: f64,
    /// Quantile of the vocabulary eligible as replacement material.
    #[serde(default = "default_low_score_quantile")]
    pub low_score_quantile: f64,
}

fn default_ratio() -> f64 {
    0.15
}

fn default_insert_prob() -> f64 {
    0.5
}

fn default_low_score_quantile() -> f64 {
    0.4
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { ratio: 0.15, insert_prob: 0.5, low_score_quantile: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentStats {
    pub inserts: usize,
    pub substitutions: usize,
}

impl AugmentStats {
    pub fn total(&self) -> usize {
        self.inserts + self.substitutions
    }
}

fn inside(span: (usize, usize), gap: usize) -> bool {
    span.0 < gap && gap < span.1
}

fn shift_after_insert(span: &mut (usize, usize), gap: usize) {
    debug_assert!(!inside(*span, gap), "insert would split an entity");
    if gap <= span.0 {
        span.0 += 1;
        span.1 += 1;
    }
}

/// Produces a perturbed copy of an instance. Spends exactly the edit budget:
/// each edit is an insertion or a substitution, substitutions target the
/// lowest-scoring untouched non-entity word (leftmost on ties), insertions
/// choose uniformly among gaps that do not split an entity. Entity tokens
/// and spans always survive verbatim.
pub fn augment(
    inst: &Instance,
    tfidf: &TfidfModel,
    pool: &[String],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Instance, AugmentStats) {
    assert!(!pool.is_empty(), "augment needs a replacement pool");
    let mut tokens = inst.tokens.clone();
    let mut head = inst.head_span;
    let mut tail = inst.tail_span;
    let non_entity = tokens.len() - (head.1 - head.0) - (tail.1 - tail.0);
    let budget = ((cfg.ratio * non_entity as f64).round() as usize).max(1);

    // Positions already edited (or freshly inserted) are off limits for
    // later substitutions.
    let mut touched: Vec<bool> = vec![false; tokens.len()];
    let mut stats = AugmentStats::default();

    for _ in 0..budget {
        let is_entity = |i: usize, head: (usize, usize), tail: (usize, usize)| {
            (head.0..head.1).contains(&i) || (tail.0..tail.1).contains(&i)
        };
        let candidates: Vec<usize> = (0..tokens.len())
            .filter(|&i| !is_entity(i, head, tail) && !touched[i])
            .collect();
        let do_insert = rng.gen_bool(cfg.insert_prob) || candidates.is_empty();
        if do_insert {
            let gaps: Vec<usize> =
                (0..=tokens.len()).filter(|&g| !inside(head, g) && !inside(tail, g)).collect();
            let gap = gaps[rng.gen_range(0..gaps.len())];
            let word = pool[rng.gen_range(0..pool.len())].clone();
            tokens.insert(gap, word);
            touched.insert(gap, true);
            shift_after_insert(&mut head, gap);
            shift_after_insert(&mut tail, gap);
            stats.inserts += 1;
        } else {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for t in &tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
            let target = candidates
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let sa = tfidf.score(&tokens[a], counts[tokens[a].as_str()]);
                    let sb = tfidf.score(&tokens[b], counts[tokens[b].as_str()]);
                    sa.partial_cmp(&sb).unwrap().then(a.cmp(&b))
                })
                .expect("candidates checked non-empty");
            tokens[target] = pool[rng.gen_range(0..pool.len())].clone();
            touched[target] = true;
            stats.substitutions += 1;
        }
    }

    let out = Instance {
        tokens,
        head_span: head,
        tail_span: tail,
        gold_relation_id: inst.gold_relation_id,
    };
    (out, stats)
}
