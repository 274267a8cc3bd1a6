//! Bag-level data model for distant supervision: instances grouped by the
//! entity-pair triple that labeled them, JSONL readers and writers, a
//! synthetic corpus generator with a controllable noise rate, and batch
//! sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the no-relation class; always relation id 0.
pub const NA_RELATION: &str = "NA";

/// What distant supervision aligned: two entities and the relation the
/// knowledge base asserts between them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationalTriple {
    pub head: String,
    pub tail: String,
    pub relation: String,
}

/// One sentence mentioning both entities. Spans are half-open token ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head_span: (usize, usize),
    pub tail_span: (usize, usize),
    /// Relation the sentence actually expresses, when known. Synthetic data
    /// records it so label noise can be audited; loaded corpora leave `None`.
    pub gold_relation_id: Option<usize>,
}

impl Instance {
    /// True when `idx` falls inside the head or tail span.
    pub fn in_entity(&self, idx: usize) -> bool {
        (self.head_span.0..self.head_span.1).contains(&idx)
            || (self.tail_span.0..self.tail_span.1).contains(&idx)
    }

    pub fn head_text(&self) -> String {
        self.tokens[self.head_span.0..self.head_span.1].join(" ")
    }

    pub fn tail_text(&self) -> String {
        self.tokens[self.tail_span.0..self.tail_span.1].join(" ")
    }
}

/// All instances that share one triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub triple: RelationalTriple,
    pub relation_id: usize,
    pub instances: Vec<Instance>,
}

/// A labeled bag collection plus the relation inventory it is indexed by.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Relation names; index is the relation id and `relations[0]` is NA.
    pub relations: Vec<String>,
    pub bags: Vec<Bag>,
}

impl Corpus {
    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(|b| b.instances.len()).sum()
    }

    /// Instances whose recorded gold relation disagrees with the bag label.
    /// Zero when gold annotations are absent (loaded real-world corpora).
    pub fn mislabeled_instances(&self) -> usize {
        self.bags
            .iter()
            .map(|b| {
                b.instances
                    .iter()
                    .filter(|i| i.gold_relation_id.is_some_and(|g| g != b.relation_id))
                    .count()
            })
            .sum()
    }

    /// Instances in relational bags recorded as expressing nothing: the
    /// incidental mentions, a subset of `mislabeled_instances`.
    pub fn distractor_instances(&self) -> usize {
        self.bags
            .iter()
            .filter(|b| b.relation_id != 0)
            .map(|b| b.instances.iter().filter(|i| i.gold_relation_id == Some(0)).count())
            .sum()
    }
}

// ----- file formats -----

#[derive(Serialize, Deserialize)]
struct MentionRecord {
    name: String,
    pos: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    text: String,
    h: MentionRecord,
    t: MentionRecord,
    relation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_relation: Option<String>,
}

/// Reads a relation inventory: one name per line, first line must be NA,
/// names must be unique and non-empty.
pub fn load_relations(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut names = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let name = line.trim().to_string();
        if name.is_empty() {
            return Err(Error::data(path, i + 1, "empty relation name"));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::data(path, i + 1, format!("duplicate relation {name:?}")));
        }
        names.push(name);
    }
    if names.first().map(String::as_str) != Some(NA_RELATION) {
        return Err(Error::data(path, 1, format!("first relation must be {NA_RELATION:?}")));
    }
    Ok(names)
}

pub fn save_relations(relations: &[String], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in relations {
        writeln!(w, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn check_span(len: usize, which: &str, span: (usize, usize)) -> std::result::Result<(), String> {
    if span.0 >= span.1 {
        return Err(format!("{which} span {span:?} is empty"));
    }
    if span.1 > len {
        return Err(format!("{which} span {span:?} exceeds {len} tokens"));
    }
    Ok(())
}

/// Loads instances from JSONL and groups them into bags keyed by triple.
/// Bags come out sorted by (head, tail, relation) so load order is stable.
pub fn load_jsonl(path: &Path, relations: &[String]) -> Result<Corpus> {
    let rel_ids: HashMap<&str, usize> =
        relations.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut groups: BTreeMap<RelationalTriple, Vec<Instance>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, i + 1, e.to_string()))?;
        if !rel_ids.contains_key(rec.relation.as_str()) {
            return Err(Error::data(path, i + 1, format!("unknown relation {:?}", rec.relation)));
        }
        let tokens: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::data(path, i + 1, "empty text"));
        }
        let head_span = (rec.h.pos[0], rec.h.pos[1]);
        let tail_span = (rec.t.pos[0], rec.t.pos[1]);
        for (which, span) in [("head", head_span), ("tail", tail_span)] {
            check_span(tokens.len(), which, span).map_err(|m| Error::data(path, i + 1, m))?;
        }
        if head_span.0 < tail_span.1 && tail_span.0 < head_span.1 {
            return Err(Error::data(
                path,
                i + 1,
                format!("head span {head_span:?} overlaps tail span {tail_span:?}"),
            ));
        }
        let triple = RelationalTriple { head: rec.h.name, tail: rec.t.name, relation: rec.relation };
        groups.entry(triple).or_default().push(Instance {
            tokens,
            head_span,
            tail_span,
            gold_relation_id: None,
        });
    }
    let bags = groups
        .into_iter()
        .map(|(triple, instances)| {
            let relation_id = rel_ids[triple.relation.as_str()];
            Bag { triple, relation_id, instances }
        })
        .collect();
    Ok(Corpus { relations: relations.to_vec(), bags })
}

/// Writes one JSON object per instance. Synthetic instances carry their
/// actual relation under `gold_relation`; loaders do not read it back.
pub fn save_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for bag in &corpus.bags {
        for inst in &bag.instances {
            let rec = InstanceRecord {
                text: inst.tokens.join(" "),
                h: MentionRecord {
                    name: inst.head_text(),
                    pos: [inst.head_span.0, inst.head_span.1],
                },
                t: MentionRecord {
                    name: inst.tail_text(),
                    pos: [inst.tail_span.0, inst.tail_span.1],
                },
                relation: bag.triple.relation.clone(),
                gold_relation: inst.gold_relation_id.map(|g| corpus.relations[g].clone()),
            };
            let line = serde_json::to_string(&rec).expect("instance record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

// ----- synthetic corpus -----

/// Controls for the synthetic distant-supervision corpus. Each non-NA
/// relation owns a disjoint pool of pattern words; sentences for that
/// relation mix pattern words with shared filler. A noisy instance draws its
/// patterns from some other relation while keeping the bag's label, which is
/// exactly the wrong-label failure mode distant supervision suffers. A
/// distractor instance is the other failure mode: filler-only sentences that
/// mention the pair without expressing anything.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Relation count including NA.
    pub n_relations: usize,
    /// Distinct entity-pair triples before the train/test split.
    pub n_triples: usize,
    /// Probability a train instance expresses a different relation than its
    /// bag label. Test instances are always clean.
    pub noise_rate: f64,
    /// Fraction of triples labeled NA; their sentences are filler-only.
    pub na_fraction: f64,
    /// Instances per bag, inclusive bounds.
    pub bag_size_range: (usize, usize),
    /// Non-entity tokens per sentence, inclusive bounds.
    pub sentence_len_range: (usize, usize),
    /// Chance each non-entity slot of a relational sentence uses a pattern
    /// word instead of filler.
    pub pattern_density: f64,
    /// Probability an instance in a relational bag is an incidental mention:
    /// it names both entities but its words are filler-only. Applies to train
    /// and test alike, with at least one expressing instance kept per bag, so
    /// the bag label stays correct and finding the evidence is the model's
    /// job.
    pub distractor_rate: f64,
    pub pattern_words_per_relation: usize,
    pub filler_words: usize,
    /// Distinct entities; surface forms alternate between one and two words.
    pub entity_pool: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_relations: 11,
            n_triples: 2000,
            noise_rate: 0.3,
            na_fraction: 0.3,
            bag_size_range: (1, 5),
            sentence_len_range: (6, 10),
            pattern_density: 0.5,
            distractor_rate: 0.0,
            pattern_words_per_relation: 6,
            filler_words: 120,
            entity_pool: 160,
            train_fraction: 0.8,
            seed: 13,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.n_relations < 2 {
            return err(format!("n_relations must be >= 2 (NA plus one), got {}", self.n_relations));
        }
        if self.n_triples < 2 {
            return err(format!("n_triples must be >= 2, got {}", self.n_triples));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return err(format!("noise_rate must be in [0, 1), got {}", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.na_fraction) {
            return err(format!("na_fraction must be in [0, 1), got {}", self.na_fraction));
        }
        if !(0.0..=1.0).contains(&self.pattern_density) {
            return err(format!("pattern_density must be in [0, 1], got {}", self.pattern_density));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return err(format!("distractor_rate must be in [0, 1), got {}", self.distractor_rate));
        }
        if self.bag_size_range.0 < 1 || self.bag_size_range.0 > self.bag_size_range.1 {
            return err(format!("bad bag_size_range {:?}", self.bag_size_range));
        }
        if self.sentence_len_range.0 < 1 || self.sentence_len_range.0 > self.sentence_len_range.1 {
            return err(format!("bad sentence_len_range {:?}", self.sentence_len_range));
        }
        if self.pattern_words_per_relation < 1 {
            return err("pattern_words_per_relation must be >= 1".to_string());
        }
        if self.filler_words < 1 {
            return err("filler_words must be >= 1".to_string());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        let pairs = self.entity_pool.saturating_mul(self.entity_pool.saturating_sub(1));
        if self.n_triples > pairs {
            return err(format!(
                "entity_pool {} yields only {} ordered pairs, fewer than n_triples {}",
                self.entity_pool, pairs, self.n_triples
            ));
        }
        Ok(())
    }

    /// Relation inventory this config generates against.
    pub fn relations(&self) -> Vec<String> {
        let mut rels = vec![NA_RELATION.to_string()];
        for r in 1..self.n_relations {
            rels.push(format!("rel_{r:02}"));
        }
        rels
    }
}

/// Train and test corpora over the same relation inventory. The test side is
/// built from held-out triples with the noise rate forced to zero.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Corpus,
    pub test: Corpus,
}

fn entity_surface(idx: usize) -> Vec<String> {
    if idx % 2 == 0 {
        vec![format!("ent{idx:03}")]
    } else {
        vec![format!("ent{idx:03}a"), format!("ent{idx:03}b")]
    }
}

fn uniform_incl(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

/// Builds one sentence. The non-entity words express `gold` (filler-only when
/// gold is NA); the two entity surfaces are spliced in at random positions.
fn synth_sentence(
    cfg: &SynthConfig,
    gold: usize,
    head: usize,
    tail: usize,
    rng: &mut ChaCha8Rng,
) -> Instance {
    let n_words = uniform_incl(rng, cfg.sentence_len_range);
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        if gold != 0 && rng.gen_bool(cfg.pattern_density) {
            let j = rng.gen_range(0..cfg.pattern_words_per_relation);
            words.push(format!("p{gold:02}_{j:02}"));
        } else {
            let j = rng.gen_range(0..cfg.filler_words);
            words.push(format!("f{j:03}"));
        }
    }
    // Insert entities at two gaps of the word sequence; a shared gap is
    // disambiguated by order so the spans never overlap.
    let head_words = entity_surface(head);
    let tail_words = entity_surface(tail);
    let gap_h = rng.gen_range(0..=n_words);
    let gap_t = rng.gen_range(0..=n_words);
    let head_first = if gap_h == gap_t { rng.gen_bool(0.5) } else { gap_h < gap_t };

    let (first_gap, first_words, second_gap, second_words) = if head_first {
        (gap_h, &head_words, gap_t, &tail_words)
    } else {
        (gap_t, &tail_words, gap_h, &head_words)
    };
    let mut tokens: Vec<String> = Vec::with_capacity(n_words + head_words.len() + tail_words.len());
    tokens.extend(words[..first_gap].iter().cloned());
    let first_span = (tokens.len(), tokens.len() + first_words.len());
    tokens.extend(first_words.iter().cloned());
    tokens.extend(words[first_gap..second_gap].iter().cloned());
    let second_span = (tokens.len(), tokens.len() + second_words.len());
    tokens.extend(second_words.iter().cloned());
    tokens.extend(words[second_gap..].iter().cloned());

    let (head_span, tail_span) =
        if head_first { (first_span, second_span) } else { (second_span, first_span) };
    Instance { tokens, head_span, tail_span, gold_relation_id: Some(gold) }
}

fn synth_bag(
    cfg: &SynthConfig,
    relations: &[String],
    relation_id: usize,
    head: usize,
    tail: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Bag {
    let size = uniform_incl(rng, cfg.bag_size_range);
    // Distractor slots are drawn up front so an all-distractor bag can be
    // repaired before any sentence is built. RNG is untouched at rate zero,
    // keeping corpora from older configs bit-identical.
    let mut distractor = vec![false; size];
    if relation_id != 0 && cfg.distractor_rate > 0.0 {
        for slot in distractor.iter_mut() {
            *slot = rng.gen_bool(cfg.distractor_rate);
        }
        if distractor.iter().all(|&d| d) {
            distractor[rng.gen_range(0..size)] = false;
        }
    }
    let mut instances = Vec::with_capacity(size);
    for &is_distractor in &distractor {
        let gold = if is_distractor {
            0
        } else if relation_id != 0 && noise > 0.0 && rng.gen_bool(noise) {
            // A mislabeled sentence: it expresses some other relation.
            let mut other = rng.gen_range(1..cfg.n_relations);
            if other == relation_id {
                other = if other == cfg.n_relations - 1 { 1 } else { other + 1 };
            }
            other
        } else {
            relation_id
        };
        instances.push(synth_sentence(cfg, gold, head, tail, rng));
    }
    let triple = RelationalTriple {
        head: entity_surface(head).join(" "),
        tail: entity_surface(tail).join(" "),
        relation: relations[relation_id].clone(),
    };
    Bag { triple, relation_id, instances }
}

/// Generates a train/test pair: distinct entity-pair triples split by
/// `train_fraction`, noisy training sentences, clean test sentences.
/// Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let relations = cfg.relations();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Ordered entity pairs (i, j), i != j, drawn without replacement.
    let e = cfg.entity_pool;
    let pair_count = e * (e - 1);
    let pair_at = |idx: usize| {
        let i = idx / (e - 1);
        let mut j = idx % (e - 1);
        if j >= i {
            j += 1;
        }
        (i, j)
    };
    let chosen = index_sample(&mut rng, pair_count, cfg.n_triples);

    let mut labeled: Vec<(usize, usize, usize)> = Vec::with_capacity(cfg.n_triples);
    for idx in chosen.iter() {
        let (h, t) = pair_at(idx);
        let rel = if rng.gen_bool(cfg.na_fraction) { 0 } else { rng.gen_range(1..cfg.n_relations) };
        labeled.push((h, t, rel));
    }

    let n_train = ((cfg.n_triples as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, cfg.n_triples - 1);
    // index_sample picked pairs in random order already, so a prefix split is
    // itself random; keep it explicit anyway for clarity.
    let (train_triples, test_triples) = labeled.split_at(n_train);

    let mut train_bags = Vec::with_capacity(train_triples.len());
    for &(h, t, rel) in train_triples {
        train_bags.push(synth_bag(cfg, &relations, rel, h, t, cfg.noise_rate, &mut rng));
    }
    let mut test_bags = Vec::with_capacity(test_triples.len());
    for &(h, t, rel) in test_triples {
        test_bags.push(synth_bag(cfg, &relations, rel, h, t, 0.0, &mut rng));
    }

    Ok(SyntheticData {
        train: Corpus { relations: relations.clone(), bags: train_bags },
        test: Corpus { relations, bags: test_bags },
    })
}

// ----- batch sampling -----

/// One sampled bag: which bag, and which of its instances fill the K slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagSample {
    pub bag_idx: usize,
    pub instance_idxs: Vec<usize>,
}

/// A training batch of G bags with K instance slots each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagBatch {
    pub samples: Vec<BagSample>,
}

/// Draws G distinct bags, then K instances from each: without replacement
/// when the bag has at least K instances, with replacement otherwise.
pub fn sample_batch(corpus: &Corpus, g: usize, k: usize, rng: &mut ChaCha8Rng) -> BagBatch {
    assert!(g >= 1 && k >= 1, "batch needs g >= 1 and k >= 1");
    assert!(
        corpus.bags.len() >= g,
        "cannot draw {g} distinct bags from a corpus of {}",
        corpus.bags.len()
    );
    let bag_idxs = index_sample(rng, corpus.bags.len(), g);
    let mut samples = Vec::with_capacity(g);
    for bag_idx in bag_idxs.iter() {
        let n = corpus.bags[bag_idx].instances.len();
        let instance_idxs = if n >= k {
            index_sample(rng, n, k).iter().collect()
        } else {
            (0..k).map(|_| rng.gen_range(0..n)).collect()
        };
        samples.push(BagSample { bag_idx, instance_idxs });
    }
    BagBatch { samples }
}
