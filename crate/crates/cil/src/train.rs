//! Training loop: run configuration, the six training modes, Adam with
//! global-norm gradient clipping, deterministic batch assembly, metrics
//! logging, and binary checkpoints that resume bit for bit.

use std::fmt;
use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bag_encoder::{attend, bag_loss, classify, BagAttnParams, ClassifierParams};
use crate::contrastive::{
    batch_contrastive_loss, lambda_at, mlm_loss, plan_pairs, NegativeSource, PairPlan,
    PositiveSource,
};
use crate::corpus::{sample_batch, Corpus, Instance};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{
    augment, encode, mask_for_mlm, AugmentConfig, EncodedSentence, TfidfModel, Vocab,
};

/// The six training modes: the full objective, the two bag/sentence MIL
/// baselines, and the three pairing-strategy variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "cil")]
    Cil,
    #[serde(rename = "mil_bag")]
    MilBag,
    #[serde(rename = "mil_sent")]
    MilSent,
    #[serde(rename = "cil_randpos")]
    CilRandPos,
    #[serde(rename = "cil_bagpos")]
    CilBagPos,
    #[serde(rename = "cil_randneg")]
    CilRandNeg,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::Cil, Mode::MilBag, Mode::MilSent, Mode::CilRandPos, Mode::CilBagPos, Mode::CilRandNeg];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Cil => "cil",
            Mode::MilBag => "mil_bag",
            Mode::MilSent => "mil_sent",
            Mode::CilRandPos => "cil_randpos",
            Mode::CilBagPos => "cil_bagpos",
            Mode::CilRandNeg => "cil_randneg",
        }
    }

    pub fn from_name(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("mode: unknown mode {s:?}")))
    }

    /// Pairing strategy implied by the mode; `None` for the MIL baselines,
    /// which train on the bag objective alone.
    pub fn contrastive_sources(self) -> Option<(PositiveSource, NegativeSource)> {
        match self {
            Mode::Cil => Some((PositiveSource::Augmented, NegativeSource::BagRep)),
            Mode::CilRandPos => Some((PositiveSource::RandomInstance, NegativeSource::BagRep)),
            Mode::CilBagPos => Some((PositiveSource::BagRep, NegativeSource::BagRep)),
            Mode::CilRandNeg => Some((PositiveSource::Augmented, NegativeSource::RandomInstance)),
            Mode::MilBag | Mode::MilSent => None,
        }
    }

    /// Masked-token prediction runs alongside every contrastive mode.
    pub fn uses_mlm(self) -> bool {
        self.contrastive_sources().is_some()
    }

    pub fn uses_augmentation(self) -> bool {
        matches!(self.contrastive_sources(), Some((PositiveSource::Augmented, _)))
    }

    /// Whether each batch element is a single-sentence bag.
    pub fn sentence_level(self) -> bool {
        self == Mode::MilSent
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ----- run configuration -----

fn d_max_len() -> usize {
    64
}
fn d_model() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_ffn_mult() -> usize {
    4
}
fn d_dropout() -> f64 {
    0.1
}

/// Encoder shape knobs; vocabulary size and seed are supplied at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            max_len: d_max_len(),
            d_model: d_model(),
            n_layers: d_layers(),
            n_heads: d_heads(),
            ffn_mult: d_ffn_mult(),
            dropout: d_dropout(),
        }
    }
}

impl EncoderSection {
    pub fn to_encoder_config(&self, vocab_size: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            dropout: self.dropout,
            seed,
        }
    }
}

fn d_temperature() -> f64 {
    0.1
}
fn d_lambda_mlm() -> f64 {
    0.1
}
fn d_kappa() -> f64 {
    10.0
}
fn d_mask_prob() -> f64 {
    0.15
}

/// Contrastive-objective knobs. The pairing strategy normally follows the
/// mode; explicit `positive`/`negative` keys are accepted but must agree
/// with what the mode implies.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_lambda_mlm")]
    pub lambda_mlm: f64,
    #[serde(default = "d_kappa")]
    pub kappa: f64,
    #[serde(default = "d_mask_prob")]
    pub mask_prob: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection {
            positive: None,
            negative: None,
            temperature: d_temperature(),
            lambda_mlm: d_lambda_mlm(),
            kappa: d_kappa(),
            mask_prob: d_mask_prob(),
        }
    }
}

/// Corpus file locations for command-line runs; library callers pass
/// corpora directly and leave this unset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
    pub relations: String,
}

fn d_g() -> usize {
    8
}
fn d_k() -> usize {
    4
}
fn d_total_steps() -> usize {
    2000
}
fn d_learning_rate() -> f64 {
    1e-3
}
fn d_clip_norm() -> f64 {
    1.0
}
fn d_vocab_min_freq() -> usize {
    1
}

pub const DEFAULT_SEED: u64 = 13;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Resolved lazily: a seed in the file wins over one from the command
    /// line, which wins over the default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Bags per batch.
    #[serde(default = "d_g")]
    pub g: usize,
    /// Instances sampled per bag.
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "d_vocab_min_freq")]
    pub vocab_min_freq: usize,
    /// Evaluate on the test corpus every this many steps; 0 means only at
    /// the end of the run.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub contrastive: ContrastiveSection,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
}

impl RunConfig {
    /// A minimal configuration for the given mode; everything else at
    /// defaults.
    pub fn for_mode(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            seed: None,
            g: d_g(),
            k: d_k(),
            total_steps: d_total_steps(),
            learning_rate: d_learning_rate(),
            clip_norm: d_clip_norm(),
            vocab_min_freq: d_vocab_min_freq(),
            eval_every: 0,
            encoder: EncoderSection::default(),
            contrastive: ContrastiveSection::default(),
            augment: AugmentConfig::default(),
            data: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::data(path, e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Pairing strategy for this run: mode-implied, cross-checked against
    /// any explicit strategy keys.
    pub fn pair_sources(&self) -> Result<Option<(PositiveSource, NegativeSource)>> {
        let implied = self.mode.contrastive_sources();
        if let Some(p) = &self.contrastive.positive {
            let parsed = parse_positive(p)?;
            match implied {
                Some((want, _)) if want == parsed => {}
                Some((want, _)) => {
                    return Err(Error::config(format!(
                        "contrastive.positive: {p:?} contradicts mode {} (implies {want:?})",
                        self.mode
                    )))
                }
                None => {
                    return Err(Error::config(format!(
                        "contrastive.positive: mode {} has no contrastive term",
                        self.mode
                    )))
                }
            }
        }
        if let Some(n) = &self.contrastive.negative {
            let parsed = parse_negative(n)?;
            match implied {
                Some((_, want)) if want == parsed => {}
                Some((_, want)) => {
                    return Err(Error::config(format!(
                        "contrastive.negative: {n:?} contradicts mode {} (implies {want:?})",
                        self.mode
                    )))
                }
                None => {
                    return Err(Error::config(format!(
                        "contrastive.negative: mode {} has no contrastive term",
                        self.mode
                    )))
                }
            }
        }
        Ok(implied)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(format!("{key}: {msg}")));
        if self.g == 0 {
            return fail("g", "must be positive".into());
        }
        if self.mode.contrastive_sources().is_some() && self.g < 2 {
            return fail("g", format!("mode {} needs at least 2 bags per batch", self.mode));
        }
        if self.k == 0 {
            return fail("k", "must be positive".into());
        }
        if self.mode == Mode::CilRandPos && self.k < 2 {
            return fail("k", "random-instance positives need at least 2 instances per bag".into());
        }
        if self.total_steps == 0 {
            return fail("total_steps", "must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail("clip_norm", format!("must be positive, got {}", self.clip_norm));
        }
        let enc = &self.encoder;
        if enc.d_model == 0 || enc.n_heads == 0 || enc.d_model % enc.n_heads != 0 {
            return fail(
                "encoder.d_model",
                format!("d_model {} must be a positive multiple of n_heads {}", enc.d_model, enc.n_heads),
            );
        }
        if enc.n_layers == 0 {
            return fail("encoder.n_layers", "must be positive".into());
        }
        if enc.ffn_mult == 0 {
            return fail("encoder.ffn_mult", "must be positive".into());
        }
        if enc.max_len < 8 {
            return fail("encoder.max_len", format!("{} is too short for markers plus content", enc.max_len));
        }
        if !(0.0..1.0).contains(&enc.dropout) {
            return fail("encoder.dropout", format!("must be in [0, 1), got {}", enc.dropout));
        }
        let con = &self.contrastive;
        if !(con.temperature.is_finite() && con.temperature > 0.0) {
            return fail("contrastive.temperature", format!("must be positive, got {}", con.temperature));
        }
        if !(con.kappa.is_finite() && con.kappa > 0.0) {
            return fail("contrastive.kappa", format!("must be positive, got {}", con.kappa));
        }
        if !(con.lambda_mlm.is_finite() && con.lambda_mlm >= 0.0) {
            return fail("contrastive.lambda_mlm", format!("must be non-negative, got {}", con.lambda_mlm));
        }
        if !(0.0..1.0).contains(&con.mask_prob) || con.mask_prob == 0.0 {
            return fail("contrastive.mask_prob", format!("must be in (0, 1), got {}", con.mask_prob));
        }
        let aug = &self.augment;
        if !(aug.ratio > 0.0 && aug.ratio <= 1.0) {
            return fail("augment.ratio", format!("must be in (0, 1], got {}", aug.ratio));
        }
        if !(0.0..=1.0).contains(&aug.insert_prob) {
            return fail("augment.insert_prob", format!("must be in [0, 1], got {}", aug.insert_prob));
        }
        if !(aug.low_score_quantile > 0.0 && aug.low_score_quantile <= 1.0) {
            return fail("augment.low_score_quantile", format!("must be in (0, 1], got {}", aug.low_score_quantile));
        }
        self.pair_sources()?;
        Ok(())
    }
}

fn parse_positive(s: &str) -> Result<PositiveSource> {
    match s {
        "augmented" => Ok(PositiveSource::Augmented),
        "random_instance" => Ok(PositiveSource::RandomInstance),
        "bag_rep" => Ok(PositiveSource::BagRep),
        other => Err(Error::config(format!(
            "contrastive.positive: unknown source {other:?} (augmented, random_instance, bag_rep)"
        ))),
    }
}

fn parse_negative(s: &str) -> Result<NegativeSource> {
    match s {
        "bag_rep" => Ok(NegativeSource::BagRep),
        "random_instance" => Ok(NegativeSource::RandomInstance),
        other => Err(Error::config(format!(
            "contrastive.negative: unknown source {other:?} (bag_rep, random_instance)"
        ))),
    }
}

// ----- optimizer -----

/// Adam with global-norm gradient clipping applied before the moment
/// updates. Parameters whose gradient is absent this step are skipped
/// entirely, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn from_parts(lr: f64, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t, m, v }
    }

    fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update over the parameter list this optimizer was sized for.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &[(String, Tensor)], clip_norm: f64) -> f64 {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different parameter list");
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, t)| t.grad()).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, ((_, p), grad)) in params.iter().zip(&grads).enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_values(|vals| {
                assert_eq!(vals.len(), g.len(), "gradient length mismatch");
                for j in 0..vals.len() {
                    let gj = g[j] * scale;
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    vals[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                }
            });
        }
        norm
    }
}

// ----- model bundle -----

/// Every trainable tensor of a run: encoder stack, bag attention, and the
/// relation classifier.
pub struct ModelParams {
    pub encoder: Encoder,
    pub attn: BagAttnParams,
    pub cls: ClassifierParams,
}

impl ModelParams {
    /// The encoder draws from its own seed; the head parameters draw from
    /// `head_seed` (attention first, classifier second).
    pub fn init(enc_cfg: EncoderConfig, n_relations: usize, head_seed: u64) -> Result<ModelParams> {
        let encoder = Encoder::new(enc_cfg)?;
        let rep_dim = encoder.cfg.rep_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
        let attn = BagAttnParams::init(n_relations, rep_dim, &mut rng);
        let cls = ClassifierParams::init(n_relations, rep_dim, &mut rng);
        Ok(ModelParams { encoder, attn, cls })
    }

    /// Stable name → tensor listing; the order is the checkpoint blob order
    /// and the optimizer slot order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.params.named();
        out.extend(self.attn.named());
        out.extend(self.cls.named());
        out
    }
}

// ----- loss composition -----

/// Everything `compose_loss` needs for one step, resolved to plain data so
/// the same inputs can be replayed (finite-difference checks rely on this).
pub struct StepInputs {
    pub g: usize,
    pub k: usize,
    /// Bag-major originals; already mask-corrupted when MLM is active.
    pub encoded: Vec<EncodedSentence>,
    pub encoded_aug: Option<Vec<EncodedSentence>>,
    /// One relation id per bag.
    pub bag_labels: Vec<usize>,
    pub plans: Option<Vec<PairPlan>>,
    pub mlm_positions: Vec<(usize, usize)>,
    pub mlm_targets: Vec<usize>,
    pub sentence_level: bool,
    pub lambda: f64,
    pub temperature: f64,
    pub lambda_mlm: f64,
}

pub struct LossTerms {
    pub bag: Tensor,
    pub contrastive: Option<Tensor>,
    pub mlm: Option<Tensor>,
    pub total: Tensor,
}

/// Builds the full objective `L = L_B + lambda * L_C + lambda_mlm * L_M`
/// for prepared inputs. Pass an rng to enable dropout; `None` is the
/// deterministic path used by evaluation and gradient checks.
pub fn compose_loss(
    model: &ModelParams,
    inputs: &StepInputs,
    mut rng: Option<&mut ChaCha8Rng>,
) -> LossTerms {
    let rd = model.encoder.cfg.rep_dim();
    let (g, k) = (inputs.g, inputs.k);
    assert_eq!(inputs.encoded.len(), g * k, "encoded batch is not g*k sentences");
    assert_eq!(inputs.bag_labels.len(), g, "one label per bag");
    let out = model.encoder.forward(&inputs.encoded, rng.as_deref_mut());
    let reps_aug = inputs
        .encoded_aug
        .as_ref()
        .map(|enc| model.encoder.forward(enc, rng.as_deref_mut()).reps.reshape(&[g, k, rd]));
    let reps3 = out.reps.reshape(&[g, k, rd]);

    let (bag_reps, bag) = if inputs.sentence_level {
        // Each sentence is its own bag carrying its source bag's label;
        // attention over a single instance is vacuous by construction.
        let n = g * k;
        let labels: Vec<usize> = (0..n).map(|i| inputs.bag_labels[i / k]).collect();
        let att = attend(&out.reps.reshape(&[n, 1, rd]), &labels, &model.attn);
        let logits = classify(&att.bag_reps, &model.cls);
        (att.bag_reps, bag_loss(&logits, &labels))
    } else {
        let att = attend(&reps3, &inputs.bag_labels, &model.attn);
        let logits = classify(&att.bag_reps, &model.cls);
        (att.bag_reps, bag_loss(&logits, &inputs.bag_labels))
    };

    let contrastive = inputs.plans.as_ref().map(|plans| {
        batch_contrastive_loss(plans, &reps3, reps_aug.as_ref(), &bag_reps, inputs.temperature)
    });
    let mlm = (!inputs.mlm_positions.is_empty()).then(|| {
        let logits = model.encoder.mlm_logits(&out.hidden, &inputs.mlm_positions);
        mlm_loss(&logits, &inputs.mlm_targets)
    });

    let mut total = bag.clone();
    if let Some(c) = &contrastive {
        total = total.add(&c.scale(inputs.lambda));
    }
    if let Some(m) = &mlm {
        total = total.add(&m.scale(inputs.lambda_mlm));
    }
    LossTerms { bag, contrastive, mlm, total }
}

// ----- training state -----

/// One logged step; the fields mirror the metrics CSV columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub lambda: f64,
    pub loss_bag: f64,
    pub loss_cil: f64,
    pub loss_mlm: f64,
    pub loss_total: f64,
}

/// Derived training inputs that are a pure function of the corpus; rebuilt
/// rather than checkpointed.
pub struct TrainData {
    pub tfidf: TfidfModel,
    pub pool: Vec<String>,
}

impl TrainData {
    pub fn new(corpus: &Corpus, aug: &AugmentConfig) -> TrainData {
        let tfidf = TfidfModel::fit(corpus);
        let pool = tfidf.low_idf_pool(aug.low_score_quantile);
        TrainData { tfidf, pool }
    }
}

pub struct TrainState {
    /// Run configuration with the seed resolved.
    pub cfg: RunConfig,
    pub relations: Vec<String>,
    pub vocab: Vocab,
    pub model: ModelParams,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub history: Vec<StepLosses>,
}

/// Stream separation: the encoder initializes from `seed`, the head
/// parameters from `seed + 1`, and the training loop consumes `seed + 2`.
fn master_seed(cfg: &RunConfig) -> u64 {
    cfg.seed().wrapping_add(2)
}

impl TrainState {
    pub fn new(cfg: &RunConfig, train: &Corpus) -> Result<TrainState> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.seed = Some(cfg.seed());
        if train.n_relations() < 2 {
            return Err(Error::config("training corpus must define NA plus at least one relation"));
        }
        if train.bags.len() < cfg.g {
            return Err(Error::config(format!(
                "g: corpus has {} bags, fewer than the batch size {}",
                train.bags.len(),
                cfg.g
            )));
        }
        let vocab = Vocab::from_corpora(&[train], cfg.vocab_min_freq);
        let enc_cfg = cfg.encoder.to_encoder_config(vocab.len(), cfg.seed());
        let model = ModelParams::init(enc_cfg, train.n_relations(), cfg.seed().wrapping_add(1))?;
        let sizes: Vec<usize> = model.named().iter().map(|(_, t)| t.values().len()).collect();
        let adam = Adam::new(cfg.learning_rate, &sizes);
        let rng = ChaCha8Rng::seed_from_u64(master_seed(&cfg));
        Ok(TrainState {
            cfg,
            relations: train.relations.clone(),
            vocab,
            model,
            adam,
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Runs one optimization step. Random draws happen in a fixed order:
    /// batch sampling, augmentation per instance, masking per sentence,
    /// pair planning, then dropout inside the two forward passes.
    pub fn step_once(&mut self, corpus: &Corpus, data: &TrainData) -> Result<StepLosses> {
        if corpus.relations != self.relations {
            return Err(Error::config("corpus relation inventory changed since training began"));
        }
        let cfg = &self.cfg;
        let (g, k) = (cfg.g, cfg.k);
        let max_len = self.model.encoder.cfg.max_len;
        let sources = cfg.mode.contrastive_sources();

        let batch = sample_batch(corpus, g, k, &mut self.rng);
        let mut insts: Vec<&Instance> = Vec::with_capacity(g * k);
        let mut bag_labels = Vec::with_capacity(g);
        for sample in &batch.samples {
            let bag = &corpus.bags[sample.bag_idx];
            bag_labels.push(bag.relation_id);
            for &i in &sample.instance_idxs {
                insts.push(&bag.instances[i]);
            }
        }

        let encoded_aug = if cfg.mode.uses_augmentation() {
            let mut out = Vec::with_capacity(g * k);
            for inst in &insts {
                let (twin, _) = augment(inst, &data.tfidf, &data.pool, &cfg.augment, &mut self.rng);
                out.push(encode(&twin, &self.vocab, max_len)?);
            }
            Some(out)
        } else {
            None
        };

        let mut encoded = Vec::with_capacity(g * k);
        for inst in &insts {
            encoded.push(encode(inst, &self.vocab, max_len)?);
        }
        let mut mlm_positions = Vec::new();
        let mut mlm_targets = Vec::new();
        if cfg.mode.uses_mlm() {
            for (row, enc) in encoded.iter_mut().enumerate() {
                let (ids, targets) =
                    mask_for_mlm(&enc.ids, self.vocab.len(), cfg.contrastive.mask_prob, &mut self.rng);
                enc.ids = ids;
                for (pos, original) in targets {
                    mlm_positions.push((row, pos));
                    mlm_targets.push(original);
                }
            }
        }
        let plans = match sources {
            Some((p, n)) => Some(plan_pairs(g, k, p, n, &mut self.rng)?),
            None => None,
        };

        let lambda = lambda_at(self.step, cfg.total_steps, cfg.contrastive.kappa);
        let inputs = StepInputs {
            g,
            k,
            encoded,
            encoded_aug,
            bag_labels,
            plans,
            mlm_positions,
            mlm_targets,
            sentence_level: cfg.mode.sentence_level(),
            lambda,
            temperature: cfg.contrastive.temperature,
            lambda_mlm: cfg.contrastive.lambda_mlm,
        };
        let terms = compose_loss(&self.model, &inputs, Some(&mut self.rng));

        let losses = StepLosses {
            step: self.step,
            lambda,
            loss_bag: terms.bag.item(),
            loss_cil: terms.contrastive.as_ref().map_or(0.0, Tensor::item),
            loss_mlm: terms.mlm.as_ref().map_or(0.0, Tensor::item),
            loss_total: terms.total.item(),
        };
        if !losses.loss_total.is_finite() {
            return Err(Error::numeric(format!(
                "diverged at step {}: total {} (bag {}, contrastive {}, mlm {}, lambda {})",
                losses.step, losses.loss_total, losses.loss_bag, losses.loss_cil, losses.loss_mlm, lambda
            )));
        }

        terms.total.backward();
        let named = self.model.named();
        self.adam.step(&named, self.cfg.clip_norm);
        for (_, t) in &named {
            t.zero_grad();
        }
        self.step += 1;
        self.history.push(losses);
        Ok(losses)
    }
}

/// Trains from scratch for the configured number of steps.
pub fn train_run(cfg: &RunConfig, train: &Corpus) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, train)?;
    let data = TrainData::new(train, &state.cfg.augment);
    while state.step < state.cfg.total_steps {
        state.step_once(train, &data)?;
    }
    Ok(state)
}

/// Writes the loss history as `step,lambda,loss_bag,loss_cil,loss_mlm,loss_total`.
pub fn write_metrics_csv(history: &[StepLosses], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "step,lambda,loss_bag,loss_cil,loss_mlm,loss_total").map_err(io_err)?;
    for row in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.step, row.lambda, row.loss_bag, row.loss_cil, row.loss_mlm, row.loss_total
        )
        .map_err(io_err)?;
    }
    Ok(())
}

// ----- checkpoints -----

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: usize,
    config: RunConfig,
    relations: Vec<String>,
    vocab: Vec<String>,
    rng_seed: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    adam_t: u64,
    tensors: Vec<TensorMeta>,
    history: Vec<StepLosses>,
}

/// Layout: little-endian u64 manifest length, JSON manifest, then f64
/// little-endian blobs — parameter values in manifest order, then the
/// optimizer's first moments, then its second moments.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let named = state.model.named();
    let word_pos = state.rng.get_word_pos();
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        step: state.step,
        config: state.cfg.clone(),
        relations: state.relations.clone(),
        vocab: state.vocab.tokens().to_vec(),
        rng_seed: master_seed(&state.cfg),
        rng_word_pos_hi: (word_pos >> 64) as u64,
        rng_word_pos_lo: word_pos as u64,
        adam_t: state.adam.t,
        tensors: named
            .iter()
            .map(|(name, t)| TensorMeta { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
        history: state.history.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&manifest_bytes).map_err(io_err)?;
    let mut write_blob = |vals: &[f64]| -> Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    for (_, t) in &named {
        write_blob(&t.values())?;
    }
    let (m, v) = state.adam.moments();
    for row in m {
        write_blob(row)?;
    }
    for row in v {
        write_blob(row)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::data(path, 0, "checkpoint truncated");
    if bytes.len() < 8 {
        return Err(truncated());
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let blob_start = 8 + manifest_len;
    if bytes.len() < blob_start {
        return Err(truncated());
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..blob_start])
        .map_err(|e| Error::data(path, 0, format!("bad manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "checkpoint version {} is not {CHECKPOINT_VERSION}",
            manifest.version
        )));
    }
    manifest.config.validate()?;

    let vocab = Vocab::from_tokens(manifest.vocab)?;
    let enc_cfg = manifest.config.encoder.to_encoder_config(vocab.len(), manifest.config.seed());
    let model = ModelParams::init(
        enc_cfg,
        manifest.relations.len(),
        manifest.config.seed().wrapping_add(1),
    )?;
    let named = model.named();
    if named.len() != manifest.tensors.len() {
        return Err(Error::config(format!(
            "checkpoint lists {} tensors, model has {}",
            manifest.tensors.len(),
            named.len()
        )));
    }
    for ((name, tensor), meta) in named.iter().zip(&manifest.tensors) {
        if *name != meta.name {
            return Err(Error::config(format!(
                "checkpoint tensor order mismatch: {:?} vs {:?}",
                meta.name, name
            )));
        }
        if tensor.shape() != meta.shape.as_slice() {
            return Err(Error::config(format!(
                "checkpoint tensor {name}: stored shape {:?} does not match rebuilt shape {:?}",
                meta.shape,
                tensor.shape()
            )));
        }
    }

    let sizes: Vec<usize> = named.iter().map(|(_, t)| t.values().len()).collect();
    let total: usize = sizes.iter().sum();
    if bytes.len() != blob_start + 3 * total * 8 {
        return Err(truncated());
    }
    let mut cursor = blob_start;
    let read_blob = |n: usize, cursor: &mut usize| -> Vec<f64> {
        let out = bytes[*cursor..*cursor + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *cursor += n * 8;
        out
    };
    for ((_, tensor), &n) in named.iter().zip(&sizes) {
        tensor.set_values(&read_blob(n, &mut cursor));
    }
    let m: Vec<Vec<f64>> = sizes.iter().map(|&n| read_blob(n, &mut cursor)).collect();
    let v: Vec<Vec<f64>> = sizes.iter().map(|&n| read_blob(n, &mut cursor)).collect();
    let adam = Adam::from_parts(manifest.config.learning_rate, manifest.adam_t, m, v);

    let mut rng = ChaCha8Rng::seed_from_u64(manifest.rng_seed);
    rng.set_word_pos(
        ((manifest.rng_word_pos_hi as u128) << 64) | manifest.rng_word_pos_lo as u128,
    );

    Ok(TrainState {
        cfg: manifest.config,
        relations: manifest.relations,
        vocab,
        model,
        adam,
        rng,
        step: manifest.step,
        history: manifest.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};
    use tempfile::tempdir;

    fn tiny_corpus(n_relations: usize, n_triples: usize, noise: f64, seed: u64) -> Corpus {
        let cfg = SynthConfig {
            n_relations,
            n_triples,
            noise_rate: noise,
            na_fraction: 0.25,
            bag_size_range: (1, 4),
            sentence_len_range: (4, 7),
            pattern_density: 0.6,
            pattern_words_per_relation: 4,
            filler_words: 30,
            entity_pool: 40,
            train_fraction: 0.8,
            seed,
        };
        generate_synthetic(&cfg).unwrap().train
    }

    fn tiny_run_config(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig::for_mode(mode);
        cfg.seed = Some(7);
        cfg.g = 3;
        cfg.k = 2;
        cfg.total_steps = 6;
        cfg.encoder = EncoderSection {
            max_len: 20,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            dropout: 0.1,
        };
        cfg
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in Mode::ALL {
            assert_eq!(Mode::from_name(mode.name()).unwrap(), mode);
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(json, format!("\"{}\"", mode.name()));
            let back: Mode = serde_json::from_str(&json).unwrap();
            assert_eq!(back, mode);
        }
        assert!(Mode::from_name("bogus").is_err());
    }

    #[test]
    fn config_parses_with_defaults_and_validates_keys() {
        let cfg: RunConfig = serde_json::from_str(r#"{"mode":"cil"}"#).unwrap();
        assert_eq!(cfg.g, 8);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.total_steps, 2000);
        assert_eq!(cfg.seed(), DEFAULT_SEED);
        cfg.validate().unwrap();

        let bad: RunConfig = serde_json::from_str(r#"{"mode":"cil","g":1}"#).unwrap();
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("g:"), "error should name the key: {msg}");

        let bad: RunConfig = serde_json::from_str(r#"{"mode":"cil_randpos","k":1}"#).unwrap();
        assert!(bad.validate().unwrap_err().to_string().contains("k:"));

        let unknown = serde_json::from_str::<RunConfig>(r#"{"mode":"cil","bogus_key":1}"#);
        assert!(unknown.unwrap_err().to_string().contains("bogus_key"));

        let clash: RunConfig = serde_json::from_str(
            r#"{"mode":"cil_randpos","contrastive":{"positive":"augmented"}}"#,
        )
        .unwrap();
        let msg = clash.validate().unwrap_err().to_string();
        assert!(msg.contains("contradicts"), "{msg}");

        let agree: RunConfig = serde_json::from_str(
            r#"{"mode":"cil","contrastive":{"positive":"augmented","negative":"bag_rep"}}"#,
        )
        .unwrap();
        agree.validate().unwrap();
    }

    #[test]
    fn adam_skips_missing_gradients_and_zero_is_identity() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]);
        let b = Tensor::param(&[2], vec![3.0, 4.0]);
        let named = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let mut adam = Adam::new(0.1, &[2, 2]);
        // a gets an explicitly zero gradient, b gets none at all.
        a.zero_grad();
        let loss_free = a.mul(&Tensor::new(&[2], vec![0.0, 0.0])).sum_all();
        loss_free.backward();
        let norm = adam.step(&named, 1.0);
        assert_eq!(norm, 0.0);
        assert_eq!(a.values(), vec![1.0, 2.0]);
        assert_eq!(b.values(), vec![3.0, 4.0]);
    }

    #[test]
    fn clip_rescales_the_global_gradient_norm() {
        let p = Tensor::param(&[2], vec![0.0, 0.0]);
        let weights = Tensor::new(&[2], vec![3.0, 4.0]);
        p.mul(&weights).sum_all().backward();
        let named = vec![("p".to_string(), p.clone())];
        let mut adam = Adam::new(0.01, &[2]);
        let norm = adam.step(&named, 1.0);
        assert!((norm - 5.0).abs() < 1e-12, "pre-clip norm should be 5, got {norm}");
        // Clipped gradient is [0.6, 0.8]; first moments record exactly that
        // scaled by (1 - beta1).
        assert!((adam.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((adam.m[0][1] - 0.1 * 0.8).abs() < 1e-15);
        let post_norm: f64 = adam.m[0].iter().map(|x| (x / 0.1) * (x / 0.1)).sum::<f64>().sqrt();
        assert!(post_norm <= 1.0 + 1e-9, "post-clip norm {post_norm}");
    }

    #[test]
    fn bag_loss_falls_on_a_clean_tiny_corpus() {
        let corpus = tiny_corpus(3, 40, 0.0, 3);
        let mut cfg = tiny_run_config(Mode::MilBag);
        cfg.total_steps = 200;
        cfg.learning_rate = 3e-3;
        let state = train_run(&cfg, &corpus).unwrap();
        let first: f64 =
            state.history[..20].iter().map(|h| h.loss_bag).sum::<f64>() / 20.0;
        let last: f64 =
            state.history[180..].iter().map(|h| h.loss_bag).sum::<f64>() / 20.0;
        assert!(
            last < first,
            "bag loss should fall on clean data: first 20 avg {first}, last 20 avg {last}"
        );
    }

    #[test]
    fn identical_seeds_produce_identical_traces() {
        let corpus = tiny_corpus(4, 30, 0.2, 5);
        let cfg = tiny_run_config(Mode::Cil);
        let a = train_run(&cfg, &corpus).unwrap();
        let b = train_run(&cfg, &corpus).unwrap();
        assert_eq!(a.history, b.history);
        for ((na, ta), (nb, tb)) in a.model.named().iter().zip(b.model.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values(), "weights diverged in {na}");
        }
    }

    #[test]
    fn every_mode_trains_and_logs_its_terms() {
        let corpus = tiny_corpus(4, 30, 0.2, 9);
        for mode in Mode::ALL {
            let cfg = tiny_run_config(mode);
            let state = train_run(&cfg, &corpus).unwrap();
            assert_eq!(state.history.len(), 6);
            let has_cil = state.history.iter().any(|h| h.loss_cil != 0.0);
            let has_mlm = state.history.iter().any(|h| h.loss_mlm != 0.0);
            if mode.uses_mlm() {
                assert!(has_cil, "{mode}: contrastive term should be logged");
                assert!(has_mlm, "{mode}: mlm term should be logged");
            } else {
                assert!(!has_cil, "{mode}: contrastive term must stay zero");
                assert!(!has_mlm, "{mode}: mlm term must stay zero");
            }
            // The first step's weighted sum holds bit for bit; the schedule
            // starts at exactly zero.
            let h0 = state.history[0];
            assert_eq!(h0.lambda, 0.0);
            let want = h0.loss_bag
                + if mode.uses_mlm() { 0.1 * h0.loss_mlm } else { 0.0 };
            assert_eq!(h0.loss_total, want, "{mode}: step-0 total");
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let corpus = tiny_corpus(4, 30, 0.2, 11);
        let cfg = tiny_run_config(Mode::Cil);
        let data = TrainData::new(&corpus, &cfg.augment);

        let mut straight = TrainState::new(&cfg, &corpus).unwrap();
        for _ in 0..6 {
            straight.step_once(&corpus, &data).unwrap();
        }

        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut first_half = TrainState::new(&cfg, &corpus).unwrap();
        for _ in 0..3 {
            first_half.step_once(&corpus, &data).unwrap();
        }
        save_checkpoint(&first_half, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 3);
        for _ in 0..3 {
            resumed.step_once(&corpus, &data).unwrap();
        }

        assert_eq!(straight.history, resumed.history, "loss traces must match bit for bit");
        for ((name, ta), (_, tb)) in straight.model.named().iter().zip(resumed.model.named().iter())
        {
            assert_eq!(ta.values(), tb.values(), "weights diverged in {name}");
        }
    }

    #[test]
    fn checkpoint_rejects_truncation_and_foreign_shapes() {
        let corpus = tiny_corpus(3, 20, 0.0, 13);
        let mut cfg = tiny_run_config(Mode::MilBag);
        cfg.total_steps = 2;
        let state = train_run(&cfg, &corpus).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let clipped = dir.path().join("clipped.bin");
        fs::write(&clipped, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint(&clipped).err().unwrap().to_string().contains("truncated"));

        // Rewrite the manifest to claim a wider model; the stored tensor
        // shapes no longer match what that config builds.
        let mlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        manifest["config"]["encoder"]["d_model"] = serde_json::json!(32);
        let edited = serde_json::to_vec(&manifest).unwrap();
        let mut forged = (edited.len() as u64).to_le_bytes().to_vec();
        forged.extend_from_slice(&edited);
        forged.extend_from_slice(&bytes[8 + mlen..]);
        let forged_path = dir.path().join("forged.bin");
        fs::write(&forged_path, forged).unwrap();
        let msg = load_checkpoint(&forged_path).err().unwrap().to_string();
        assert!(msg.contains("tok_emb"), "error should name the tensor: {msg}");
    }

    #[test]
    fn metrics_csv_has_the_pinned_header_and_exact_zero_lambda() {
        let history = vec![
            StepLosses {
                step: 0,
                lambda: 0.0,
                loss_bag: 1.5,
                loss_cil: 2.0,
                loss_mlm: 0.5,
                loss_total: 1.55,
            },
            StepLosses {
                step: 1,
                lambda: 0.004999979166692708,
                loss_bag: 1.4,
                loss_cil: 1.9,
                loss_mlm: 0.4,
                loss_total: 1.45,
            },
        ];
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&history, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,lambda,loss_bag,loss_cil,loss_mlm,loss_total");
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,0,"), "lambda must print as exactly 0: {first}");
    }
}
