//! Command-line surface: corpus generation, augmentation, training,
//! evaluation, and the mode-comparison sweep.
//!
//! Exit codes are part of the contract: 1 usage, 2 I/O, 3 validation,
//! 4 numeric trouble.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{
    generate_synthetic, load_jsonl, load_relations, save_jsonl, save_relations, Corpus,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_pr_csv, EvalReport, DEFAULT_P_AT};
use crate::text::{augment, AugmentConfig, AugmentStats, TfidfModel};
use crate::train::{
    load_checkpoint, save_checkpoint, write_metrics_csv, Mode, RunConfig, TrainData, TrainState,
    DEFAULT_SEED,
};

#[derive(Parser)]
#[command(name = "cil", version, about = "Bag-level relation extraction under distant supervision")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic distantly supervised corpus
    GenData(GenDataArgs),
    /// Rewrite a corpus with label-safe token edits
    Augment(AugmentArgs),
    /// Train one model from a run config
    Train(TrainArgs),
    /// Score a test corpus against a checkpoint
    Eval(EvalArgs),
    /// Compare training modes across seeds
    Ablate(AblateArgs),
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1)"))
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Directory for train.jsonl, test.jsonl, relations.txt
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Relation count including NA
    #[arg(long, default_value_t = 11)]
    pub relations: usize,
    /// Entity-pair triples before the train/test split
    #[arg(long, default_value_t = 2000)]
    pub triples: usize,
    /// Fraction of train instances with a wrong bag label
    #[arg(long, default_value_t = 0.3, value_parser = unit_interval)]
    pub noise: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Fraction of triples labeled NA
    #[arg(long, default_value_t = 0.3, value_parser = unit_interval)]
    pub na_fraction: f64,
    /// Smallest and largest bag size
    #[arg(long, default_value_t = 1)]
    pub bag_min: usize,
    #[arg(long, default_value_t = 5)]
    pub bag_max: usize,
    /// Non-entity tokens per sentence, inclusive bounds
    #[arg(long, default_value_t = 6)]
    pub sentence_min: usize,
    #[arg(long, default_value_t = 10)]
    pub sentence_max: usize,
    /// Chance a relational sentence slot uses a pattern word
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub pattern_density: f64,
    /// Chance a relational-bag instance is a filler-only incidental mention
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub distractor_rate: f64,
    #[arg(long, default_value_t = 6)]
    pub pattern_words: usize,
    #[arg(long, default_value_t = 120)]
    pub filler_words: usize,
    #[arg(long, default_value_t = 160)]
    pub entity_pool: usize,
    #[arg(long, default_value_t = 0.8, value_parser = unit_interval)]
    pub train_fraction: f64,
}

#[derive(Args)]
pub struct AugmentArgs {
    /// Corpus to rewrite (JSONL)
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Relation inventory, one name per line
    #[arg(long, value_name = "FILE")]
    pub relations: PathBuf,
    /// Destination JSONL
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Edit budget as a fraction of non-entity tokens
    #[arg(long, default_value_t = 0.15, value_parser = unit_interval)]
    pub ratio: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run config (JSON); its data section names the corpora
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Directory for metrics.csv, checkpoint.bin, and eval reports
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed when the config file does not pin one
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Test corpus (JSONL); relation inventory comes from the checkpoint
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    /// Report destination (JSON); the PR curve lands next to it as CSV
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    /// Top-N cutoffs, comma separated [default: 50,100,200 trimmed to fit]
    #[arg(long, value_delimiter = ',')]
    pub p_at: Option<Vec<usize>>,
    /// Accepted for interface uniformity; evaluation consumes no randomness
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Base run config; mode and seed are overridden per cell
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Modes to compare, comma separated [default: cil,mil_bag,mil_sent]
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<String>>,
    /// Seeds per mode, comma separated [default: 13,14,15]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// First seed when --seeds is omitted; expands to three consecutive
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for per-cell outputs and summary.csv
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Maps library failures onto the exit-code contract.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 2,
        Error::Data { .. } | Error::Config(_) => 3,
        Error::Numeric(_) => 4,
    }
}

/// Full entry point: parse, dispatch, translate errors to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code: u8 = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help text goes to stdout, diagnostics to stderr.
            e.print().expect("clap messages are printable");
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Augment(a) => run_augment(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval_checkpoint(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn corpus_stats(name: &str, corpus: &Corpus) -> String {
    let instances: usize = corpus.bags.iter().map(|b| b.instances.len()).sum();
    format!(
        "{name:<6} {:>6} bags  {:>7} instances  {:>3} relations",
        corpus.bags.len(),
        instances,
        corpus.n_relations()
    )
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_relations: a.relations,
        n_triples: a.triples,
        noise_rate: a.noise,
        na_fraction: a.na_fraction,
        bag_size_range: (a.bag_min, a.bag_max),
        sentence_len_range: (a.sentence_min, a.sentence_max),
        pattern_density: a.pattern_density,
        distractor_rate: a.distractor_rate,
        pattern_words_per_relation: a.pattern_words,
        filler_words: a.filler_words,
        entity_pool: a.entity_pool,
        train_fraction: a.train_fraction,
        seed: a.seed,
    };
    let data = generate_synthetic(&cfg)?;
    ensure_dir(&a.out)?;
    save_relations(&data.train.relations, &a.out.join("relations.txt"))?;
    save_jsonl(&data.train, &a.out.join("train.jsonl"))?;
    save_jsonl(&data.test, &a.out.join("test.jsonl"))?;

    let train_instances: usize = data.train.bags.iter().map(|b| b.instances.len()).sum();
    let distractors = data.train.distractor_instances();
    println!("{}", corpus_stats("train", &data.train));
    println!("{}", corpus_stats("test", &data.test));
    println!(
        "realized train noise fraction: {:.3}",
        (data.train.mislabeled_instances() - distractors) as f64 / train_instances as f64
    );
    if a.distractor_rate > 0.0 {
        println!(
            "realized distractor fraction: {:.3}",
            distractors as f64 / train_instances as f64
        );
    }
    Ok(())
}

fn run_augment(a: &AugmentArgs) -> Result<()> {
    let relations = load_relations(&a.relations)?;
    let corpus = load_jsonl(&a.input, &relations)?;
    let tfidf = TfidfModel::fit(&corpus);
    let aug_cfg = AugmentConfig { ratio: a.ratio, ..AugmentConfig::default() };
    let pool = tfidf.low_idf_pool(aug_cfg.low_score_quantile);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    let mut out = corpus.clone();
    let mut totals = AugmentStats::default();
    let mut n = 0usize;
    for bag in &mut out.bags {
        for inst in &mut bag.instances {
            let (rewritten, stats) = augment(inst, &tfidf, &pool, &aug_cfg, &mut rng);
            *inst = rewritten;
            totals.inserts += stats.inserts;
            totals.substitutions += stats.substitutions;
            n += 1;
        }
    }
    save_jsonl(&out, &a.out)?;
    println!(
        "augmented {n} instances: {} insertions, {} substitutions",
        totals.inserts, totals.substitutions
    );
    Ok(())
}

/// Drops requested cutoffs that exceed the prediction count; falls back to
/// a single all-predictions cutoff when none fit.
fn fit_cutoffs(requested: &[usize], count: usize) -> Vec<usize> {
    let fitting: Vec<usize> = requested.iter().copied().filter(|&n| n <= count).collect();
    if fitting.is_empty() {
        vec![count]
    } else {
        fitting
    }
}

fn load_train_corpora(cfg: &RunConfig) -> Result<(Corpus, Option<Corpus>)> {
    let data = cfg.data.as_ref().ok_or_else(|| {
        Error::config("data: config must name train and relations files for command-line runs")
    })?;
    let relations = load_relations(Path::new(&data.relations))?;
    let train = load_jsonl(Path::new(&data.train), &relations)?;
    let test = match &data.test {
        Some(p) => Some(load_jsonl(Path::new(p), &relations)?),
        None => None,
    };
    Ok((train, test))
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.seed = Some(cfg.seed.or(a.seed).unwrap_or(DEFAULT_SEED));
    let (train_corpus, test_corpus) = load_train_corpora(&cfg)?;
    ensure_dir(&a.out)?;

    let mut state = TrainState::new(&cfg, &train_corpus)?;
    let data = TrainData::new(&train_corpus, &cfg.augment);
    for _ in 0..cfg.total_steps {
        let losses = state.step_once(&train_corpus, &data)?;
        let at_interval = cfg.eval_every > 0 && losses.step % cfg.eval_every == 0;
        if at_interval && losses.step < cfg.total_steps {
            if let Some(test) = &test_corpus {
                let report = interim_eval(&state, test)?;
                report.save(&a.out.join(format!("eval_step{}.json", losses.step)))?;
                println!(
                    "step {:>5}  total {:.4}  auc {:.4}",
                    losses.step, losses.loss_total, report.auc
                );
            }
        }
    }

    write_metrics_csv(&state.history, &a.out.join("metrics.csv"))?;
    save_checkpoint(&state, &a.out.join("checkpoint.bin"))?;
    if let Some(test) = &test_corpus {
        let report = interim_eval(&state, test)?;
        report.save(&a.out.join("report.json"))?;
        write_pr_csv(&a.out.join("pr.csv"), &report.pr_points)?;
        println!(
            "finished {} steps  auc {:.4}  micro-f1 {:.4}  p@mean {:.4}",
            state.step, report.auc, report.micro_f1, report.p_mean
        );
    } else {
        println!("finished {} steps", state.step);
    }
    Ok(())
}

fn interim_eval(state: &TrainState, test: &Corpus) -> Result<EvalReport> {
    let count = test.bags.len() * (test.n_relations() - 1);
    let ns = fit_cutoffs(&DEFAULT_P_AT, count);
    evaluate(&state.model, &state.vocab, test, &ns)
}

fn eval_checkpoint(a: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let test = load_jsonl(&a.test, &state.relations)?;
    let count = test.bags.len() * (test.n_relations() - 1);
    let ns = match &a.p_at {
        Some(ns) => ns.clone(),
        None => fit_cutoffs(&DEFAULT_P_AT, count),
    };
    let report = evaluate(&state.model, &state.vocab, &test, &ns)?;
    report.save(&a.report)?;
    let pr_path = a.report.with_file_name(format!(
        "{}_pr.csv",
        a.report.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    write_pr_csv(&pr_path, &report.pr_points)?;
    println!("auc {:.4}  micro-f1 {:.4}  p@mean {:.4}", report.auc, report.micro_f1, report.p_mean);
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

struct CellOutcome {
    mode: Mode,
    report: EvalReport,
}

fn run_cell(
    base: &RunConfig,
    mode: Mode,
    seed: u64,
    train_corpus: &Corpus,
    test: &Corpus,
    out: &Path,
) -> Result<CellOutcome> {
    let mut cfg = base.clone();
    cfg.mode = mode;
    cfg.seed = Some(seed);
    // The mode decides the pairing strategy; stale keys would contradict it.
    cfg.contrastive.positive = None;
    cfg.contrastive.negative = None;

    let dir = out.join(format!("{}_seed{}", mode.name(), seed));
    ensure_dir(&dir)?;
    let mut state = TrainState::new(&cfg, train_corpus)?;
    let data = TrainData::new(train_corpus, &cfg.augment);
    for _ in 0..cfg.total_steps {
        state.step_once(train_corpus, &data)?;
    }
    write_metrics_csv(&state.history, &dir.join("metrics.csv"))?;
    save_checkpoint(&state, &dir.join("checkpoint.bin"))?;
    let report = interim_eval(&state, test)?;
    report.save(&dir.join("report.json"))?;
    write_pr_csv(&dir.join("pr.csv"), &report.pr_points)?;
    Ok(CellOutcome { mode, report })
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = RunConfig::load(&a.config)?;
    let modes: Vec<Mode> = match &a.modes {
        Some(names) => names.iter().map(|n| Mode::from_name(n)).collect::<Result<_>>()?,
        None => vec![Mode::Cil, Mode::MilBag, Mode::MilSent],
    };
    let seeds: Vec<u64> = match (&a.seeds, a.seed) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => (s..s + 3).collect(),
        (None, None) => vec![DEFAULT_SEED, DEFAULT_SEED + 1, DEFAULT_SEED + 2],
    };
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablate needs at least one mode and one seed"));
    }

    let (train_corpus, test) = load_train_corpora(&base)?;
    let test = test.ok_or_else(|| {
        Error::config("data.test: ablate compares held-out metrics and needs a test corpus")
    })?;
    ensure_dir(&a.out)?;

    let cells: Vec<(Mode, u64)> =
        modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(mode, seed)| {
            let outcome = run_cell(&base, mode, seed, &train_corpus, &test, &a.out)?;
            println!(
                "{} seed {}  auc {:.4}  micro-f1 {:.4}",
                mode, seed, outcome.report.auc, outcome.report.micro_f1
            );
            Ok(outcome)
        })
        .collect::<Result<_>>()?;

    let mut summary = String::from("mode,auc_median,f1_median,pm_median\n");
    for &mode in &modes {
        let pick = |f: &dyn Fn(&EvalReport) -> f64| {
            let mut v: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.mode == mode)
                .map(|o| f(&o.report))
                .collect();
            median(&mut v)
        };
        let auc = pick(&|r| r.auc);
        let f1 = pick(&|r| r.micro_f1);
        let pm = pick(&|r| r.p_mean);
        writeln!(summary, "{mode},{auc},{f1},{pm}").expect("string write");
    }
    let summary_path = a.out.join("summary.csv");
    fs::write(&summary_path, &summary).map_err(|e| Error::io(&summary_path, e))?;
    print!("{summary}");
    Ok(())
}
