//! The `pagen` command line: corpus generation, training, generation,
//! evaluation, self-checks, report tables and variant comparisons.
//!
//! Exit codes: 0 success, 1 a module reported an error (message prefixed
//! with the module name), 2 bad usage.

pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod selfcheck;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use thiserror::Error;

use crate::corpus::{generate_synthetic, read_corpus, write_corpus, CorpusError, UNSPECIFIED_USER_ID};
use crate::generation::{generate, GenError, GenRequest, ZMode};
use crate::metrics::{MetricConfig, MetricError, WordVectors};
use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::objective::ObjectiveError;
use crate::trainer::{load_tables, save_tables, TrainConfig, TrainError, Trainer, MODEL_FILE};

use manifest::{hash_file, RunManifest};
use pipeline::{evaluate, train_model, Arm, Dataset, EvalOptions, EvalReport, MetricSet};
use report::{ranked, render_csv, render_table, Row};

pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const ITEMS_FILE: &str = "items.csv";
pub const TABLE_FILE: &str = "table.txt";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("trainer: {0}")]
    Train(#[from] TrainError),
    #[error("generation: {0}")]
    Generation(#[from] GenError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("report: {0}")]
    Report(String),
    #[error("selfcheck: {0}")]
    Selfcheck(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "pagen", version, about = "Persona-aware response generation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic persona corpus.
    GenCorpus {
        #[arg(long, default_value_t = 8)]
        users: usize,
        #[arg(long, default_value_t = 400)]
        per_user: usize,
        #[arg(long, default_value_t = 0.9)]
        strength: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a corpus, train one model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate replies for one query.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value = UNSPECIFIED_USER_ID)]
        user: String,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = crate::generation::DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long, default_value = "sample")]
        z_mode: ZMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hypotheses to print.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Rank by summed log-probability instead of per token.
        #[arg(long)]
        raw_scores: bool,
    },
    /// Compute metrics for a trained model against a reference seq2seq.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ref_model: PathBuf,
        /// Test triples; defaults to the split saved next to the model.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Row label; defaults to the variant name.
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Gradient checks and metric oracles.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate evaluation directories.
    Report {
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several variants on one corpus with one seed.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant names or ablations (`w/o R1`, `w/o R2`, `w/o UE`).
        #[arg(long)]
        variants: String,
        #[arg(long, default_value = "S2SA")]
        reference: String,
        #[arg(long)]
        out: PathBuf,
        /// Also seeds the split and every training run.
        #[command(flatten)]
        metrics: MetricArgs,
    },
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    #[arg(long, default_value = "urank,uppl,udistinct,bleu1,embed")]
    pub metrics: MetricSet,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// uRank distractors per triple.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Users per uDistinct query.
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = crate::generation::DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub min_user_utterances: usize,
    /// Cap on uDistinct queries; 0 uses all.
    #[arg(long, default_value_t = 0)]
    pub max_queries: usize,
    #[arg(long, default_value = "sample")]
    pub z_mode: ZMode,
}

impl MetricArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            metrics: self.metrics,
            config: MetricConfig {
                n: self.n,
                m: self.m,
                rounds: self.rounds,
                min_user_utterances: self.min_user_utterances,
                lambda: self.lambda,
                beam: self.beam,
                max_len: self.max_len,
            },
            z_mode: self.z_mode,
            seed: self.seed,
            max_queries: self.max_queries,
        }
    }

    fn vectors(&self) -> Result<Option<WordVectors>, CliError> {
        match &self.vectors {
            None => Ok(None),
            Some(p) => {
                require_file(p, "--vectors")?;
                Ok(Some(WordVectors::load(p)?))
            }
        }
    }
}

/// Canonical text of the evaluation settings, hashed into manifests.
fn options_text(o: &EvalOptions) -> String {
    let m = o.metrics;
    format!(
        "metrics={}{}{}{}{}\nn={}\nm={}\nrounds={}\nmin_user_utterances={}\nlambda={:?}\nbeam={}\nmax_len={}\nz_mode={:?}\nseed={}\nmax_queries={}\n",
        if m.urank { "urank," } else { "" },
        if m.uppl { "uppl," } else { "" },
        if m.udistinct { "udistinct," } else { "" },
        if m.bleu1 { "bleu1," } else { "" },
        if m.embed { "embed," } else { "" },
        o.config.n,
        o.config.m,
        o.config.rounds,
        o.config.min_user_utterances,
        o.config.lambda,
        o.config.beam,
        o.config.max_len,
        o.z_mode,
        o.seed,
        o.max_queries
    )
}

/// Worker cap from `PAGEN_THREADS`, else the available parallelism.
pub fn threads() -> usize {
    std::env::var("PAGEN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn require_file(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag} {}: no such file", path.display())))
    }
}

/// Row label for a model: the variant name, or the ablation it realizes.
pub fn model_label(cfg: &ModelConfig) -> String {
    if cfg.variant == Variant::PaGenerator {
        let off: Vec<&str> = [(!cfg.use_r1, "R1"), (!cfg.use_r2, "R2"), (!cfg.decode_with_user, "UE")]
            .into_iter()
            .filter_map(|(off, name)| off.then_some(name))
            .collect();
        if !off.is_empty() {
            return format!("w/o {}", off.join("+"));
        }
    }
    cfg.variant.name().to_owned()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, errors to stderr.
pub fn run(args: &[String], out: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, args, out) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = match args.get(1).and_then(|name| cmd.find_subcommand_mut(name)) {
                Some(sub) => sub.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("error: {msg}\n\n{usage}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::GenCorpus {
            users,
            per_user,
            strength,
            seed,
            out: path,
        } => {
            if users < 2 || per_user == 0 || !(strength > 0.5 && strength < 1.0) {
                return Err(CliError::Usage("need --users >= 2, --per-user >= 1 and --strength in (0.5, 1)".into()));
            }
            let c = generate_synthetic(users, per_user, strength, seed);
            write_corpus(&c.triples, &path)?;
            writeln!(out, "wrote {} triples to {}", c.triples.len(), path.display())?;
        }
        Command::Train { config, data, out: dir, seed } => {
            require_file(&config, "--config")?;
            require_file(&data, "--data")?;
            let manifest = train_run(&config, &data, &dir, seed, args)?;
            writeln!(out, "model={}\ncheckpoint_hash={}", dir.join(MODEL_FILE).display(), manifest.checkpoint_hash)?;
        }
        Command::Generate {
            model,
            query,
            user,
            beam,
            max_len,
            z_mode,
            seed,
            n,
            raw_scores,
        } => {
            require_file(&model, "--model")?;
            let (m, vocab, users) = load_run_model(&model)?;
            let req = GenRequest {
                beam,
                max_len,
                z_mode,
                seed,
                length_normalize: !raw_scores,
                ..GenRequest::new(vocab.encode(&crate::corpus::tokenize(&query)), users.index_of(&user))
            };
            for h in generate(&m, &req)?.iter().take(n.max(1)) {
                writeln!(out, "{:.4}\t{}", h.score(!raw_scores), vocab.decode(h.reply()).join(" "))?;
            }
        }
        Command::Evaluate {
            model,
            ref_model,
            data,
            out: dir,
            label,
            metrics,
        } => {
            require_file(&model, "--model")?;
            require_file(&ref_model, "--ref-model")?;
            if let Some(d) = &data {
                require_file(d, "--data")?;
            }
            let report = evaluate_run(&model, &ref_model, data.as_deref(), &dir, label, &metrics, args)?;
            out.write_all(report.to_text().as_bytes())?;
        }
        Command::Selfcheck { seed } => {
            let r = selfcheck::run(seed)?;
            out.write_all(r.text.as_bytes())?;
            if !r.passed {
                return Err(CliError::Selfcheck("one or more checks failed".into()));
            }
        }
        Command::Report { evals, out: path } => {
            let rows = evals
                .iter()
                .map(|d| {
                    require_file(&d.join(REPORT_FILE), "--eval")?;
                    Row::parse(&fs::read_to_string(d.join(REPORT_FILE))?)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let table = render_table(&rows);
            if let Some(p) = path {
                fs::write(p, &table)?;
            }
            out.write_all(table.as_bytes())?;
        }
        Command::Compare {
            config,
            data,
            variants,
            reference,
            out: dir,
            metrics,
        } => {
            require_file(&config, "--config")?;
            require_file(&data, "--data")?;
            let labels: Vec<&str> = variants.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if labels.len() < 2 {
                return Err(CliError::Usage("--variants needs at least two entries".into()));
            }
            let rows = compare(&config, &data, &labels, &reference, &dir, &metrics, args)?;
            out.write_all(render_table(&ranked(&rows)).as_bytes())?;
        }
    }
    Ok(())
}

/// `train`: split, train, and write the run directory.
pub fn train_run(config: &Path, data: &Path, dir: &Path, seed: u64, args: &[String]) -> Result<RunManifest, CliError> {
    let cfg = TrainConfig::from_text(&fs::read_to_string(config)?)?;
    let triples = read_corpus(data)?;
    let ds = Dataset::prepare(&triples, cfg.train_ratio, seed, cfg.min_user_utterances);
    let resolved = ds.resolve(&cfg);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), resolved.to_text())?;
    write_corpus(&ds.train, &dir.join(TRAIN_FILE))?;
    write_corpus(&ds.test, &dir.join(TEST_FILE))?;
    save_tables(dir, &ds.vocab, &ds.users)?;
    Trainer::new(resolved, &ds.train_enc, seed)?.run(Some(dir))?;
    let mut m = RunManifest::new(args, seed);
    m.config_hash = hash_file(config)?;
    m.corpus_hash = hash_file(data)?;
    m.checkpoint_hash = hash_file(&dir.join(MODEL_FILE))?;
    m.write(dir)?;
    Ok(m)
}

fn run_dir(model: &Path) -> PathBuf {
    model.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Loads a checkpoint plus the vocabulary and user table saved beside it.
pub fn load_run_model(model: &Path) -> Result<(Model<f32>, crate::corpus::Vocabulary, crate::corpus::UserTable), CliError> {
    let m = Model::<f32>::load(model)?;
    let (vocab, users) = load_tables(&run_dir(model))?;
    if vocab.len() != m.config.vocab_size || users.len() != m.config.num_users {
        return Err(CliError::Model(ModelError::Config(format!(
            "tables next to {} ({} tokens, {} users) do not match the checkpoint ({} tokens, {} users)",
            model.display(),
            vocab.len(),
            users.len(),
            m.config.vocab_size,
            m.config.num_users
        ))));
    }
    Ok((m, vocab, users))
}

/// `evaluate`: score a run against a reference and write report, per-item
/// CSV and manifest into `dir`.
pub fn evaluate_run(
    model: &Path,
    reference: &Path,
    data: Option<&Path>,
    dir: &Path,
    label: Option<String>,
    metrics: &MetricArgs,
    args: &[String],
) -> Result<EvalReport, CliError> {
    let (m, vocab, users) = load_run_model(model)?;
    let (r, rvocab, rusers) = load_run_model(reference)?;
    if rvocab != vocab || rusers != users {
        return Err(CliError::Metrics(MetricError::Config(
            "reference model was trained on different vocabulary or users".into(),
        )));
    }
    let run = run_dir(model);
    let test_path = data.map_or_else(|| run.join(TEST_FILE), Path::to_path_buf);
    let ds = Dataset::from_parts(read_corpus(&run.join(TRAIN_FILE))?, read_corpus(&test_path)?, vocab, users);
    let opts = metrics.options();
    let vectors = metrics.vectors()?;
    let label = label.unwrap_or_else(|| model_label(&m.config));
    let report = evaluate(&label, &m, &r, &ds, vectors.as_ref(), &opts)?;

    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), report.to_text())?;
    fs::write(dir.join(ITEMS_FILE), report.items_csv())?;
    let mut man = RunManifest::new(args, opts.seed);
    man.config_hash = manifest::fnv1a(options_text(&opts).as_bytes());
    man.corpus_hash = hash_file(&test_path)?;
    man.checkpoint_hash = hash_file(model)?;
    man.write(dir)?;
    Ok(report)
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// `compare`: trains the reference and every arm on one split with the
/// metric seed, evaluates each, and writes per-arm reports plus a ranked
/// table and raw CSV. Completed arms stay on disk if a later one fails.
pub fn compare(
    config: &Path,
    data: &Path,
    labels: &[&str],
    reference: &str,
    dir: &Path,
    metrics: &MetricArgs,
    args: &[String],
) -> Result<Vec<Row>, CliError> {
    let seed = metrics.seed;
    let base = TrainConfig::from_text(&fs::read_to_string(config)?)?;
    let triples = read_corpus(data)?;
    let ds = Dataset::prepare(&triples, base.train_ratio, seed, base.min_user_utterances);
    let reference = Arm::parse(reference, &base)?;
    let arms: Vec<Arm> = labels.iter().map(|l| Arm::parse(l, &base)).collect::<Result<_, _>>()?;
    let opts = metrics.options();
    let vectors = metrics.vectors()?;
    fs::create_dir_all(dir)?;

    let ref_model = train_model(&reference.config, &ds, seed, None)?;
    let workers = threads().max(1);
    let mut rows = Vec::new();
    for group in arms.chunks(workers) {
        let trained: Vec<Result<Model<f32>, TrainError>> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|arm| {
                    let (ds, reference, ref_model) = (&ds, &reference, &ref_model);
                    s.spawn(move || {
                        if arm.config == reference.config {
                            Ok(ref_model.clone())
                        } else {
                            train_model(&arm.config, ds, seed, None)
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for (arm, model) in group.iter().zip(trained) {
            let outcome = model.map_err(CliError::from).and_then(|m| {
                let r = evaluate(&arm.label, &m, &ref_model, &ds, vectors.as_ref(), &opts)?;
                let sub = dir.join(slug(&arm.label));
                fs::create_dir_all(&sub)?;
                fs::write(sub.join(REPORT_FILE), r.to_text())?;
                fs::write(sub.join(ITEMS_FILE), r.items_csv())?;
                Ok(Row::from_report(&r))
            });
            match outcome {
                Ok(row) => rows.push(row),
                Err(e) => {
                    write_comparison(dir, &rows)?;
                    return Err(e);
                }
            }
        }
    }
    write_comparison(dir, &rows)?;
    let mut man = RunManifest::new(args, seed);
    man.config_hash = manifest::fnv1a(format!("{}{}", base.to_text(), options_text(&opts)).as_bytes());
    man.corpus_hash = hash_file(data)?;
    man.write(dir)?;
    Ok(rows)
}

fn write_comparison(dir: &Path, rows: &[Row]) -> Result<(), CliError> {
    fs::write(dir.join(TABLE_FILE), render_table(&ranked(rows)))?;
    fs::write(dir.join(RESULTS_FILE), render_csv(rows))?;
    Ok(())
}
