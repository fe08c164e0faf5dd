//! Command-line interface.
//!
//! Every command writes into one output directory: the fully resolved
//! `config.toml`, a `run.log`, a `manifest.json` listing the artifacts, and
//! the artifacts themselves. Settings resolve in this order, later wins:
//! built-in defaults, `--config` file, `--set key=value`, dedicated flags.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::aggregator::AblationFlags;
use crate::config::{EvalMode, EvalModel, ExperimentConfig};
use crate::corpus::{self, Article, Split};
use crate::encoder::Encoder;
use crate::error::{Error, ErrorKind, Result};
use crate::evalm::{
    aggregate, evaluate_probs, run_protocol, MetricsReport, ModelFactory, ProtocolKind, ProtocolReport,
    ProtocolSpec, RandomBaseline, RowReport,
};
use crate::model::Model;
use crate::pcl::{nli_accuracy, PairScope, PclParams};
use crate::pipeline::{explain, planted_rank, predict_probs, PcnnFactory, PipelineSpec};
use crate::synthgen;
use crate::trainer::{self, TrainingMeta};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

const DEFAULTS_NOTE: &str = "Defaults: K=10 pairs per article, batch size 16, learning rate 2e-5, \
warm-up fraction 0.10, 10 epochs.\n\nExit codes: 0 success, 2 configuration error, 3 data error, \
4 runtime error.";

#[derive(Debug, Parser)]
#[command(name = "pcnn", version, about = "Detect self-contradictory articles", after_help = DEFAULTS_NOTE)]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set model.d_t=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Maximum worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Do not echo the log to stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge SNLI- and MNLI-format files into the binary pair dataset.
    BuildNli {
        #[arg(long, value_name = "FILE")]
        snli: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        mnli: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with planted contradictions plus NLI data.
    Synth {
        /// Number of articles [default: 200].
        #[arg(long, visible_alias = "n")]
        n_articles: Option<usize>,
        #[arg(long)]
        n_nli: Option<usize>,
        #[arg(long)]
        pos_fraction: Option<f64>,
        /// Put the conflicting statements in different paragraphs.
        #[arg(long)]
        cross_paragraph: bool,
    },
    /// Pre-train the pairwise contradiction layer on NLI pairs.
    Pretrain {
        #[arg(long, value_name = "FILE")]
        nli: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Fine-tune the detector on the training split of a corpus.
    Finetune {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Score a checkpoint on the held-out split, or run a resampling protocol.
    Evaluate {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Run the repeated protocol instead of scoring a checkpoint.
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        /// Detector trained per protocol run.
        #[arg(long, value_enum)]
        model_kind: Option<ModelArg>,
        /// Sets per protocol cell [default: 10].
        #[arg(long)]
        n_sets: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Rank the most contradictory sentence pairs of each article.
    Explain {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Article record(s) to explain: one JSON object or JSON lines.
        #[arg(long, value_name = "FILE")]
        article: Option<PathBuf>,
        /// Pairs listed per article; 0 lists all [default: 10].
        #[arg(long)]
        top: Option<usize>,
        /// Corpus article selector `PAGE` or `PAGE:REV`. Repeatable.
        #[arg(long = "id", value_name = "ID")]
        ids: Vec<String>,
    },
    /// Train and score ablated variants on one split.
    Ablate {
        #[command(flatten)]
        data: DataFlags,
        /// Variant key such as `full`, `no_sa` or `no_pcl+no_paragraph`. Repeatable.
        #[arg(long = "variant", value_name = "KEY")]
        variants: Vec<String>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Train and score one detector per K.
    SweepK {
        #[command(flatten)]
        data: DataFlags,
        /// Comma-separated K values [default: 1,5,10,20,30,40,50].
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildNli { .. } => "build-nli",
            Command::Synth { .. } => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Explain { .. } => "explain",
            Command::Ablate { .. } => "ablate",
            Command::SweepK { .. } => "sweep-k",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    /// Article corpus (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// NLI pairs used to pre-train the pair layer.
    #[arg(long, value_name = "FILE")]
    pub nli: Option<PathBuf>,
    /// Checkpoint whose pair layer replaces pre-training.
    #[arg(long, value_name = "FILE")]
    pub pretrained: Option<PathBuf>,
    /// Planted-pair ground truth for explanation scores.
    #[arg(long, value_name = "FILE")]
    pub planted: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Mini-batch size [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 2e-5].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of steps spent warming up [default: 0.10].
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Passes over the data [default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// Pairs kept per article [default: 10].
    #[arg(long)]
    pub k: Option<usize>,
    /// Pair enumeration scope [default: paragraph].
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
    /// Ablation variant key applied to the model.
    #[arg(long, value_name = "KEY")]
    pub ablation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Balanced,
    Imbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Pcnn,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Paragraph,
    Article,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Runtime => EXIT_RUNTIME,
    }
}

/// Resolves the configuration for `cli` without running anything.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    apply_command_flags(&cli.command, &mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

fn apply_train(hp: &mut trainer::Hyperparams, f: &TrainFlags) {
    set(&mut hp.batch_size, &f.batch_size);
    set(&mut hp.learning_rate, &f.lr);
    set(&mut hp.warmup_fraction, &f.warmup);
    set(&mut hp.epochs, &f.epochs);
}

fn apply_model(cfg: &mut ExperimentConfig, f: &ModelFlags) -> Result<()> {
    set(&mut cfg.model.k, &f.k);
    if let Some(scope) = f.scope {
        cfg.model.scope = match scope {
            ScopeArg::Paragraph => PairScope::Paragraph,
            ScopeArg::Article => PairScope::Article,
        };
    }
    if let Some(key) = &f.ablation {
        cfg.model.ablation = AblationFlags::from_key(key)?;
    }
    Ok(())
}

fn apply_data(cfg: &mut ExperimentConfig, f: &DataFlags) {
    set_path(&mut cfg.data.corpus, &f.corpus);
    set_path(&mut cfg.data.nli, &f.nli);
    set_path(&mut cfg.data.pretrained, &f.pretrained);
    set_path(&mut cfg.data.planted, &f.planted);
}

fn apply_command_flags(cmd: &Command, cfg: &mut ExperimentConfig) -> Result<()> {
    match cmd {
        Command::BuildNli { snli, mnli } => {
            set_path(&mut cfg.data.snli, snli);
            set_path(&mut cfg.data.mnli, mnli);
        }
        Command::Synth {
            n_articles,
            n_nli,
            pos_fraction,
            cross_paragraph,
        } => {
            set(&mut cfg.synth.n_articles, n_articles);
            set(&mut cfg.synth.n_nli, n_nli);
            set(&mut cfg.synth.pos_fraction, pos_fraction);
            cfg.synth.cross_paragraph |= *cross_paragraph;
        }
        Command::Pretrain { nli, train, model } => {
            set_path(&mut cfg.data.nli, nli);
            apply_train(&mut cfg.pretrain, train);
            apply_model(cfg, model)?;
        }
        Command::Finetune { data, train, model } => {
            apply_data(cfg, data);
            apply_train(&mut cfg.finetune, train);
            apply_model(cfg, model)?;
        }
        Command::Evaluate {
            data,
            checkpoint,
            protocol,
            model_kind,
            n_sets,
            train,
            model,
        } => {
            apply_data(cfg, data);
            set_path(&mut cfg.data.checkpoint, checkpoint);
            if let Some(p) = protocol {
                let preset = match p {
                    ProtocolArg::Balanced => ProtocolSpec::balanced(),
                    ProtocolArg::Imbalanced => ProtocolSpec::imbalanced(),
                };
                cfg.protocol = ProtocolSpec {
                    n_sets: cfg.protocol.n_sets,
                    ks: cfg.protocol.ks.clone(),
                    threshold: cfg.protocol.threshold,
                    ..preset
                };
                cfg.evaluate.mode = EvalMode::Protocol;
            }
            if let Some(m) = model_kind {
                cfg.evaluate.model = match m {
                    ModelArg::Pcnn => EvalModel::Pcnn,
                    ModelArg::Random => EvalModel::Random,
                };
            }
            set(&mut cfg.protocol.n_sets, n_sets);
            apply_train(&mut cfg.finetune, train);
            apply_model(cfg, model)?;
        }
        Command::Explain {
            checkpoint,
            corpus,
            article,
            top,
            ids,
        } => {
            set_path(&mut cfg.data.checkpoint, checkpoint);
            set_path(&mut cfg.data.corpus, corpus);
            set_path(&mut cfg.explain.input, article);
            set(&mut cfg.explain.top, top);
            if !ids.is_empty() {
                cfg.explain.articles.clone_from(ids);
            }
        }
        Command::Ablate {
            data,
            variants,
            train,
            model,
        } => {
            apply_data(cfg, data);
            if !variants.is_empty() {
                cfg.ablate.variants.clone_from(variants);
            }
            apply_train(&mut cfg.finetune, train);
            apply_model(cfg, model)?;
        }
        Command::SweepK { data, ks, train, model } => {
            apply_data(cfg, data);
            if !ks.is_empty() {
                cfg.sweep_ks.clone_from(ks);
            }
            apply_train(&mut cfg.finetune, train);
            apply_model(cfg, model)?;
        }
    }
    Ok(())
}

/// Output directory bookkeeping: log lines and written artifacts.
struct RunDir {
    root: PathBuf,
    log: Vec<String>,
    artifacts: Vec<String>,
    quiet: bool,
}

impl RunDir {
    fn create(root: &Path, quiet: bool) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            log: Vec::new(),
            artifacts: Vec::new(),
            quiet,
        })
    }

    fn log(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.quiet {
            eprintln!("{msg}");
        }
        self.log.push(msg);
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        self.root.join(name)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn finish(&mut self, command: &str, outcome: &Result<()>) -> Result<()> {
        if let Err(e) = outcome {
            self.log(format!("error: {e}"));
        }
        let mut log = self.log.join("\n");
        log.push('\n');
        let log_path = self.root.join("run.log");
        fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
        let mut artifacts = self.artifacts.clone();
        artifacts.push("run.log".into());
        artifacts.sort();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "status": if outcome.is_ok() { "ok" } else { "error" },
            "artifacts": artifacts,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Runs a parsed command line. Returns the resolved configuration.
pub fn run(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = resolve_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.jobs)))?;
    let mut dir = RunDir::create(&cfg.output_dir, cli.quiet)?;
    dir.write_text("config.toml", &cfg.to_toml_string()?)?;
    dir.log(format!("pcnn {} {}", env!("CARGO_PKG_VERSION"), cli.command.name()));
    dir.log(format!("seed {} jobs {}", cfg.seed, cfg.jobs));
    let outcome = pool.install(|| dispatch(&cli.command, &cfg, &mut dir));
    dir.finish(cli.command.name(), &outcome)?;
    outcome.map(|_| cfg)
}

fn dispatch(cmd: &Command, cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    match cmd {
        Command::BuildNli { .. } => cmd_build_nli(cfg, dir),
        Command::Synth { .. } => cmd_synth(cfg, dir),
        Command::Pretrain { .. } => cmd_pretrain(cfg, dir),
        Command::Finetune { .. } => cmd_finetune(cfg, dir),
        Command::Evaluate { .. } => match cfg.evaluate.mode {
            EvalMode::Checkpoint => cmd_evaluate_checkpoint(cfg, dir),
            EvalMode::Protocol => cmd_evaluate_protocol(cfg, dir),
        },
        Command::Explain { .. } => cmd_explain(cfg, dir),
        Command::Ablate { .. } => cmd_ablate(cfg, dir),
        Command::SweepK { .. } => cmd_sweep_k(cfg, dir),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("missing data path `data.{key}`")))
}

fn pipeline_spec(cfg: &ExperimentConfig) -> Result<PipelineSpec> {
    Ok(PipelineSpec {
        encoder: Encoder::new(cfg.encoder.clone())?,
        model: cfg.model.clone(),
        pretrain: cfg.pretrain.clone(),
        finetune: cfg.finetune.clone(),
    })
}

fn load_corpus(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<Vec<Article>> {
    let path = required(&cfg.data.corpus, "corpus")?;
    let articles = corpus::load_corpus(path)?;
    let counts = corpus::label_counts(&articles);
    dir.log(format!(
        "corpus {}: {} articles ({} positive, {} negative)",
        path.display(),
        articles.len(),
        counts.get(&1).copied().unwrap_or(0),
        counts.get(&0).copied().unwrap_or(0)
    ));
    Ok(articles)
}

fn split(cfg: &ExperimentConfig, articles: &[Article], dir: &mut RunDir) -> Result<Split> {
    let split = corpus::split_train_test(articles, &cfg.split_spec());
    if split.has_empty_partition() {
        return Err(Error::InfeasibleSample(format!(
            "train ratio {} leaves an empty partition",
            cfg.train_ratio
        )));
    }
    dir.log(format!(
        "split: {} train / {} test articles ({} / {} pages)",
        split.train.len(),
        split.test.len(),
        split.train_pages.len(),
        split.test_pages.len()
    ));
    Ok(split)
}

/// Pair layer for fine-tuning: taken from `data.pretrained`, else trained on
/// `data.nli`, else none (random initialisation).
fn pretrained_pcl(cfg: &ExperimentConfig, spec: &PipelineSpec, dir: &mut RunDir) -> Result<Option<PclParams>> {
    if let Some(path) = &cfg.data.pretrained {
        let model = trainer::load_checkpoint(path)?;
        let (d_s, d_t) = (spec.encoder.dim(), cfg.model.d_t);
        if model.pcl.d_s() != d_s {
            return Err(Error::DimensionMismatch {
                expected: d_s,
                actual: model.pcl.d_s(),
            });
        }
        if model.pcl.d_t() != d_t {
            return Err(Error::DimensionMismatch {
                expected: d_t,
                actual: model.pcl.d_t(),
            });
        }
        dir.log(format!("pair layer loaded from {}", path.display()));
        return Ok(Some(model.pcl));
    }
    if let Some(path) = &cfg.data.nli {
        let nli = corpus::load_nli(path)?;
        dir.log(format!("pre-training pair layer on {} NLI pairs", nli.len()));
        let (pcl, report) = spec.pretrain_pcl(&nli, cfg.seed)?;
        if let Some(last) = report.epoch_losses.last() {
            dir.log(format!("pre-training: {} steps, final epoch loss {last:.6}", report.steps));
        }
        return Ok(Some(pcl));
    }
    dir.log("no pre-trained pair layer; starting from random initialisation");
    Ok(None)
}

fn labels(articles: &[Article]) -> Vec<u8> {
    articles.iter().map(|a| a.label).collect()
}

fn page_list(pages: &[u64]) -> serde_json::Value {
    json!(pages)
}

fn holdout_row(cfg: &ExperimentConfig, split: &Split, report: MetricsReport) -> RowReport {
    let n = split.train.len() + split.test.len();
    let pos = split.train.iter().chain(&split.test).filter(|a| a.label == 1).count();
    let per_set = vec![report];
    RowReport {
        protocol: ProtocolKind::Holdout,
        tr: cfg.train_ratio,
        pos_ratio: pos as f64 / n as f64,
        n_sets: 1,
        metrics: aggregate(&per_set),
        per_set,
    }
}

fn log_metrics(dir: &mut RunDir, what: &str, m: &MetricsReport) {
    dir.log(format!(
        "{what}: precision {:.4} recall {:.4} f1 {:.4} accuracy {:.4}",
        m.precision, m.recall, m.f1, m.accuracy
    ));
}

fn score(cfg: &ExperimentConfig, model: &Model, test: &[Article]) -> Result<(Vec<f64>, MetricsReport)> {
    let probs = predict_probs(model, test)?;
    let report = evaluate_probs(&probs, &labels(test), cfg.model.threshold, &cfg.protocol.ks)?;
    Ok((probs, report))
}

fn predictions_jsonl(articles: &[Article], probs: &[f64], threshold: f64) -> Result<String> {
    let mut out = String::new();
    for (a, &p) in articles.iter().zip(probs) {
        let line = json!({
            "page_id": a.page_id,
            "rev_id": a.rev_id,
            "label": a.label,
            "prob": p,
            "pred": u8::from(p >= threshold),
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

fn cmd_build_nli(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let snli = required(&cfg.data.snli, "snli")?;
    let mnli = required(&cfg.data.mnli, "mnli")?;
    let ds = corpus::build_nli(snli, mnli)?;
    dir.log(format!(
        "kept {} pairs ({} contradiction, {} other), dropped {}",
        ds.examples.len(),
        ds.counts.positives(),
        ds.counts.negatives(),
        ds.counts.dropped
    ));
    let path = dir.path("nli.jsonl");
    corpus::write_nli(&path, &ds.examples)?;
    dir.write_json("nli_counts.json", &ds.counts)
}

fn cmd_synth(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let spec = cfg.synth_spec();
    let synth = synthgen::generate(&spec)?;
    let nli = synthgen::generate_nli(&spec, cfg.synth.n_nli)?;
    let counts = corpus::label_counts(&synth.articles);
    dir.log(format!(
        "generated {} articles ({} positive) and {} NLI pairs",
        synth.articles.len(),
        counts.get(&1).copied().unwrap_or(0),
        nli.len()
    ));
    let path = dir.path("corpus.jsonl");
    corpus::write_corpus(&path, &synth.articles)?;
    let path = dir.path("planted.jsonl");
    synthgen::write_planted(&path, &synth)?;
    let path = dir.path("nli.jsonl");
    corpus::write_nli(&path, &nli)
}

fn cmd_pretrain(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let path = required(&cfg.data.nli, "nli")?;
    let nli = corpus::load_nli(path)?;
    let spec = pipeline_spec(cfg)?;
    dir.log(format!("pre-training on {} NLI pairs", nli.len()));
    let (pcl, report) = spec.pretrain_pcl(&nli, cfg.seed)?;
    let acc = nli_accuracy(&pcl, &spec.encoder, &nli)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        dir.log(format!("epoch {} loss {l:.6}", e + 1));
    }
    dir.log(format!("training accuracy {acc:.4}"));
    let model = spec.build(cfg.seed, Some(&pcl))?;
    let meta = TrainingMeta {
        steps: report.steps,
        final_loss: report.epoch_losses.last().copied(),
    };
    let path = dir.path("pretrained.ckpt");
    trainer::save_checkpoint(&model, &path, Some(&cfg.pretrain), &meta)?;
    dir.write_json(
        "pretrain_report.json",
        &json!({
            "steps": report.steps,
            "epoch_losses": report.epoch_losses,
            "lr_trace": report.lr_trace,
            "train_accuracy": acc,
        }),
    )
}

fn cmd_finetune(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let articles = load_corpus(cfg, dir)?;
    let split = split(cfg, &articles, dir)?;
    let spec = pipeline_spec(cfg)?;
    let pcl = if cfg.model.ablation.no_pcl {
        None
    } else {
        pretrained_pcl(cfg, &spec, dir)?
    };
    dir.log(format!("fine-tuning variant {}", cfg.model.ablation.label()));
    let (model, report) = spec.fit(&split.train, pcl.as_ref(), cfg.seed)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        dir.log(format!("epoch {} loss {l:.6}", e + 1));
    }
    let meta = TrainingMeta {
        steps: report.steps,
        final_loss: Some(report.final_loss),
    };
    let path = dir.path("model.ckpt");
    trainer::save_checkpoint(&model, &path, Some(&cfg.finetune), &meta)?;
    dir.write_json("train_report.json", &report)?;
    dir.write_json(
        "split.json",
        &json!({
            "train_pages": page_list(&split.train_pages),
            "test_pages": page_list(&split.test_pages),
        }),
    )?;
    let (probs, metrics) = score(cfg, &model, &split.test)?;
    log_metrics(dir, "held-out", &metrics);
    let text = predictions_jsonl(&split.test, &probs, cfg.model.threshold)?;
    dir.write_text("predictions.jsonl", &text)?;
    dir.write_json("evaluation.json", &holdout_row(cfg, &split, metrics))
}

fn cmd_evaluate_checkpoint(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let ckpt = required(&cfg.data.checkpoint, "checkpoint")?;
    let model = trainer::load_checkpoint(ckpt)?;
    dir.log(format!("checkpoint {} ({})", ckpt.display(), model.config.ablation.label()));
    let articles = load_corpus(cfg, dir)?;
    let split = split(cfg, &articles, dir)?;
    let (probs, metrics) = score(cfg, &model, &split.test)?;
    log_metrics(dir, "held-out", &metrics);
    let text = predictions_jsonl(&split.test, &probs, cfg.model.threshold)?;
    dir.write_text("predictions.jsonl", &text)?;
    let report = ProtocolReport {
        model: format!("pcnn ({})", model.config.ablation.label()),
        master_seed: cfg.seed,
        rows: vec![holdout_row(cfg, &split, metrics)],
    };
    write_report(cfg, dir, &report)
}

fn write_report(cfg: &ExperimentConfig, dir: &mut RunDir, report: &ProtocolReport) -> Result<()> {
    dir.write_json("evaluation.json", report)?;
    if cfg.evaluate.csv {
        dir.write_text("evaluation.csv", &report.to_csv())?;
    }
    Ok(())
}

fn cmd_evaluate_protocol(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let articles = load_corpus(cfg, dir)?;
    let factory: Box<dyn ModelFactory> = match cfg.evaluate.model {
        EvalModel::Random => Box::new(RandomBaseline),
        EvalModel::Pcnn => {
            let spec = pipeline_spec(cfg)?;
            let pretrained = if cfg.model.ablation.no_pcl {
                None
            } else {
                pretrained_pcl(cfg, &spec, dir)?
            };
            Box::new(PcnnFactory { spec, pretrained })
        }
    };
    dir.log(format!(
        "{:?} protocol with {}: {} sets per cell",
        cfg.protocol.kind,
        factory.name(),
        cfg.protocol.n_sets
    ));
    let report = run_protocol(&articles, factory.as_ref(), &cfg.protocol, cfg.seed)?;
    for row in &report.rows {
        let f1 = row.metrics.get("f1").copied().unwrap_or_default();
        dir.log(format!(
            "tr {} pos_ratio {}: f1 {:.4} ± {:.4}",
            row.tr, row.pos_ratio, f1.mean, f1.std
        ));
    }
    write_report(cfg, dir, &report)
}

fn parse_selector(s: &str) -> Result<(u64, Option<u64>)> {
    let bad = || Error::Config(format!("bad article selector `{s}`; expected PAGE or PAGE:REV"));
    match s.split_once(':') {
        Some((p, r)) => Ok((
            p.trim().parse().map_err(|_| bad())?,
            Some(r.trim().parse().map_err(|_| bad())?),
        )),
        None => Ok((s.trim().parse().map_err(|_| bad())?, None)),
    }
}

/// A single JSON article record, or a corpus in JSON lines.
fn read_articles(path: &Path) -> Result<Vec<Article>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(record) = serde_json::from_str::<corpus::ArticleRecord>(&text) {
        return record.into_article().map(|a| vec![a]).map_err(|message| Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message,
        });
    }
    corpus::load_corpus(path)
}

fn cmd_explain(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let ckpt = required(&cfg.data.checkpoint, "checkpoint")?;
    let model = trainer::load_checkpoint(ckpt)?;
    let articles = match &cfg.explain.input {
        Some(path) => {
            let articles = read_articles(path)?;
            dir.log(format!("{} article(s) from {}", articles.len(), path.display()));
            articles
        }
        None => load_corpus(cfg, dir)?,
    };
    let selectors = cfg
        .explain
        .articles
        .iter()
        .map(|s| parse_selector(s))
        .collect::<Result<Vec<_>>>()?;
    let chosen: Vec<&Article> = articles
        .iter()
        .filter(|a| {
            selectors.is_empty()
                || selectors
                    .iter()
                    .any(|&(p, r)| a.page_id == p && r.map_or(true, |r| a.rev_id == r))
        })
        .collect();
    if chosen.is_empty() {
        return Err(Error::Config("no article matches the selectors".into()));
    }
    let top = (cfg.explain.top > 0).then_some(cfg.explain.top);
    let explanations = chosen
        .iter()
        .map(|a| explain(&model, a, top))
        .collect::<Result<Vec<_>>>()?;
    dir.log(format!("explained {} articles", explanations.len()));
    dir.write_json("explanations.json", &explanations)
}

#[derive(Debug, Serialize)]
struct VariantResult {
    variant: String,
    label: String,
    metrics: MetricsReport,
    /// Share of correctly flagged positives whose planted pair ranks first.
    planted_rank1: Option<f64>,
    /// Same, within the top three.
    planted_top3: Option<f64>,
    final_loss: f64,
}

fn planted_scores(
    cfg: &ExperimentConfig,
    model: &Model,
    test: &[Article],
    probs: &[f64],
) -> Result<(Option<f64>, Option<f64>)> {
    let Some(path) = &cfg.data.planted else {
        return Ok((None, None));
    };
    let planted = synthgen::load_planted(path)?;
    let (mut n, mut r1, mut r3) = (0usize, 0usize, 0usize);
    for (a, &p) in test.iter().zip(probs) {
        if a.label != 1 || p < cfg.model.threshold {
            continue;
        }
        let Some(&pair) = planted.get(&(a.page_id, a.rev_id)) else {
            continue;
        };
        n += 1;
        let hit = planted_rank(model, a, pair)?;
        r1 += usize::from(hit.rank == Some(1));
        r3 += usize::from(hit.rank.is_some_and(|r| r <= 3));
    }
    if n == 0 {
        return Ok((Some(0.0), Some(0.0)));
    }
    Ok((Some(r1 as f64 / n as f64), Some(r3 as f64 / n as f64)))
}

fn fit_and_score(
    cfg: &ExperimentConfig,
    spec: &PipelineSpec,
    split: &Split,
    pcl: Option<&PclParams>,
) -> Result<(Model, MetricsReport, Vec<f64>, f64)> {
    let (model, report) = spec.fit(&split.train, pcl, cfg.seed)?;
    let (probs, metrics) = score(cfg, &model, &split.test)?;
    Ok((model, metrics, probs, report.final_loss))
}

fn cmd_ablate(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let variants = cfg.ablation_variants()?;
    let articles = load_corpus(cfg, dir)?;
    let split = split(cfg, &articles, dir)?;
    let base = pipeline_spec(cfg)?;
    let pcl = if variants.iter().all(|v| v.no_pcl) {
        None
    } else {
        pretrained_pcl(cfg, &base, dir)?
    };
    let mut results = Vec::with_capacity(variants.len());
    for flags in variants {
        let spec = base.with_ablation(flags);
        let (model, metrics, probs, final_loss) = fit_and_score(cfg, &spec, &split, pcl.as_ref())?;
        let (planted_rank1, planted_top3) = planted_scores(cfg, &model, &split.test, &probs)?;
        log_metrics(dir, &flags.label(), &metrics);
        results.push(VariantResult {
            variant: flags.key(),
            label: flags.label(),
            metrics,
            planted_rank1,
            planted_top3,
            final_loss,
        });
    }
    let mut csv = String::from("variant,precision,recall,f1,accuracy,planted_rank1,planted_top3\n");
    for r in &results {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.variant,
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1,
            r.metrics.accuracy,
            opt(r.planted_rank1),
            opt(r.planted_top3)
        ));
    }
    dir.write_json("ablation.json", &results)?;
    dir.write_text("ablation.csv", &csv)
}

#[derive(Debug, Serialize)]
struct SweepPoint {
    k: usize,
    metrics: MetricsReport,
    final_loss: f64,
}

fn cmd_sweep_k(cfg: &ExperimentConfig, dir: &mut RunDir) -> Result<()> {
    let articles = load_corpus(cfg, dir)?;
    let split = split(cfg, &articles, dir)?;
    let base = pipeline_spec(cfg)?;
    let pcl = if cfg.model.ablation.no_pcl {
        None
    } else {
        pretrained_pcl(cfg, &base, dir)?
    };
    let mut points = Vec::with_capacity(cfg.sweep_ks.len());
    for &k in &cfg.sweep_ks {
        let spec = base.with_k(k);
        let (_, metrics, _, final_loss) = fit_and_score(cfg, &spec, &split, pcl.as_ref())?;
        log_metrics(dir, &format!("K={k}"), &metrics);
        let report = ProtocolReport {
            model: format!("pcnn (K={k})"),
            master_seed: cfg.seed,
            rows: vec![holdout_row(cfg, &split, metrics.clone())],
        };
        dir.write_json(&format!("evaluation_k{k}.json"), &report)?;
        points.push(SweepPoint { k, metrics, final_loss });
    }
    let mut csv = String::from("k,precision,recall,f1,accuracy\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            p.k, p.metrics.precision, p.metrics.recall, p.metrics.f1, p.metrics.accuracy
        ));
    }
    dir.write_json("sweep_k.json", &points)?;
    dir.write_text("sweep_k.csv", &csv)
}
