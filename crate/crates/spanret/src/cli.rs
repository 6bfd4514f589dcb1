use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use spanret_core::decoder::{decode, predict_intent, DecodeConfig};
use spanret_core::encoder::{DeterministicEncoder, EncoderParams, ModelEncoder, DEFAULT_DIM, DEFAULT_VOCAB_BUCKETS};
use spanret_core::eval::{
    build_kshot_support, dev_metric, intent_accuracy, run_episodes, span_f1, support_query_split, sweep_threshold,
    threshold_grid, DevProtocol, EpisodeReport, EpisodeSpec, Evaluator, InferenceMode,
};
use spanret_core::index::{build_index, RetrievalIndex, SupportSetSpec};
use spanret_core::math::{derive_seed, mean, std_dev};
use spanret_core::objective::{train, ReductionKind, TrainConfig};
use spanret_core::proto::build_prototypes;
use spanret_core::synth::{generate, SynthGrammar};
use spanret_core::{Dataset, LabeledSpan, Task};

use crate::error::{CliError, Result, EXIT_OK, EXIT_USAGE};
use crate::format::{load_index, load_model, save_index, save_model};
use crate::jsonl::{
    dataset_to_string, load_field, load_jsonl, load_predictions, predictions_to_string, write_jsonl, write_text,
    PredictionRecord,
};

#[derive(Parser, Debug)]
#[command(name = "spanret", version, about = "Retrieval-based few-shot intent classification and slot filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic corpus (source, dev and target domains).
    Synth(SynthArgs),
    /// Train an encoder with the batch-softmax objective.
    Train(TrainArgs),
    /// Embed a support set into a retrieval (or prototype) index.
    BuildIndex(BuildIndexArgs),
    /// Predict slots or intents for a JSONL file.
    Predict(PredictArgs),
    /// Score predictions against gold annotations.
    Eval(EvalArgs),
    /// Episodic few-shot evaluation.
    Episodes(EpisodesArgs),
    /// Grid-search the slot threshold on a dev domain.
    SweepThreshold(SweepArgs),
    /// Convert column-format BIO tags to span JSONL.
    ConvertBio(ConvertBioArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Init {
    Frozen,
    Zeros,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Retrieval,
    Proto,
}

impl From<Mode> for InferenceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Retrieval => InferenceMode::Retrieval,
            Mode::Proto => InferenceMode::Proto,
        }
    }
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: spanret_core::Error| e.to_string())
}

fn parse_reduction(s: &str) -> std::result::Result<ReductionKind, String> {
    s.parse().map_err(|e: spanret_core::Error| e.to_string())
}

/// Decoding settings: a JSON file with any `DecodeConfig` fields, then
/// individual flags on top, then defaults for the rest.
#[derive(Args, Debug, Clone)]
struct DecodeFlags {
    #[arg(long)]
    decode_config: Option<PathBuf>,
    /// Longest enumerated span (m).
    #[arg(long)]
    max_span_len: Option<usize>,
    /// Filter threshold (tau).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    dyn_decrement: Option<f64>,
    #[arg(long)]
    dyn_steps: Option<usize>,
    #[arg(long)]
    beam_size: Option<usize>,
    /// Merge threshold: 0 never merges, 1 always merges.
    #[arg(long = "lambda")]
    merge_threshold: Option<f64>,
}

impl DecodeFlags {
    fn inputs(&self) -> Vec<&Path> {
        self.decode_config.iter().map(PathBuf::as_path).collect()
    }

    fn resolve(&self) -> Result<DecodeConfig> {
        let mut value = serde_json::to_value(DecodeConfig::default()).expect("config serializes");
        if let Some(path) = &self.decode_config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
            let Value::Object(fields) = file else {
                return Err(CliError::format(path, "decode config must be a JSON object"));
            };
            let known = value.as_object_mut().expect("config is an object");
            for (k, v) in fields {
                if !known.contains_key(&k) {
                    return Err(CliError::format(path, format!("unknown decode field {k:?}")));
                }
                known.insert(k, v);
            }
        }
        let mut config: DecodeConfig = serde_json::from_value(value).map_err(|e| {
            CliError::format(self.decode_config.as_deref().unwrap_or(Path::new("<decode config>")), e.to_string())
        })?;
        let f = self.clone();
        config.max_span_len = f.max_span_len.unwrap_or(config.max_span_len);
        config.threshold = f.threshold.unwrap_or(config.threshold);
        config.dyn_decrement = f.dyn_decrement.unwrap_or(config.dyn_decrement);
        config.dyn_steps = f.dyn_steps.unwrap_or(config.dyn_steps);
        config.beam_size = f.beam_size.unwrap_or(config.beam_size);
        config.merge_threshold = f.merge_threshold.unwrap_or(config.merge_threshold);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON grammar; the built-in default otherwise.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Overrides the grammar seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Source-domain training data.
    #[arg(long, required_unless_present = "frozen")]
    train: Option<PathBuf>,
    /// Dev domain for early stopping (best dev metric wins).
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSONL); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the untrained frozen encoder instead of training.
    #[arg(long)]
    frozen: bool,
    #[arg(long, value_parser = parse_reduction)]
    reduction: Option<ReductionKind>,
    /// Spans sampled per label and batch.
    #[arg(long = "B", alias = "per-class-batch")]
    per_class_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_VOCAB_BUCKETS)]
    vocab: usize,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Starting table.
    #[arg(long, value_enum, default_value_t = Init::Frozen)]
    init: Init,
    /// Support shots of the dev split.
    #[arg(long, default_value_t = 5)]
    dev_k: usize,
    #[arg(long, default_value_t = 11)]
    dev_seed: u64,
    /// Inference used for the dev metric; prototypes for the mean reduction
    /// and retrieval otherwise.
    #[arg(long, value_enum)]
    dev_mode: Option<Mode>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    #[arg(long)]
    model: PathBuf,
    /// Target-domain support examples.
    #[arg(long)]
    support: PathBuf,
    /// Source-domain examples, used by the `all` and `balance` variants.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// all | balance | tgt
    #[arg(long, default_value = "tgt")]
    variant: String,
    /// Entries per label for `balance`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First reduce the support file to a K-shot subset.
    #[arg(long)]
    kshot: Option<usize>,
    #[arg(long, default_value_t = 1)]
    kshot_seed: u64,
    /// Store per-label prototypes instead of individual entries.
    #[arg(long)]
    proto: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Predictions JSONL (a gold-format file also works).
    #[arg(long)]
    pred: PathBuf,
    /// Dataset whose intent labels count as target labels; by default every
    /// gold label does.
    #[arg(long)]
    target_labels_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EpisodesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prototype inference instead of retrieval.
    #[arg(long)]
    proto: bool,
    /// Sample this many categories per resample (intent data with a
    /// category field).
    #[arg(long, requires = "intents_per_category")]
    categories: Option<usize>,
    /// Intents sampled within each chosen category.
    #[arg(long, requires = "categories")]
    intents_per_category: Option<usize>,
    #[arg(long, default_value_t = 3)]
    resamples: usize,
    #[arg(long, default_value = "category")]
    category_field: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value_t = 0.85)]
    grid_lo: f64,
    #[arg(long, default_value_t = 0.97)]
    grid_hi: f64,
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
    #[arg(long)]
    proto: bool,
    /// Also write the decode config with the best threshold here.
    #[arg(long)]
    best_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct ConvertBioArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Id prefix; the input file stem by default.
    #[arg(long)]
    id_prefix: Option<String>,
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::BuildIndex(a) => cmd_build_index(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Episodes(a) => cmd_episodes(a),
        Command::SweepThreshold(a) => cmd_sweep(a),
        Command::ConvertBio(a) => cmd_convert_bio(a),
    }
}

/// Fails before any work if an input is missing.
fn check_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
    }
    Ok(())
}

fn sidecar_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().map(OsString::from).unwrap_or_default();
    name.push(".config.json");
    primary.with_file_name(name)
}

fn pretty(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

/// Writes the fully resolved configuration of a run next to its output.
fn write_sidecar(primary: &Path, command: &str, config: Value) -> Result<()> {
    let body = json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "config": config });
    write_text(&sidecar_path(primary), &pretty(&body))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    check_inputs(a.grammar.as_deref())?;
    let mut grammar = match &a.grammar {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<SynthGrammar>(&text).map_err(|e| CliError::format(p, e.to_string()))?
        }
        None => SynthGrammar::default(),
    };
    if let Some(seed) = a.seed {
        grammar.seed = seed;
    }
    grammar.validate()?;
    let domains = generate(&grammar)?;
    let mut files = Vec::new();
    for d in &domains {
        for (task, data) in [(Task::Slot, &d.slot), (Task::Intent, &d.intent)] {
            let name = format!("{}.{}.jsonl", d.name, task);
            write_jsonl(&a.out_dir.join(&name), data)?;
            files.push(json!({
                "file": name,
                "domain": d.name,
                "task": task,
                "examples": data.len(),
                "labels": data.label_set(),
            }));
        }
    }
    let manifest = json!({ "grammar": grammar, "files": files });
    let manifest_path = a.out_dir.join("manifest.json");
    write_text(&manifest_path, &pretty(&manifest))?;
    write_sidecar(&manifest_path, "synth", json!({ "out_dir": path_str(&a.out_dir), "grammar": grammar }))?;
    println!("wrote {} files to {}", files.len(), a.out_dir.display());
    Ok(())
}

fn default_dev_mode(reduction: ReductionKind) -> Mode {
    if reduction == ReductionKind::Mean {
        Mode::Proto
    } else {
        Mode::Retrieval
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    check_inputs(a.train.iter().chain(&a.dev).map(PathBuf::as_path).chain(a.decode.inputs()))?;
    let decode = a.decode.resolve()?;
    if a.frozen {
        let model = ModelEncoder::Frozen(DeterministicEncoder::new(a.vocab, a.dim)?);
        save_model(&a.out, &model)?;
        write_sidecar(
            &a.out,
            "train",
            json!({ "task": a.task, "frozen": true, "vocab": a.vocab, "dim": a.dim, "out": path_str(&a.out) }),
        )?;
        println!("wrote frozen encoder to {}", a.out.display());
        return Ok(());
    }
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        reduction: a.reduction.unwrap_or(defaults.reduction),
        per_class_batch: a.per_class_batch.unwrap_or(defaults.per_class_batch),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        max_steps: a.steps.unwrap_or(defaults.max_steps),
        eval_interval: a.eval_interval.unwrap_or(defaults.eval_interval),
        early_stop_patience: a.patience.unwrap_or(defaults.early_stop_patience),
        seed: a.seed.unwrap_or(defaults.seed),
    };
    config.validate()?;
    let train_path = a.train.as_deref().expect("clap requires --train without --frozen");
    let source = load_jsonl(train_path, Some(a.task))?;
    let dev = a.dev.as_deref().map(|p| load_jsonl(p, Some(a.task))).transpose()?;
    let initial = match a.init {
        Init::Frozen => DeterministicEncoder::new(a.vocab, a.dim)?.to_params(),
        Init::Zeros => EncoderParams::zeros(a.vocab, a.dim)?,
        Init::Random => EncoderParams::random(a.vocab, a.dim, 0.1, config.seed)?,
    };
    let mode = a.dev_mode.unwrap_or_else(|| default_dev_mode(config.reduction));
    let protocol = DevProtocol { k: a.dev_k, seed: a.dev_seed };
    let outcome = match &dev {
        Some(dev) => train(
            &config,
            &source,
            a.task,
            initial,
            Some(|p: &EncoderParams| dev_metric(p, dev, a.task, protocol, mode.into(), decode)),
        )?,
        None => train::<fn(&EncoderParams) -> spanret_core::Result<f64>>(&config, &source, a.task, initial, None)?,
    };
    save_model(&a.out, &ModelEncoder::Trainable(outcome.params))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".log.jsonl");
        a.out.with_file_name(name)
    });
    let log: String =
        outcome.log.iter().map(|r| serde_json::to_string(r).expect("log records serialize") + "\n").collect();
    write_text(&log_path, &log)?;
    write_sidecar(
        &a.out,
        "train",
        json!({
            "task": a.task,
            "train": path_str(train_path),
            "dev": a.dev.as_deref().map(path_str),
            "out": path_str(&a.out),
            "log": path_str(&log_path),
            "train_config": config,
            "init": a.init,
            "vocab": a.vocab,
            "dim": a.dim,
            "dev_protocol": protocol,
            "dev_mode": mode,
            "decode": decode,
            "best_step": outcome.best_step,
            "best_dev_metric": outcome.best_dev_metric,
            "steps_run": outcome.steps_run,
        }),
    )?;
    match outcome.best_dev_metric {
        Some(m) => {
            println!("trained {} steps; best dev metric {m:.4} at step {}", outcome.steps_run, outcome.best_step)
        }
        None => println!("trained {} steps", outcome.steps_run),
    }
    Ok(())
}

/// Task of a loaded dataset, falling back to `flag`, then to slot for an
/// empty file.
fn data_task(data: &Dataset, flag: Option<Task>) -> Result<Task> {
    match (data.task(), flag) {
        (Some(t), Some(f)) if t != f => Err(CliError::Usage(format!("--task {f} does not match {t} data"))),
        (Some(t), _) => Ok(t),
        (None, Some(f)) => Ok(f),
        (None, None) => Ok(Task::Slot),
    }
}

fn cmd_build_index(a: BuildIndexArgs) -> Result<()> {
    let spec = SupportSetSpec::parse(&a.variant, a.k).map_err(|e| CliError::Usage(e.to_string()))?;
    check_inputs([a.model.as_path(), a.support.as_path()].into_iter().chain(a.source.as_deref()))?;
    if !matches!(spec, SupportSetSpec::Tgt) && a.source.is_none() {
        log::warn!("variant {} without --source uses the support file only", a.variant);
    }
    let model = load_model(&a.model)?;
    let mut support = load_jsonl(&a.support, a.task)?;
    let task = data_task(&support, a.task)?;
    let source = a.source.as_deref().map(|p| load_jsonl(p, Some(task))).transpose()?;
    if let Some(k) = a.kshot {
        support = build_kshot_support(&support, k, a.kshot_seed)?;
    }
    let index = if a.proto {
        let pooled = match (spec, &source) {
            (SupportSetSpec::Tgt, _) | (_, None) => support.clone(),
            (SupportSetSpec::All, Some(src)) => src.concat(&support),
            (SupportSetSpec::Balance { .. }, Some(_)) => {
                return Err(CliError::Usage("--proto already keeps one entry per label; use all or tgt".into()))
            }
        };
        build_prototypes(&pooled, &model, task)?.to_index()?
    } else {
        build_index(&model, source.as_ref(), &support, spec, task, a.seed)?
    };
    save_index(&a.out, &index)?;
    write_sidecar(
        &a.out,
        "build-index",
        json!({
            "model": path_str(&a.model),
            "support": path_str(&a.support),
            "source": a.source.as_deref().map(path_str),
            "task": task,
            "support_set": spec,
            "seed": a.seed,
            "kshot": a.kshot,
            "kshot_seed": a.kshot_seed,
            "proto": a.proto,
            "out": path_str(&a.out),
            "entries": index.len(),
        }),
    )?;
    println!("wrote {} {} entries to {}", index.len(), index.kind(), a.out.display());
    Ok(())
}

fn predict_records(
    model: &ModelEncoder,
    index: &RetrievalIndex,
    data: &Dataset,
    config: &DecodeConfig,
) -> Result<Vec<PredictionRecord>> {
    let task = index.kind().task();
    data.examples()
        .iter()
        .map(|ex| {
            Ok(match task {
                Task::Slot => PredictionRecord::slots(ex.id(), &decode(ex.utterance(), index, model, config)?),
                Task::Intent => {
                    let p = predict_intent(ex.utterance(), index, model)?;
                    PredictionRecord::intent(ex.id(), &p.label, p.score)
                }
            })
        })
        .collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    check_inputs([a.model.as_path(), a.index.as_path(), a.input.as_path()].into_iter().chain(a.decode.inputs()))?;
    let decode_config = a.decode.resolve()?;
    let model = load_model(&a.model)?;
    let index = load_index(&a.index)?;
    let data = load_jsonl(&a.input, None)?;
    let records = predict_records(&model, &index, &data, &decode_config)?;
    write_text(&a.out, &predictions_to_string(&records))?;
    write_sidecar(
        &a.out,
        "predict",
        json!({
            "model": path_str(&a.model),
            "index": path_str(&a.index),
            "input": path_str(&a.input),
            "out": path_str(&a.out),
            "task": index.kind().task(),
            "decode": decode_config,
        }),
    )?;
    println!("wrote {} predictions to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    check_inputs([a.gold.as_path(), a.pred.as_path()].into_iter().chain(a.target_labels_from.as_deref()))?;
    let gold = load_jsonl(&a.gold, None)?;
    let preds = load_predictions(&a.pred)?;
    let task = data_task(&gold, None)?;
    let missing = |id: &str| CliError::format(&a.pred, format!("no prediction for id {id:?}"));
    let report = match task {
        Task::Slot => {
            let mut g = Vec::new();
            let mut p = Vec::new();
            for ex in gold.examples() {
                let rec = preds.get(ex.id()).ok_or_else(|| missing(ex.id()))?;
                let spans = rec.spans.as_ref().ok_or_else(|| CliError::format(&a.pred, "expected slot predictions"))?;
                g.push(ex.slot_spans().to_vec());
                p.push(spans.iter().map(|s| LabeledSpan::new(s.start, s.end, s.label.clone())).collect());
            }
            serde_json::to_value(span_f1(&g, &p)?).expect("report serializes")
        }
        Task::Intent => {
            let mut g = Vec::new();
            let mut p = Vec::new();
            for ex in gold.examples() {
                let rec = preds.get(ex.id()).ok_or_else(|| missing(ex.id()))?;
                let label =
                    rec.intent.clone().ok_or_else(|| CliError::format(&a.pred, "expected intent predictions"))?;
                g.push(ex.intent_label().unwrap_or_default().to_string());
                p.push(label);
            }
            let target: BTreeSet<String> = match &a.target_labels_from {
                Some(path) => load_jsonl(path, Some(Task::Intent))?.label_set().clone(),
                None => gold.label_set().clone(),
            };
            let source: BTreeSet<String> = gold.label_set().difference(&target).cloned().collect();
            serde_json::to_value(intent_accuracy(&g, &p, &target, &source)?).expect("report serializes")
        }
    };
    write_text(&a.out, &pretty(&report))?;
    write_sidecar(
        &a.out,
        "eval",
        json!({
            "gold": path_str(&a.gold),
            "pred": path_str(&a.pred),
            "task": task,
            "target_labels_from": a.target_labels_from.as_deref().map(path_str),
            "out": path_str(&a.out),
        }),
    )?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

/// Label subsets for category-sampled episodes: `n_c` categories, then
/// `n_i` labels within each, redrawn per resample.
fn sample_label_groups(
    data: &Dataset,
    categories: &BTreeMap<String, String>,
    n_c: usize,
    n_i: usize,
    seed: u64,
) -> Result<(Vec<String>, BTreeSet<String>)> {
    let mut by_category: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for ex in data.examples() {
        let cat = categories.get(ex.id()).ok_or_else(|| {
            CliError::Usage(format!("example {:?} has no category; needed for category sampling", ex.id()))
        })?;
        by_category.entry(cat).or_default().insert(ex.intent_label().unwrap_or_default());
    }
    let eligible: Vec<&str> = by_category.iter().filter(|(_, ls)| ls.len() >= n_i).map(|(c, _)| *c).collect();
    if eligible.len() < n_c {
        return Err(CliError::Core(spanret_core::Error::InsufficientData {
            reason: format!("{} categories have {n_i} or more intents, {n_c} requested", eligible.len()),
        }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<&str> = eligible.choose_multiple(&mut rng, n_c).copied().collect();
    let mut labels = BTreeSet::new();
    for c in &chosen {
        let pool: Vec<&str> = by_category[c].iter().copied().collect();
        labels.extend(pool.choose_multiple(&mut rng, n_i).map(|l| l.to_string()));
    }
    let mut chosen: Vec<String> = chosen.into_iter().map(String::from).collect();
    chosen.sort();
    Ok((chosen, labels))
}

#[derive(Serialize)]
struct Resample {
    resample: usize,
    seed: u64,
    categories: Vec<String>,
    labels: BTreeSet<String>,
    report: EpisodeReport,
}

fn cmd_episodes(a: EpisodesArgs) -> Result<()> {
    check_inputs([a.model.as_path(), a.data.as_path()].into_iter().chain(a.decode.inputs()))?;
    let decode_config = a.decode.resolve()?;
    let defaults = EpisodeSpec::default();
    let spec = EpisodeSpec {
        n_episodes: a.episodes.unwrap_or(defaults.n_episodes),
        queries_per_episode: a.queries.unwrap_or(defaults.queries_per_episode),
        k: a.k.unwrap_or(defaults.k),
        seed: a.seed.unwrap_or(defaults.seed),
    };
    let model = load_model(&a.model)?;
    let data = load_jsonl(&a.data, None)?;
    let task = data_task(&data, None)?;
    let mode = if a.proto { InferenceMode::Proto } else { InferenceMode::Retrieval };
    let evaluator = Evaluator::new(&model, task, mode, decode_config);
    let report = match (a.categories, a.intents_per_category) {
        (Some(n_c), Some(n_i)) => {
            if task != Task::Intent {
                return Err(CliError::Usage("category sampling applies to intent data".into()));
            }
            let categories = load_field(&a.data, &a.category_field)?;
            let mut runs = Vec::new();
            for r in 0..a.resamples {
                let seed = derive_seed(spec.seed, 1_000 + r as u64);
                let (cats, labels) = sample_label_groups(&data, &categories, n_c, n_i, seed)?;
                let keep: Vec<usize> = (0..data.len())
                    .filter(|&i| labels.contains(data.examples()[i].intent_label().unwrap_or_default()))
                    .collect();
                let subset = data.subset(&keep);
                let report = run_episodes(&subset, &EpisodeSpec { seed, ..spec }, &evaluator)?;
                runs.push(Resample { resample: r, seed, categories: cats, labels, report });
            }
            let means: Vec<f64> = runs.iter().map(|r| r.report.mean).collect();
            json!({ "resamples": runs, "mean": mean(&means), "std": std_dev(&means), "seed": spec.seed })
        }
        _ => serde_json::to_value(run_episodes(&data, &spec, &evaluator)?).expect("report serializes"),
    };
    write_text(&a.out, &pretty(&report))?;
    write_sidecar(
        &a.out,
        "episodes",
        json!({
            "model": path_str(&a.model),
            "data": path_str(&a.data),
            "task": task,
            "mode": mode,
            "episodes": spec,
            "categories": a.categories,
            "intents_per_category": a.intents_per_category,
            "resamples": a.resamples,
            "category_field": a.category_field,
            "decode": decode_config,
            "out": path_str(&a.out),
        }),
    )?;
    println!("mean {:.4} std {:.4}", report["mean"].as_f64().unwrap_or(0.0), report["std"].as_f64().unwrap_or(0.0));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    check_inputs([a.model.as_path(), a.dev.as_path()].into_iter().chain(a.decode.inputs()))?;
    let decode_config = a.decode.resolve()?;
    let grid = threshold_grid(a.grid_lo, a.grid_hi, a.grid_step);
    let model = load_model(&a.model)?;
    let dev = load_jsonl(&a.dev, Some(Task::Slot))?;
    let mode = if a.proto { InferenceMode::Proto } else { InferenceMode::Retrieval };
    let (support, queries) = support_query_split(&dev, a.k, a.seed)?;
    let evaluator = Evaluator::new(&model, Task::Slot, mode, decode_config);
    let index = evaluator.support_index(&support)?;
    let report = sweep_threshold(&evaluator, &index, &queries, &grid)?;
    let best = DecodeConfig { threshold: report.best_threshold, ..decode_config };
    write_text(&a.out, &pretty(&report))?;
    if let Some(p) = &a.best_config {
        write_text(p, &pretty(&best))?;
    }
    write_sidecar(
        &a.out,
        "sweep-threshold",
        json!({
            "model": path_str(&a.model),
            "dev": path_str(&a.dev),
            "dev_protocol": DevProtocol { k: a.k, seed: a.seed },
            "grid": grid,
            "mode": mode,
            "decode": decode_config,
            "best_config": a.best_config.as_deref().map(path_str),
            "out": path_str(&a.out),
        }),
    )?;
    println!("threshold\tf1");
    for (t, f) in &report.rows {
        println!("{t:.2}\t{f:.4}");
    }
    println!("best {:.2} ({:.4})", report.best_threshold, report.best_metric);
    Ok(())
}

fn cmd_convert_bio(a: ConvertBioArgs) -> Result<()> {
    check_inputs([a.input.as_path()])?;
    let text = std::fs::read_to_string(&a.input).map_err(|e| CliError::io(&a.input, e))?;
    let prefix = a
        .id_prefix
        .clone()
        .unwrap_or_else(|| a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let data = crate::bio::convert(&text, &prefix).map_err(|(line, reason)| CliError::Parse {
        path: a.input.clone(),
        line,
        reason,
    })?;
    write_text(&a.out, &dataset_to_string(&data))?;
    write_sidecar(
        &a.out,
        "convert-bio",
        json!({ "input": path_str(&a.input), "out": path_str(&a.out), "id_prefix": prefix }),
    )?;
    println!("converted {} utterances", data.len());
    Ok(())
}
