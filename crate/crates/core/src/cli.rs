//! Command-line front end. Every subcommand writes its outputs plus a
//! [`RunManifest`] under the directory it is given.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::mock::MockProviders;
use crate::augment::protocol::{ProtocolClient, REQUESTS_FILE, RESPONSES_FILE};
use crate::augment::{augment_vast, build_taw_dataset, split_taw, AugmentConfig, CorpusDoc, Providers, TawBuildConfig};
use crate::data::{load_jsonl, write_atomic, write_jsonl, LoadMode, StanceExample, TawQuadruplet};
use crate::encoder::{Encoder, EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{
    lexical_similarity_correlation, macro_f1, pca_2d, phenomena_accuracy, predict_examples, projection_csv,
    sem16_score, split_reports, topic_correctness, EvalReport, WordEmbeddings,
};
use crate::model::{load_encoder, save_encoder, ModelKind, TataModel};
use crate::synthetic::toy_encoder_config;
use crate::tensor::{Tensor, TensorError};
use crate::training::{derive_seed, pretrain_tag, pretrain_taw, sweep_seeds, train_tata, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tata", version, about = "Stance detection with topic-aware and topic-agnostic encoders")]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build topic-paired quadruplets from a news corpus.
    BuildTaw(BuildTawArgs),
    /// Expand a stance training set with passage and topic paraphrases.
    AugmentVast(AugmentArgs),
    /// Triplet pre-training of the topic-aware encoder.
    PretrainTaw(PretrainArgs),
    /// Contrastive pre-training of the topic-agnostic encoder.
    PretrainTag(PretrainArgs),
    /// Train a stance classifier over one or more seeds.
    Train(TrainArgs),
    /// Score a trained model.
    Evaluate(EvaluateArgs),
    /// 2-D projection of encoder [CLS] vectors.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct BuildTawArgs {
    /// JSONL of {"site", "text"} documents.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub topic_cap: usize,
    #[arg(long, default_value_t = 0.70)]
    pub sim_threshold: f64,
    #[arg(long, default_value_t = 1000)]
    pub site_cap: usize,
    #[arg(long)]
    pub target_size: Option<usize>,
    /// Share of records moved (by topic) to the validation file.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// `mock`, or a directory holding the request/response files.
    #[arg(long, default_value = "mock")]
    pub providers: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// JSONL of stance examples.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub max_passage_paras: usize,
    #[arg(long, default_value_t = 10)]
    pub max_topic_paras: usize,
    #[arg(long, default_value = "mock")]
    pub providers: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-scale defaults meant for large pretrained encoders.
    Full,
    /// Larger step size and more epochs for small random encoders.
    Toy,
}

/// Configuration sources, lowest priority first: preset, file, flags.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML with training keys at top level and an optional [encoder] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs of this stage (the epoch cap for `train`).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size of this stage.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Vocabulary file (one token per line) for new encoders.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub vast_train: PathBuf,
    #[arg(long)]
    pub vast_val: PathBuf,
    #[arg(long)]
    pub taw_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub tag_ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind, default_value = "tata")]
    pub kind: ModelKind,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Report {
    Vast,
    Sem16,
    Phenomena,
    Correlation,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum, default_value_t = Report::Vast)]
    pub report: Report,
    #[arg(long)]
    pub out: PathBuf,
    /// Word vectors in text format (correlation report).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Training examples whose topics are compared against (correlation report).
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.90)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Joint,
    Taw,
    Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelBy {
    Stance,
    Topic,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Model checkpoint or standalone encoder checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_csv: PathBuf,
    /// Encoder inside a model checkpoint; defaults to TAG, then joint.
    #[arg(long, value_enum)]
    pub encoder: Option<Which>,
    #[arg(long, value_enum, default_value_t = LabelBy::Stance)]
    pub label: LabelBy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn time(&mut self, phase: &str, since: Instant) {
        self.timings.insert(phase.to_string(), since.elapsed().as_secs_f64());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// 0 success, 1 usage or configuration, 2 data, 3 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Tensor(TensorError::NonFinite { .. }) => 3,
        Error::Tensor(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::BuildTaw(a) => build_taw(a),
        Command::AugmentVast(a) => augment(a),
        Command::PretrainTaw(a) => pretrain(a, Stage::Taw),
        Command::PretrainTag(a) => pretrain(a, Stage::Tag),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Project(a) => project(a),
    }
}

fn strict<T: serde::de::DeserializeOwned + crate::data::Validate>(path: &Path) -> Result<Vec<T>> {
    Ok(load_jsonl(path, LoadMode::Strict)?.records)
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, manifest: &mut RunManifest) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    manifest.output(path);
    Ok(())
}

/// Runs `job` with mock providers or a request/response directory. With a
/// directory, unanswered requests are written out and the run fails.
fn with_providers<T>(spec: &str, job: impl FnOnce(Providers<'_>) -> Result<T>) -> Result<T> {
    if spec == "mock" {
        let mock = MockProviders::default();
        return job(Providers::uniform(&mock));
    }
    let dir = Path::new(spec);
    let client = ProtocolClient::open(dir)?;
    let out = job(Providers::uniform(&client))?;
    if client.pending() > 0 {
        let n = client.write_requests()?;
        return Err(Error::Provider(format!(
            "{n} requests written to {}; add answers to {} and rerun",
            dir.join(REQUESTS_FILE).display(),
            dir.join(RESPONSES_FILE).display()
        )));
    }
    Ok(out)
}

fn build_taw(a: &BuildTawArgs) -> Result<()> {
    let config = TawBuildConfig {
        site_cap: a.site_cap,
        topic_cap: a.topic_cap,
        similarity_threshold: a.sim_threshold,
        target_size: a.target_size,
    };
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Error::Config(format!("validation fraction {} outside [0, 1)", a.val_fraction)));
    }
    let start = Instant::now();
    let mut m = RunManifest::new("build-taw");
    m.config = serde_json::json!({"build": config, "val_fraction": a.val_fraction, "providers": a.providers});
    m.seeds = vec![a.seed];
    m.input(&a.corpus)?;
    let corpus: Vec<CorpusDoc> = strict(&a.corpus)?;
    let (quads, report) = with_providers(&a.providers, |p| build_taw_dataset(&corpus, p, &config))?;
    let (train, val) = split_taw(quads, a.val_fraction, a.seed)?;
    out_dir(&a.out)?;
    for (name, rows) in [("taw_train.jsonl", &train), ("taw_val.jsonl", &val)] {
        let path = a.out.join(name);
        write_jsonl(&path, rows)?;
        m.output(&path);
    }
    write_json(&a.out.join("build_report.json"), &report, &mut m)?;
    m.time("total", start);
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!("{} train / {} validation quadruplets from {} documents", train.len(), val.len(), report.docs);
    Ok(())
}

fn augment(a: &AugmentArgs) -> Result<()> {
    let config = AugmentConfig {
        max_passage_paraphrases: a.max_passage_paras,
        max_topic_paraphrases: a.max_topic_paras,
    };
    let start = Instant::now();
    let mut m = RunManifest::new("augment-vast");
    m.config = serde_json::json!({"augment": config, "providers": a.providers});
    m.seeds = vec![a.seed];
    m.input(&a.input)?;
    let train: Vec<StanceExample> = strict(&a.input)?;
    let (rows, stats) = with_providers(&a.providers, |p| Ok(augment_vast(&train, p, &config)))?;
    out_dir(&a.out)?;
    let path = a.out.join("augmented.jsonl");
    write_jsonl(&path, &rows)?;
    m.output(&path);
    write_json(&a.out.join("fanout.json"), &stats, &mut m)?;
    m.time("total", start);
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!("{} examples -> {} augmented rows", stats.inputs, stats.outputs);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Taw,
    Tag,
    Train,
}

/// Preset, then file, then flags.
fn resolve_config(c: &ConfigArgs, stage: Stage) -> Result<(TrainConfig, EncoderConfig)> {
    let (mut train, mut encoder) = match c.preset {
        Preset::Full => (TrainConfig::default(), EncoderConfig::default()),
        Preset::Toy => (TrainConfig::toy(), toy_encoder_config()),
    };
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path)?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(enc) = table.remove("encoder") {
            let mut base = toml::Table::try_from(&encoder).map_err(|e| Error::Config(e.to_string()))?;
            let over = enc
                .as_table()
                .ok_or_else(|| Error::Config("[encoder] must be a table".into()))?;
            base.extend(over.clone());
            encoder = toml::Value::Table(base).try_into().map_err(|e| Error::Config(format!("[encoder]: {e}")))?;
        }
        let mut base = toml::Table::try_from(&train).map_err(|e| Error::Config(e.to_string()))?;
        base.extend(table);
        train = toml::Value::Table(base).try_into().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(v) = c.seed {
        train.seed = v;
    }
    if let Some(v) = c.lr {
        train.lr = v;
    }
    if let Some(v) = c.tau {
        train.tau = v;
    }
    if let Some(v) = c.patience {
        train.patience = v;
    }
    if let Some(v) = c.epochs {
        match stage {
            Stage::Taw => train.taw_epochs = v,
            Stage::Tag => train.tag_epochs = v,
            Stage::Train => train.max_epochs = v,
        }
    }
    if let Some(v) = c.batch {
        match stage {
            Stage::Taw | Stage::Tag => train.pretrain_batch = v,
            Stage::Train => train.train_batch = v,
        }
    }
    train.validate()?;
    Ok((train, encoder))
}

fn vocabulary<'a>(c: &ConfigArgs, texts: impl IntoIterator<Item = &'a str>) -> Result<Vocabulary> {
    match &c.vocab {
        Some(p) => Ok(Vocabulary::load(p)?),
        None => Ok(Vocabulary::build(texts, 1)),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn pretrain(a: &PretrainArgs, stage: Stage) -> Result<()> {
    let (config, enc_config) = resolve_config(&a.cfg, stage)?;
    let start = Instant::now();
    let name = if stage == Stage::Taw { "pretrain-taw" } else { "pretrain-tag" };
    let mut m = RunManifest::new(name);
    m.config = serde_json::json!({"train": config, "encoder": enc_config});
    m.seeds = vec![config.seed];
    m.input(&a.data)?;
    if let Some(v) = &a.val {
        m.input(v)?;
    }
    if let Some(v) = &a.cfg.vocab {
        m.input(v)?;
    }
    if let Some(dir) = a.out_checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init", 0));
    let (encoder, report) = if stage == Stage::Taw {
        let train: Vec<TawQuadruplet> = strict(&a.data)?;
        let val: Vec<TawQuadruplet> = a.val.as_deref().map(strict).transpose()?.unwrap_or_default();
        let vocab = vocabulary(
            &a.cfg,
            train.iter().chain(&val).flat_map(|q| {
                [q.passage.as_str(), q.topic.as_str(), q.topic_paraphrase.as_str(), q.similar_passage.as_str()]
            }),
        )?;
        let enc = Encoder::new(enc_config, vocab, &mut rng)?;
        pretrain_taw(enc, &train, &val, &config)?
    } else {
        let train: Vec<StanceExample> = strict(&a.data)?;
        let val: Vec<StanceExample> = a.val.as_deref().map(strict).transpose()?.unwrap_or_default();
        let vocab = vocabulary(&a.cfg, train.iter().chain(&val).flat_map(|e| [e.passage.as_str(), e.topic.as_str()]))?;
        let enc = Encoder::new(enc_config, vocab, &mut rng)?;
        pretrain_tag(enc, &train, &val, &config)?
    };
    m.time("train", start);
    save_encoder(&a.out_checkpoint, &encoder)?;
    m.output(&a.out_checkpoint);
    write_json(&sibling(&a.out_checkpoint, ".metrics.json"), &report, &mut m)?;
    m.write(&sibling(&a.out_checkpoint, ".manifest.json"))?;
    println!(
        "{name}: {} steps, validation loss {:?} -> {:?}",
        report.steps,
        report.val_losses.first(),
        report.val_losses.last()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (config, enc_config) = resolve_config(&a.cfg, Stage::Train)?;
    let start = Instant::now();
    let mut m = RunManifest::new("train");
    m.config = serde_json::json!({"train": config, "encoder": enc_config, "kind": a.kind.name()});
    m.input(&a.vast_train)?;
    m.input(&a.vast_val)?;
    let need = |flag: &Option<PathBuf>, used: bool, what: &str| -> Result<Option<Encoder>> {
        if !used {
            if flag.is_some() {
                log::info!("{what} checkpoint ignored for {}", a.kind);
            }
            return Ok(None);
        }
        let path = flag
            .as_ref()
            .ok_or_else(|| Error::Config(format!("--{what}-ckpt is required for --kind {}", a.kind)))?;
        Ok(Some(load_encoder(path)?))
    };
    let taw = need(&a.taw_ckpt, a.kind.uses_taw(), "taw")?;
    let tag = need(&a.tag_ckpt, a.kind.uses_tag(), "tag")?;
    for (p, used) in [(&a.taw_ckpt, a.kind.uses_taw()), (&a.tag_ckpt, a.kind.uses_tag())] {
        if let (Some(p), true) = (p, used) {
            m.input(p)?;
        }
    }
    if let Some(v) = &a.cfg.vocab {
        m.input(v)?;
    }
    let train: Vec<StanceExample> = strict(&a.vast_train)?;
    let val: Vec<StanceExample> = strict(&a.vast_val)?;
    let vocab = vocabulary(&a.cfg, train.iter().chain(&val).flat_map(|e| [e.passage.as_str(), e.topic.as_str()]))?;
    out_dir(&a.out)?;

    let summary = sweep_seeds(config.seed, a.seeds, |seed| {
        let cfg = TrainConfig { seed, ..config.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let joint = Encoder::new(enc_config.clone(), vocab.clone(), &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "head", 0));
        let model = TataModel::new(a.kind, joint, taw.clone(), tag.clone(), cfg.head_config(), &mut rng)?;
        let run = train_tata(model, &train, &val, &cfg)?;
        let dir = a.out.join(format!("seed-{seed}"));
        out_dir(&dir)?;
        let ckpt = dir.join("model.ckpt");
        run.model.save(&ckpt)?;
        m.output(&ckpt);
        let hist = dir.join("history.csv");
        write_atomic(&hist, crate::training::history_csv(&run.history).as_bytes())?;
        m.output(&hist);
        println!("seed {seed}: best epoch {} validation macro-F1 {:.4}", run.best_epoch, run.best_val_f1);
        Ok(BTreeMap::from([
            ("best_epoch".to_string(), run.best_epoch as f64),
            ("val_macro_f1".to_string(), run.best_val_f1),
            ("epochs_run".to_string(), run.history.len() as f64),
        ]))
    })?;
    m.seeds = summary.seeds.clone();
    write_json(&a.out.join("summary.json"), &summary, &mut m)?;
    println!("mean validation macro-F1 over {} seeds: {:.4}", summary.seeds.len(), summary.mean["val_macro_f1"]);
    m.time("total", start);
    m.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Sem16Summary {
    score: f64,
    per_topic: BTreeMap<String, f64>,
    report: EvalReport,
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    let mut m = RunManifest::new("evaluate");
    m.config = serde_json::json!({"report": format!("{:?}", a.report).to_lowercase(), "threshold": a.threshold});
    m.input(&a.model)?;
    m.input(&a.test)?;
    let model = TataModel::load(&a.model)?;
    let test: Vec<StanceExample> = strict(&a.test)?;
    let preds = predict_examples(&model, &test)?;
    let golds: Vec<_> = test.iter().map(|e| e.stance).collect();
    out_dir(&a.out)?;
    match a.report {
        Report::Vast => {
            let r = split_reports(&test, &preds)?;
            let csv = format!(
                "{}\n{}\n{}\n{}\n",
                EvalReport::CSV_HEADER,
                r.zero.csv_row(),
                r.few.csv_row(),
                r.all.csv_row()
            );
            write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;
            m.output(&a.out.join("report.csv"));
            write_json(&a.out.join("report.json"), &r, &mut m)?;
            println!("{r}");
        }
        Report::Sem16 => {
            let mut per_topic = BTreeMap::new();
            let mut topics: Vec<&str> = test.iter().map(|e| e.topic.as_str()).collect();
            topics.sort_unstable();
            topics.dedup();
            for t in topics {
                let (p, g): (Vec<_>, Vec<_>) = test
                    .iter()
                    .zip(&preds)
                    .filter(|(e, _)| e.topic == t)
                    .map(|(e, p)| (*p, e.stance))
                    .unzip();
                per_topic.insert(t.to_string(), sem16_score(&p, &g)?);
            }
            let s = Sem16Summary {
                score: sem16_score(&preds, &golds)?,
                per_topic,
                report: macro_f1(&preds, &golds)?,
            };
            println!("Pro/Against macro-F1 {:.4}", s.score);
            for (t, v) in &s.per_topic {
                println!("  {t:<40} {v:.4}");
            }
            write_json(&a.out.join("report.json"), &s, &mut m)?;
        }
        Report::Phenomena => {
            let flags: Vec<_> = test.iter().map(|e| e.phenomena.clone()).collect();
            let r = phenomena_accuracy(&preds, &golds, &flags)?;
            print!("{r}");
            write_json(&a.out.join("report.json"), &r, &mut m)?;
        }
        Report::Correlation => {
            let emb_path = a
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Config("--embeddings is required for the correlation report".into()))?;
            let train_path = a
                .train
                .as_ref()
                .ok_or_else(|| Error::Config("--train is required for the correlation report".into()))?;
            m.input(emb_path)?;
            m.input(train_path)?;
            let emb = WordEmbeddings::load(emb_path)?;
            let train: Vec<StanceExample> = strict(train_path)?;
            let mut train_topics: Vec<String> = train.iter().map(|e| e.topic.clone()).collect();
            train_topics.sort();
            train_topics.dedup();
            let rates = topic_correctness(&test, &preds);
            let c = lexical_similarity_correlation(&rates, &train_topics, &emb, a.threshold)?;
            match (c.r, c.p) {
                (Some(r), Some(p)) => println!("n={} r={r:.4} p={p:.4} ({} topics excluded)", c.n, c.excluded),
                _ => println!("n={} correlation undefined (constant variable)", c.n),
            }
            let mut csv = String::from("near_train_topics,correct_rate\n");
            for (x, y) in &c.points {
                csv.push_str(&format!("{x},{y}\n"));
            }
            write_atomic(&a.out.join("points.csv"), csv.as_bytes())?;
            m.output(&a.out.join("points.csv"));
            write_json(&a.out.join("report.json"), &c, &mut m)?;
        }
    }
    m.time("total", start);
    m.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn project(a: &ProjectArgs) -> Result<()> {
    let start = Instant::now();
    let mut m = RunManifest::new("project");
    m.input(&a.model)?;
    m.input(&a.data)?;
    let header = crate::model::checkpoint::load(&a.model)?.header;
    let encoder: Encoder = if header.kind == crate::model::ENCODER_KIND {
        load_encoder(&a.model)?
    } else {
        let model = TataModel::load(&a.model)?;
        let pick = a.encoder.unwrap_or(if model.tag().is_some() { Which::Tag } else { Which::Joint });
        let enc = match pick {
            Which::Joint => Some(model.joint()),
            Which::Taw => model.taw(),
            Which::Tag => model.tag(),
        };
        enc.cloned()
            .ok_or_else(|| Error::Config(format!("{} model has no {pick:?} encoder", model.kind())))?
    };
    m.config = serde_json::json!({"encoder": format!("{:?}", a.encoder), "label": format!("{:?}", a.label)});
    let data: Vec<StanceExample> = strict(&a.data)?;
    let mut rows = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let seqs = chunk
            .iter()
            .map(|e| encoder.format_pair(&e.passage, &e.topic))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(encoder.features(&seqs)?.into_iter().map(|(_, cls)| cls.into_data()));
    }
    let proj = pca_2d(&Tensor::from_rows(&rows)?)?;
    let labels: Vec<String> = data
        .iter()
        .map(|e| match a.label {
            LabelBy::Stance => e.stance.name().to_string(),
            LabelBy::Topic => e.topic.replace(',', " "),
        })
        .collect();
    if let Some(dir) = a.out_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    write_atomic(&a.out_csv, projection_csv(&proj, &labels)?.as_bytes())?;
    m.output(&a.out_csv);
    m.time("total", start);
    m.write(&sibling(&a.out_csv, ".manifest.json"))?;
    println!("projected {} rows; explained variance {:.4} / {:.4}", rows.len(), proj.eigenvalues[0], proj.eigenvalues[1]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "tata", "train", "--vast-train", "a", "--vast-val", "b", "--kind", "baseline", "--seeds", "5", "--out", "o",
            "--lr", "0.01",
        ])
        .unwrap();
        match cli.command {
            Command::Train(t) => {
                assert_eq!(t.kind, ModelKind::Baseline);
                assert_eq!(t.seeds, 5);
                assert_eq!(t.cfg.lr, Some(0.01));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["tata", "train", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["tata", "train", "--vast-train", "a", "--vast-val", "b", "--kind", "x", "--out", "o"]).is_err());
    }

    #[test]
    fn config_priority() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "lr = 0.5\ntau = 0.2\n[encoder]\nhidden = 16\nheads = 2\n").unwrap();
        let args = ConfigArgs {
            config: Some(path.clone()),
            preset: Preset::Toy,
            seed: Some(4),
            lr: Some(0.25),
            epochs: Some(7),
            batch: None,
            tau: None,
            patience: None,
            vocab: None,
        };
        let (t, e) = resolve_config(&args, Stage::Tag).unwrap();
        assert_eq!((t.lr, t.tau, t.seed, t.tag_epochs), (0.25, 0.2, 4, 7));
        assert_eq!(t.max_epochs, TrainConfig::toy().max_epochs);
        assert_eq!((e.hidden, e.heads, e.layers), (16, 2, 2));

        fs::write(&path, "tau = 0.0\n").unwrap();
        assert!(matches!(resolve_config(&args, Stage::Tag), Err(Error::Config(_))));
        fs::write(&path, "unknown_key = 1\n").unwrap();
        assert!(matches!(resolve_config(&args, Stage::Tag), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Input("x".into())), 2);
        assert_eq!(exit_code(&TensorError::NonFinite { op: "exp" }.into()), 3);
        assert_eq!(run(["tata", "no-such-command"]), 1);
    }
}
