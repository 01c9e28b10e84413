//! End-to-end wiring: topic-paired data, augmentation, both pre-training
//! stages and supervised training of any model variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augment_vast, build_taw_dataset, split_taw, AugmentConfig, CorpusDoc, FanoutStats, Providers, TawBuildConfig,
    TawBuildReport,
};
use crate::data::{StanceExample, TawQuadruplet};
use crate::encoder::{Encoder, EncoderConfig, Vocabulary};
use crate::error::Result;
use crate::eval::{evaluate_splits, SplitReports};
use crate::model::{ModelKind, TataModel};
use crate::synthetic::toy_encoder_config;
use crate::training::{derive_seed, pretrain_tag, pretrain_taw, train_tata, PretrainReport, TataRun, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub taw_build: TawBuildConfig,
    pub augment: AugmentConfig,
    /// Share of topic-paired records held out (by topic) for validation.
    pub taw_val_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::toy(),
            encoder: toy_encoder_config(),
            taw_build: TawBuildConfig::default(),
            augment: AugmentConfig::default(),
            taw_val_fraction: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }
}

/// Everything the supervised stage needs, plus the intermediate reports.
#[derive(Debug, Clone)]
pub struct Pretrained {
    /// Shared random initialization of all encoders.
    pub base: Encoder,
    pub taw: Encoder,
    pub tag: Encoder,
    pub taw_train: Vec<TawQuadruplet>,
    pub taw_val: Vec<TawQuadruplet>,
    pub augmented: Vec<StanceExample>,
    pub build_report: TawBuildReport,
    pub fanout: FanoutStats,
    pub taw_report: PretrainReport,
    pub tag_report: PretrainReport,
}

/// Vocabulary over the news passages, topic-paired records and augmented
/// training rows.
pub fn pipeline_vocabulary(news: &[CorpusDoc], quads: &[TawQuadruplet], augmented: &[StanceExample]) -> Vocabulary {
    let texts = news
        .iter()
        .map(|d| d.text.as_str())
        .chain(quads.iter().flat_map(|q| [q.topic.as_str(), q.topic_paraphrase.as_str()]))
        .chain(augmented.iter().flat_map(|e| [e.passage.as_str(), e.topic.as_str()]));
    Vocabulary::build(texts, 1)
}

/// Builds topic-paired data from `news`, augments `train`, and runs both
/// pre-training stages from one shared initialization.
pub fn pretrain_all(
    train: &[StanceExample],
    val: &[StanceExample],
    news: &[CorpusDoc],
    providers: Providers<'_>,
    config: &PipelineConfig,
) -> Result<Pretrained> {
    let seed = config.train.seed;
    let (quads, build_report) = build_taw_dataset(news, providers, &config.taw_build)?;
    let (taw_train, taw_val) = split_taw(quads, config.taw_val_fraction, derive_seed(seed, "taw-split", 0))?;
    let (augmented, fanout) = augment_vast(train, providers, &config.augment);
    log::info!(
        "{} topic-paired records ({} validation), {} augmented rows",
        taw_train.len() + taw_val.len(),
        taw_val.len(),
        augmented.len()
    );
    let all_quads: Vec<TawQuadruplet> = taw_train.iter().chain(&taw_val).cloned().collect();
    let vocab = pipeline_vocabulary(news, &all_quads, &augmented);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
    let base = Encoder::new(config.encoder.clone(), vocab, &mut rng)?;
    let (taw, taw_report) = pretrain_taw(base.clone(), &taw_train, &taw_val, &config.train)?;
    let (tag, tag_report) = pretrain_tag(base.clone(), &augmented, val, &config.train)?;
    Ok(Pretrained {
        base,
        taw,
        tag,
        taw_train,
        taw_val,
        augmented,
        build_report,
        fanout,
        taw_report,
        tag_report,
    })
}

/// A fresh model of `kind` whose joint encoder starts from the shared
/// initialization.
pub fn assemble(kind: ModelKind, pre: &Pretrained, config: &PipelineConfig) -> Result<TataModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.train.seed, "head", 0));
    TataModel::new(
        kind,
        pre.base.clone(),
        Some(pre.taw.clone()),
        Some(pre.tag.clone()),
        config.train.head_config(),
        &mut rng,
    )
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub run: TataRun,
    pub reports: SplitReports,
}

/// Trains `kind` on `train`, early-stops on `val`, and scores `test`.
pub fn train_and_evaluate(
    kind: ModelKind,
    pre: &Pretrained,
    train: &[StanceExample],
    val: &[StanceExample],
    test: &[StanceExample],
    config: &PipelineConfig,
) -> Result<Outcome> {
    let model = assemble(kind, pre, config)?;
    let run = train_tata(model, train, val, &config.train)?;
    let reports = evaluate_splits(&run.model, test)?;
    Ok(Outcome { run, reports })
}
