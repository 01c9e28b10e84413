//! Triplet and contrastive pre-training, supervised TATA training with
//! early stopping, and multi-seed aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{StanceExample, TawQuadruplet};
use crate::encoder::{Encoder, TokenBatch};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::losses::{cross_entropy_loss, supervised_contrastive_loss, triplet_taw_loss};
use crate::model::{argmax_label, Features, HeadConfig, TataModel};
use crate::optim::{AdamW, AdamWConfig, StepOutcome};
use crate::tensor::{Module, Tape, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub pretrain_batch: usize,
    pub train_batch: usize,
    pub tau: f64,
    pub taw_epochs: usize,
    pub tag_epochs: usize,
    /// Upper bound on supervised epochs; early stopping usually ends sooner.
    pub max_epochs: usize,
    pub dropout: f64,
    pub patience: usize,
    pub seed: u64,
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            pretrain_batch: 16,
            train_batch: 32,
            tau: 0.07,
            taw_epochs: 1,
            tag_epochs: 2,
            max_epochs: 20,
            dropout: 0.3,
            patience: 3,
            seed: 0,
            margin: 0.0,
        }
    }
}

impl TrainConfig {
    /// Settings for randomly initialized toy-scale encoders, which need a
    /// larger step size than fine-tuning a pretrained model.
    pub fn toy() -> Self {
        Self {
            lr: 2e-3,
            taw_epochs: 2,
            tag_epochs: 3,
            max_epochs: 30,
            patience: 5,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.pretrain_batch < 2 || self.train_batch < 2 {
            return fail("batch sizes must be at least 2".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.tau));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            return fail(format!("margin must be non-negative, got {}", self.margin));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            dropout: self.dropout,
            ..HeadConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Seed for one stage and epoch, independent of platform integer hashing.
pub fn derive_seed(seed: u64, stage: &str, epoch: usize) -> u64 {
    let h = Sha256::digest(format!("{seed}/{stage}/{epoch}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Shuffled index batches of at most `size`.
fn shuffled_batches(n: usize, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PretrainReport {
    /// Mean batch loss per epoch.
    pub train_losses: Vec<f64>,
    /// Validation loss before training, then after each epoch.
    pub val_losses: Vec<f64>,
    pub steps: usize,
    /// Batches with fewer than two examples.
    pub skipped_batches: usize,
    /// Contrastive batches where no anchor had a positive.
    pub degenerate_batches: usize,
    pub optimizer_skips: u64,
}

struct Stage<'a> {
    name: &'a str,
    epochs: usize,
    batch: usize,
    n: usize,
}

/// Shared loop: `loss` builds a scalar for a batch of indices.
fn run_stage<F, V>(
    encoder: &mut Encoder,
    stage: Stage<'_>,
    config: &TrainConfig,
    mut loss: F,
    mut validate: V,
) -> Result<PretrainReport>
where
    F: for<'t> FnMut(&'t Tape, &Encoder, &[usize], &mut ChaCha8Rng) -> Result<Option<crate::tensor::Var<'t>>>,
    V: FnMut(&Encoder) -> Result<Option<f64>>,
{
    config.validate()?;
    let mut opt = AdamW::new(config.adamw())?;
    let mut report = PretrainReport::default();
    if let Some(v) = validate(encoder)? {
        report.val_losses.push(v);
    }
    for epoch in 0..stage.epochs {
        let order = derive_seed(config.seed, stage.name, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("{}-dropout", stage.name), epoch));
        let (mut total, mut count) = (0.0, 0usize);
        for batch in shuffled_batches(stage.n, stage.batch, order) {
            if batch.len() < 2 {
                report.skipped_batches += 1;
                log::warn!("{}: batch of {} skipped, no in-batch negatives", stage.name, batch.len());
                continue;
            }
            let tape = Tape::new();
            let Some(l) = loss(&tape, encoder, &batch, &mut rng)? else {
                report.degenerate_batches += 1;
                continue;
            };
            total += l.item();
            count += 1;
            let grads = tape.backward(l)?;
            encoder.zero_grad();
            grads.accumulate_into(encoder);
            if opt.step(encoder)? == StepOutcome::Applied {
                report.steps += 1;
            }
        }
        report.train_losses.push(if count == 0 { f64::NAN } else { total / count as f64 });
        if let Some(v) = validate(encoder)? {
            report.val_losses.push(v);
        }
        log::info!(
            "{} epoch {}: train {:.4} val {:?}",
            stage.name,
            epoch + 1,
            report.train_losses[epoch],
            report.val_losses.last()
        );
    }
    report.optimizer_skips = opt.skipped();
    encoder.freeze();
    Ok(report)
}

/// Token ids of the (passage, topic) anchors and their (similar passage,
/// paraphrase) positives.
type Pairs = (Vec<Vec<usize>>, Vec<Vec<usize>>);

fn taw_pairs(encoder: &Encoder, quads: &[TawQuadruplet]) -> Result<Pairs> {
    let mut anchors = Vec::with_capacity(quads.len());
    let mut positives = Vec::with_capacity(quads.len());
    for q in quads {
        anchors.push(encoder.format_pair(&q.passage, &q.topic)?);
        positives.push(encoder.format_pair(&q.similar_passage, &q.topic_paraphrase)?);
    }
    Ok((anchors, positives))
}

fn pick(seqs: &[Vec<usize>], idx: &[usize]) -> Vec<Vec<usize>> {
    idx.iter().map(|&i| seqs[i].clone()).collect()
}

/// Mean eval-mode triplet loss over fixed consecutive batches.
pub fn taw_validation_loss(encoder: &Encoder, quads: &[TawQuadruplet], batch: usize, margin: f64) -> Result<Option<f64>> {
    let (a, p) = taw_pairs(encoder, quads)?;
    let idx: Vec<usize> = (0..quads.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    for chunk in idx.chunks(batch.max(2)).filter(|c| c.len() >= 2) {
        let tape = Tape::new();
        let ea = encoder.encode(&tape, &TokenBatch::pad(&pick(&a, chunk))?, false, &mut rng)?.cls;
        let ep = encoder.encode(&tape, &TokenBatch::pad(&pick(&p, chunk))?, false, &mut rng)?.cls;
        losses.push(triplet_taw_loss(&ea, &ep, margin)?.item());
    }
    Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Triplet pre-training on `(passage, topic)` / `(partner, paraphrase)` pairs
/// with in-batch negatives. The returned encoder is frozen.
pub fn pretrain_taw(
    mut encoder: Encoder,
    train: &[TawQuadruplet],
    val: &[TawQuadruplet],
    config: &TrainConfig,
) -> Result<(Encoder, PretrainReport)> {
    let (anchors, positives) = taw_pairs(&encoder, train)?;
    let stage = Stage {
        name: "taw",
        epochs: config.taw_epochs,
        batch: config.pretrain_batch,
        n: train.len(),
    };
    let margin = config.margin;
    let report = run_stage(
        &mut encoder,
        stage,
        config,
        |tape, enc, batch, rng| {
            let a = enc.encode(tape, &TokenBatch::pad(&pick(&anchors, batch))?, true, rng)?.cls;
            let p = enc.encode(tape, &TokenBatch::pad(&pick(&positives, batch))?, true, rng)?.cls;
            Ok(Some(triplet_taw_loss(&a, &p, margin)?))
        },
        |enc| taw_validation_loss(enc, val, config.pretrain_batch, margin),
    )?;
    Ok((encoder, report))
}

fn stance_pairs(encoder: &Encoder, examples: &[StanceExample]) -> Result<Vec<Vec<usize>>> {
    examples.iter().map(|e| encoder.format_pair(&e.passage, &e.topic)).collect()
}

/// Mean eval-mode contrastive loss over fixed consecutive batches; batches
/// without any positive pair are left out.
pub fn tag_validation_loss(encoder: &Encoder, examples: &[StanceExample], batch: usize, tau: f64) -> Result<Option<f64>> {
    let seqs = stance_pairs(encoder, examples)?;
    let idx: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    for chunk in idx.chunks(batch.max(2)).filter(|c| c.len() >= 2) {
        let tape = Tape::new();
        let h = encoder.encode(&tape, &TokenBatch::pad(&pick(&seqs, chunk))?, false, &mut rng)?.cls;
        let labels: Vec<_> = chunk.iter().map(|&i| examples[i].stance).collect();
        let l = supervised_contrastive_loss(&h, &labels, tau)?;
        if !l.degenerate {
            losses.push(l.loss.item());
        }
    }
    Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Supervised contrastive pre-training on stance labels. The returned
/// encoder is frozen.
pub fn pretrain_tag(
    mut encoder: Encoder,
    train: &[StanceExample],
    val: &[StanceExample],
    config: &TrainConfig,
) -> Result<(Encoder, PretrainReport)> {
    let seqs = stance_pairs(&encoder, train)?;
    let stage = Stage {
        name: "tag",
        epochs: config.tag_epochs,
        batch: config.pretrain_batch,
        n: train.len(),
    };
    let tau = config.tau;
    let report = run_stage(
        &mut encoder,
        stage,
        config,
        |tape, enc, batch, rng| {
            let h = enc.encode(tape, &TokenBatch::pad(&pick(&seqs, batch))?, true, rng)?.cls;
            let labels: Vec<_> = batch.iter().map(|&i| train[i].stance).collect();
            let l = supervised_contrastive_loss(&h, &labels, tau)?;
            Ok((!l.degenerate).then_some(l.loss))
        },
        |enc| tag_validation_loss(enc, val, config.pretrain_batch, tau),
    )?;
    Ok((encoder, report))
}

/// Mean within-label cosine minus mean between-label cosine of `[CLS]`
/// vectors; larger means labels are better separated.
pub fn label_separation(encoder: &Encoder, examples: &[StanceExample]) -> Result<f64> {
    let seqs = stance_pairs(encoder, examples)?;
    let cls: Vec<Vec<f64>> = encoder.features(&seqs)?.into_iter().map(|(_, c)| c.into_data()).collect();
    let unit: Vec<Vec<f64>> = cls
        .into_iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if examples[i].stance == examples[j].stance {
                within += c;
                nw += 1;
            } else {
                between += c;
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(Error::Input("need at least two labels with two examples each".into()));
    }
    Ok(within / nw as f64 - between / nb as f64)
}

/// Outcome of observing one epoch's validation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a score to maximize; ties keep the earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Decision {
        let better = score.is_finite() && self.best.is_none_or(|(_, b)| score > b);
        if better {
            self.best = Some((epoch, score));
            self.since_best = 0;
            return Decision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    /// `(epoch, score)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_macro_f1\n");
    for r in history {
        out.push_str(&format!("{},{:.8},{:.8}\n", r.epoch, r.train_loss, r.val_macro_f1));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TataRun {
    /// Parameters from the best validation epoch.
    pub model: TataModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
    /// Frozen-encoder checksums before training and after every epoch.
    pub frozen_checksums: Vec<(Option<u64>, Option<u64>)>,
}

/// Macro-F1 of `model` on prepared examples.
pub fn features_macro_f1(model: &TataModel, feats: &[Features], examples: &[StanceExample]) -> Result<f64> {
    let preds: Vec<_> = model.probs(feats)?.iter().map(|p| argmax_label(p)).collect();
    let golds: Vec<_> = examples.iter().map(|e| e.stance).collect();
    Ok(macro_f1(&preds, &golds)?.macro_f1)
}

/// Cross-entropy training of the trainable parts of `model`, selecting the
/// epoch with the best validation macro-F1.
pub fn train_tata(mut model: TataModel, train: &[StanceExample], val: &[StanceExample], config: &TrainConfig) -> Result<TataRun> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let pairs = |xs: &[StanceExample]| xs.iter().map(|e| (e.passage.clone(), e.topic.clone())).collect::<Vec<_>>();
    let train_feats = model.prepare(&pairs(train))?;
    let val_feats = model.prepare(&pairs(val))?;
    let labels: Vec<usize> = train.iter().map(|e| e.stance.index()).collect();

    let mut opt = AdamW::new(config.adamw())?;
    let mut stopper = EarlyStopping::new(config.patience);
    let initial = model.frozen_checksums();
    let mut checksums = vec![initial];
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "tata-dropout", epoch));
        let (mut total, mut count) = (0.0, 0usize);
        for batch in shuffled_batches(train.len(), config.train_batch, derive_seed(config.seed, "tata", epoch)) {
            let tape = Tape::new();
            let refs: Vec<&Features> = batch.iter().map(|&i| &train_feats[i]).collect();
            let probs = model.forward(&tape, &refs, true, &mut rng)?.probs;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy_loss(&probs, &y)?;
            total += loss.item() * batch.len() as f64;
            count += batch.len();
            let grads = tape.backward(loss)?;
            model.zero_grad();
            grads.accumulate_into(&mut model);
            opt.step(&mut model)?;
        }
        let sums = model.frozen_checksums();
        if sums != initial {
            return Err(TensorError::Contract(format!("frozen encoder changed during epoch {epoch}")).into());
        }
        checksums.push(sums);
        let f1 = features_macro_f1(&model, &val_feats, val)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / count as f64,
            val_macro_f1: f1,
        };
        log::info!("epoch {epoch}: loss {:.4} val F1 {f1:.4}", record.train_loss);
        history.push(record);
        match stopper.observe(epoch, f1) {
            Decision::Improved => best = model.clone(),
            Decision::Continue => {}
            Decision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_f1) = stopper.best().unwrap_or((0, f64::NAN));
    if best_epoch == 0 {
        log::warn!("validation score never finite; returning the final model");
        best = model;
    }
    Ok(TataRun {
        model: best,
        history,
        best_epoch,
        best_val_f1,
        stopped_early,
        frozen_checksums: checksums,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub runs: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
}

/// Per-key mean over runs; a key missing from some run is averaged over the
/// runs that have it.
pub fn mean_metrics(runs: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in runs {
        for (k, v) in r {
            let e = acc.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Runs `f` for seeds `base, base+1, ...` and averages the returned metrics.
pub fn sweep_seeds<F>(base: u64, n: usize, mut f: F) -> Result<SweepSummary>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if n == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| base + i).collect();
    let runs = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok(SweepSummary {
        mean: mean_metrics(&runs),
        seeds,
        runs,
    })
}
