//! The stance classifier: frozen TAW/TAG encoders, a trainable joint
//! encoder, two fusion attentions and a two-layer softmax head.

pub mod checkpoint;
pub mod fusion;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StanceLabel;
use crate::encoder::{Encoder, EncoderConfig, TokenBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{param::join, Module, Parameter, Tape, Tensor, Var};

pub use fusion::{attend, fuse, stance_attention, topic_attention};

/// Which fusion branches feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Joint-encoder `[CLS]` only.
    Baseline,
    /// Stance fusion plus `[CLS]`.
    TagOnly,
    /// Topic fusion plus `[CLS]`.
    TawOnly,
    Tata,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Baseline, ModelKind::TagOnly, ModelKind::TawOnly, ModelKind::Tata];

    pub fn uses_taw(self) -> bool {
        matches!(self, ModelKind::TawOnly | ModelKind::Tata)
    }

    pub fn uses_tag(self) -> bool {
        matches!(self, ModelKind::TagOnly | ModelKind::Tata)
    }

    /// Width of the head input for hidden size `e`.
    pub fn head_input(self, e: usize) -> usize {
        e * (1 + self.uses_taw() as usize + self.uses_tag() as usize)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::TagOnly => "tag-only",
            ModelKind::TawOnly => "taw-only",
            ModelKind::Tata => "tata",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "baseline" => Ok(ModelKind::Baseline),
            "tag-only" | "tagonly" | "tag" => Ok(ModelKind::TagOnly),
            "taw-only" | "tawonly" | "taw" => Ok(ModelKind::TawOnly),
            "tata" => Ok(ModelKind::Tata),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Dropout between the two head layers.
    pub dropout: f64,
    /// Encode `[CLS] topic [SEP]` with the joint encoder instead of a separate copy.
    pub share_topic_encoder: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dropout: 0.3,
            share_topic_encoder: true,
        }
    }
}

/// Per-example inputs with the frozen-encoder features already computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pair: Vec<usize>,
    topic: Vec<usize>,
    taw_tokens: Option<Tensor>,
    tag_cls: Option<Tensor>,
}

impl Features {
    pub fn taw_tokens(&self) -> Option<&Tensor> {
        self.taw_tokens.as_ref()
    }

    pub fn tag_cls(&self) -> Option<&Tensor> {
        self.tag_cls.as_ref()
    }
}

/// Output of [`TataModel::forward`].
pub struct Forward<'t> {
    /// `[B×3]` over Pro, Against, Neutral.
    pub probs: Var<'t>,
    pub topic_weights: Option<Var<'t>>,
    pub stance_weights: Option<Var<'t>>,
}

const FEATURE_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct TataModel {
    kind: ModelKind,
    head_config: HeadConfig,
    joint: Encoder,
    topic: Option<Encoder>,
    taw: Option<Encoder>,
    tag: Option<Encoder>,
    w_taw: Option<Parameter>,
    w_tag: Option<Parameter>,
    head1: Linear,
    head2: Linear,
}

impl TataModel {
    /// Assembles a model. `taw`/`tag` are required when `kind` uses them,
    /// ignored otherwise, and frozen on entry.
    pub fn new<R: Rng + ?Sized>(
        kind: ModelKind,
        joint: Encoder,
        taw: Option<Encoder>,
        tag: Option<Encoder>,
        head_config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&head_config.dropout) {
            return Err(Error::Config(format!("head dropout {} outside [0, 1)", head_config.dropout)));
        }
        let e = joint.hidden();
        let take = |enc: Option<Encoder>, used: bool, what: &str| -> Result<Option<Encoder>> {
            if !used {
                return Ok(None);
            }
            let mut enc = enc.ok_or_else(|| Error::Config(format!("{kind} needs a {what} encoder")))?;
            if enc.hidden() != e {
                return Err(Error::Config(format!(
                    "{what} encoder width {} differs from joint width {e}",
                    enc.hidden()
                )));
            }
            enc.freeze();
            Ok(Some(enc))
        };
        let taw = take(taw, kind.uses_taw(), "TAW")?;
        let tag = take(tag, kind.uses_tag(), "TAG")?;
        let topic = (kind.uses_taw() && !head_config.share_topic_encoder).then(|| joint.clone());
        let std = 1.0 / (e as f64).sqrt();
        let mut square = |used: bool| used.then(|| Parameter::new(Tensor::randn([e, e], std, rng)));
        let w_taw = square(kind.uses_taw());
        let w_tag = square(kind.uses_tag());
        Ok(Self {
            head1: Linear::new(kind.head_input(e), e, rng),
            head2: Linear::new(e, 3, rng),
            kind,
            head_config,
            joint,
            topic,
            taw,
            tag,
            w_taw,
            w_tag,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn hidden(&self) -> usize {
        self.joint.hidden()
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_config
    }

    pub fn joint(&self) -> &Encoder {
        &self.joint
    }

    pub fn taw(&self) -> Option<&Encoder> {
        self.taw.as_ref()
    }

    pub fn tag(&self) -> Option<&Encoder> {
        self.tag.as_ref()
    }

    pub fn head_input_dim(&self) -> usize {
        self.head1.input_dim()
    }

    /// Fusion matrices `(W_taw, W_tag)` when present.
    pub fn fusion_weights(&self) -> (Option<&Tensor>, Option<&Tensor>) {
        (self.w_taw.as_ref().map(Parameter::value), self.w_tag.as_ref().map(Parameter::value))
    }

    pub fn fusion_weights_mut(&mut self) -> (Option<&mut Tensor>, Option<&mut Tensor>) {
        (
            self.w_taw.as_mut().map(Parameter::value_mut),
            self.w_tag.as_mut().map(Parameter::value_mut),
        )
    }

    /// Checksums of the frozen TAW and TAG parameters.
    pub fn frozen_checksums(&self) -> (Option<u64>, Option<u64>) {
        (
            self.taw.as_ref().map(Module::param_checksum),
            self.tag.as_ref().map(Module::param_checksum),
        )
    }

    /// Tokenizes `(passage, topic)` pairs and runs the frozen encoders once.
    pub fn prepare<S: AsRef<str>, T: AsRef<str>>(&self, pairs: &[(S, T)]) -> Result<Vec<Features>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(FEATURE_CHUNK) {
            let mut feats = chunk
                .iter()
                .map(|(p, t)| {
                    Ok(Features {
                        pair: self.joint.format_pair(p.as_ref(), t.as_ref())?,
                        topic: self.topic_encoder().format_topic(t.as_ref())?,
                        taw_tokens: None,
                        tag_cls: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(taw) = &self.taw {
                let seqs = chunk
                    .iter()
                    .map(|(p, t)| taw.format_pair(p.as_ref(), t.as_ref()))
                    .collect::<Result<Vec<_>>>()?;
                for (f, (tokens, _)) in feats.iter_mut().zip(taw.features(&seqs)?) {
                    f.taw_tokens = Some(tokens);
                }
            }
            if let Some(tag) = &self.tag {
                let seqs = chunk
                    .iter()
                    .map(|(p, t)| tag.format_pair(p.as_ref(), t.as_ref()))
                    .collect::<Result<Vec<_>>>()?;
                for (f, (_, cls)) in feats.iter_mut().zip(tag.features(&seqs)?) {
                    f.tag_cls = Some(cls);
                }
            }
            out.extend(feats);
        }
        Ok(out)
    }

    fn topic_encoder(&self) -> &Encoder {
        self.topic.as_ref().unwrap_or(&self.joint)
    }

    /// Batched forward pass over prepared examples.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        batch: &[&Features],
        training: bool,
        rng: &mut R,
    ) -> Result<Forward<'t>> {
        if batch.is_empty() {
            return Err(Error::Batch("empty batch".into()));
        }
        let e = self.hidden();
        let b = batch.len();
        let pairs = TokenBatch::pad(&batch.iter().map(|f| f.pair.clone()).collect::<Vec<_>>())?;
        let enc = self.joint.encode(tape, &pairs, training, rng)?;
        let mut parts = Vec::with_capacity(3);
        let mut topic_weights = None;
        let mut stance_weights = None;

        if let Some(w) = &self.w_taw {
            let topics = TokenBatch::pad(&batch.iter().map(|f| f.topic.clone()).collect::<Vec<_>>())?;
            let h_topic = self.topic_encoder().encode(tape, &topics, training, rng)?.cls;
            let states: Vec<&Tensor> = batch
                .iter()
                .map(|f| f.taw_tokens.as_ref().ok_or_else(|| Error::Batch("features lack TAW states".into())))
                .collect::<Result<_>>()?;
            let (tokens, mask) = pad_states(&states, e)?;
            let (r, a) = fuse(&tape.constant(tokens), &h_topic, &tape.param(w), &mask)?;
            parts.push(r);
            topic_weights = Some(a);
        }
        if let Some(w) = &self.w_tag {
            let mut data = Vec::with_capacity(b * e);
            for f in batch {
                let cls = f.tag_cls.as_ref().ok_or_else(|| Error::Batch("features lack TAG vector".into()))?;
                data.extend_from_slice(cls.data());
            }
            let h_tag = tape.constant(Tensor::new([b, e], data)?);
            let (r, a) = fuse(&enc.tokens, &h_tag, &tape.param(w), &pairs.mask)?;
            parts.push(r);
            stance_weights = Some(a);
        }
        parts.push(enc.cls);

        let x = Var::concat_last(&parts)?;
        let h = self.head1.forward(tape, &x)?.gelu()?.dropout(self.head_config.dropout, training, rng)?;
        let probs = self.head2.forward(tape, &h)?.softmax(1)?;
        Ok(Forward {
            probs,
            topic_weights,
            stance_weights,
        })
    }

    /// Eval-mode class probabilities for prepared examples.
    pub fn probs(&self, feats: &[Features]) -> Result<Vec<[f64; 3]>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(feats.len());
        for chunk in feats.chunks(FEATURE_CHUNK) {
            let tape = Tape::new();
            let refs: Vec<&Features> = chunk.iter().collect();
            let p = self.forward(&tape, &refs, false, &mut rng)?.probs.value();
            out.extend(p.data().chunks_exact(3).map(|r| [r[0], r[1], r[2]]));
        }
        Ok(out)
    }

    pub fn predict_features(&self, feats: &[Features]) -> Result<Vec<StanceLabel>> {
        Ok(self.probs(feats)?.iter().map(|p| argmax_label(p)).collect())
    }

    pub fn predict_batch<S: AsRef<str>, T: AsRef<str>>(&self, pairs: &[(S, T)]) -> Result<Vec<StanceLabel>> {
        self.predict_features(&self.prepare(pairs)?)
    }

    pub fn predict(&self, passage: &str, topic: &str) -> Result<StanceLabel> {
        Ok(self.predict_batch(&[(passage, topic)])?[0])
    }

    fn meta(&self) -> Result<serde_json::Value> {
        let spec = |e: &Encoder| EncoderSpec::of(e);
        Ok(serde_json::to_value(ModelMeta {
            head: self.head_config.clone(),
            joint: spec(&self.joint),
            taw: self.taw.as_ref().map(spec),
            tag: self.tag.as_ref().map(spec),
        })?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(self.kind.name(), self.meta()?, self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.kind.name(), self.meta()?, self)
    }

    pub fn from_loaded(loaded: checkpoint::Loaded) -> Result<Self> {
        let kind: ModelKind = loaded
            .header
            .kind
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{:?} is not a model checkpoint", loaded.header.kind)))?;
        let meta: ModelMeta = serde_json::from_value(loaded.header.meta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(
            kind,
            meta.joint.build()?,
            meta.taw.map(|s| s.build()).transpose()?,
            meta.tag.map(|s| s.build()).transpose()?,
            meta.head,
            &mut rng,
        )?;
        checkpoint::restore(&mut model, loaded.tensors)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_loaded(checkpoint::load(path)?)
    }

    /// Loads and checks the stored kind.
    pub fn load_expecting(path: &Path, kind: ModelKind) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        if loaded.header.kind != kind.name() {
            return Err(Error::Checkpoint(format!(
                "kind mismatch: file holds {}, expected {kind}",
                loaded.header.kind
            )));
        }
        Self::from_loaded(loaded)
    }
}

impl Module for TataModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.joint.visit_params(&join(prefix, "joint"), f);
        if let Some(t) = &self.topic {
            t.visit_params(&join(prefix, "topic"), f);
        }
        if let Some(t) = &self.taw {
            t.visit_params(&join(prefix, "taw"), f);
        }
        if let Some(t) = &self.tag {
            t.visit_params(&join(prefix, "tag"), f);
        }
        if let Some(w) = &self.w_taw {
            f(&join(prefix, "fusion.w_taw"), w);
        }
        if let Some(w) = &self.w_tag {
            f(&join(prefix, "fusion.w_tag"), w);
        }
        self.head1.visit_params(&join(prefix, "head.0"), f);
        self.head2.visit_params(&join(prefix, "head.1"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.joint.visit_params_mut(&join(prefix, "joint"), f);
        if let Some(t) = &mut self.topic {
            t.visit_params_mut(&join(prefix, "topic"), f);
        }
        if let Some(t) = &mut self.taw {
            t.visit_params_mut(&join(prefix, "taw"), f);
        }
        if let Some(t) = &mut self.tag {
            t.visit_params_mut(&join(prefix, "tag"), f);
        }
        if let Some(w) = &mut self.w_taw {
            f(&join(prefix, "fusion.w_taw"), w);
        }
        if let Some(w) = &mut self.w_tag {
            f(&join(prefix, "fusion.w_tag"), w);
        }
        self.head1.visit_params_mut(&join(prefix, "head.0"), f);
        self.head2.visit_params_mut(&join(prefix, "head.1"), f);
    }
}

/// Pads `[T_i×E]` states to `[B×T×E]` with a `[B×T]` mask.
fn pad_states(states: &[&Tensor], e: usize) -> Result<(Tensor, Tensor)> {
    let t = states.iter().map(|s| s.shape()[0]).max().unwrap_or(0);
    let b = states.len();
    let mut data = vec![0.0; b * t * e];
    let mut mask = vec![0.0; b * t];
    for (i, s) in states.iter().enumerate() {
        let n = s.shape()[0];
        data[i * t * e..(i * t + n) * e].copy_from_slice(s.data());
        mask[i * t..i * t + n].iter_mut().for_each(|m| *m = 1.0);
    }
    Ok((Tensor::new([b, t, e], data)?, Tensor::new([b, t], mask)?))
}

/// Highest-probability label; exact ties go to the earliest of Pro, Against, Neutral.
pub fn argmax_label(probs: &[f64]) -> StanceLabel {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().take(3) {
        if p > probs[best] {
            best = i;
        }
    }
    StanceLabel::from_index(best).expect("three classes")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderSpec {
    config: EncoderConfig,
    vocab: Vec<String>,
}

impl EncoderSpec {
    fn of(e: &Encoder) -> Self {
        Self {
            config: e.config().clone(),
            vocab: e.vocab().tokens().to_vec(),
        }
    }

    fn build(self) -> Result<Encoder> {
        let vocab = Vocabulary::from_text(&self.vocab.join("\n"))
            .map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
        Encoder::new(self.config, vocab, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    head: HeadConfig,
    joint: EncoderSpec,
    taw: Option<EncoderSpec>,
    tag: Option<EncoderSpec>,
}

pub const ENCODER_KIND: &str = "encoder";

/// Writes a standalone encoder checkpoint.
pub fn save_encoder(path: &Path, encoder: &Encoder) -> Result<()> {
    checkpoint::save(path, ENCODER_KIND, serde_json::to_value(EncoderSpec::of(encoder))?, encoder)
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    let loaded = checkpoint::load(path)?;
    if loaded.header.kind != ENCODER_KIND {
        return Err(Error::Checkpoint(format!(
            "kind mismatch: file holds {}, expected {ENCODER_KIND}",
            loaded.header.kind
        )));
    }
    let spec: EncoderSpec = serde_json::from_value(loaded.header.meta)?;
    let mut enc = spec.build()?;
    checkpoint::restore(&mut enc, loaded.tensors)?;
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy_loss;
    use crate::tensor::grad_check_params;

    fn encoder(seed: u64, words: &[&str]) -> Encoder {
        let cfg = EncoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            max_len: 16,
            dropout: 0.1,
            ..Default::default()
        };
        Encoder::new(cfg, Vocabulary::from_tokens(words.iter().copied()), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    const WORDS: [&str; 8] = ["we", "support", "oppose", "the", "plan", "tax", "school", "vote"];

    fn model(kind: ModelKind) -> TataModel {
        TataModel::new(
            kind,
            encoder(1, &WORDS),
            Some(encoder(2, &WORDS[..5])),
            Some(encoder(3, &WORDS)),
            HeadConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap()
    }

    const PAIRS: [(&str, &str); 3] = [
        ("we support the plan", "tax"),
        ("we oppose the school vote plan", "school vote"),
        ("", "plan"),
    ];

    #[test]
    fn probs_are_distributions_for_every_kind() {
        for kind in ModelKind::ALL {
            let m = model(kind);
            assert_eq!(m.head_input_dim(), kind.head_input(8));
            let p = m.probs(&m.prepare(&PAIRS).unwrap()).unwrap();
            for row in p {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn head_input_widths() {
        assert_eq!(ModelKind::Baseline.head_input(4), 4);
        assert_eq!(ModelKind::TagOnly.head_input(4), 8);
        assert_eq!(ModelKind::TawOnly.head_input(4), 8);
        assert_eq!(ModelKind::Tata.head_input(4), 12);
    }

    #[test]
    fn argmax_ties_follow_label_order() {
        assert_eq!(argmax_label(&[0.6, 0.3, 0.1]), StanceLabel::Pro);
        assert_eq!(argmax_label(&[1.0 / 3.0; 3]), StanceLabel::Pro);
        assert_eq!(argmax_label(&[0.2, 0.4, 0.4]), StanceLabel::Against);
        assert_eq!(argmax_label(&[0.1, 0.2, 0.7]), StanceLabel::Neutral);
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = model(ModelKind::Tata);
        assert_eq!(m.predict_batch(&PAIRS).unwrap(), m.predict_batch(&PAIRS).unwrap());
    }

    #[test]
    fn encoders_frozen_and_missing_ones_rejected() {
        let m = model(ModelKind::Tata);
        assert!(m.taw().unwrap().is_frozen() && m.tag().unwrap().is_frozen());
        assert!(!m.joint().is_frozen());
        let r = TataModel::new(
            ModelKind::Tata,
            encoder(1, &WORDS),
            None,
            Some(encoder(3, &WORDS)),
            HeadConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(ModelKind::Tata);
        m.save(&path).unwrap();
        let back = TataModel::load(&path).unwrap();
        assert_eq!(back.param_checksum(), m.param_checksum());
        let f = m.prepare(&PAIRS).unwrap();
        let p1 = m.probs(&f).unwrap();
        let p2 = back.probs(&back.prepare(&PAIRS).unwrap()).unwrap();
        assert_eq!(p1, p2);
        assert!(back.taw().unwrap().is_frozen());

        let tag_only = model(ModelKind::TagOnly);
        tag_only.save(&path).unwrap();
        let err = TataModel::load_expecting(&path, ModelKind::Tata).unwrap_err();
        assert!(err.to_string().contains("kind mismatch"));

        let enc_path = dir.path().join("e.ckpt");
        save_encoder(&enc_path, m.joint()).unwrap();
        assert_eq!(load_encoder(&enc_path).unwrap().param_checksum(), m.joint().param_checksum());
        assert!(TataModel::load(&enc_path).is_err());
    }

    #[test]
    fn end_to_end_gradients_pass_check() {
        let mut m = model(ModelKind::Tata);
        let feats = m.prepare(&PAIRS[..2]).unwrap();
        let err = grad_check_params(
            &mut m,
            |tape, m: &TataModel| {
                let refs: Vec<&Features> = feats.iter().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = m.forward(tape, &refs, false, &mut rng)?;
                cross_entropy_loss(&out.probs, &[0, 1])
            },
            1e-5,
            7,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn kind_names_parse() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("nope".parse::<ModelKind>().is_err());
    }
}
