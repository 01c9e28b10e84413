//! Word-level tokenizer and a small pre-norm transformer encoder.

mod vocab;

pub use vocab::{split_words, Vocabulary, CLS, PAD, SEP, UNK};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{param::join, Module, Parameter, Tape, Tensor, Var};

pub const MAX_SEQUENCE_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_len: 64,
            vocab_size: 0,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_len < 8 || self.max_len > MAX_SEQUENCE_LIMIT {
            return fail(format!("max_len {} outside [8, {MAX_SEQUENCE_LIMIT}]", self.max_len));
        }
        if self.vocab_size < 4 {
            return fail("vocabulary must include the four special tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layers == 0 || self.ffn == 0 {
            return fail("layers and ffn must be positive".into());
        }
        Ok(())
    }
}

/// Padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    /// `[B×T]`, 1 for real tokens and 0 for padding.
    pub mask: Tensor,
    pub batch: usize,
    pub steps: usize,
}

impl TokenBatch {
    /// Pads every sequence with `[PAD]` to the longest one.
    pub fn pad(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("cannot batch empty sequences".into()));
        }
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let batch = seqs.len();
        let mut ids = Vec::with_capacity(batch * steps);
        let mut mask = Vec::with_capacity(batch * steps);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(1.0, s.len()));
            ids.extend(std::iter::repeat_n(PAD, steps - s.len()));
            mask.extend(std::iter::repeat_n(0.0, steps - s.len()));
        }
        Ok(Self {
            ids,
            mask: Tensor::new([batch, steps], mask)?,
            batch,
            steps,
        })
    }

    /// Number of real tokens in row `b`.
    pub fn row_len(&self, b: usize) -> usize {
        self.mask.row(b).iter().filter(|&&m| m != 0.0).count()
    }
}

/// Output of [`Encoder::encode`].
pub struct Encoded<'t> {
    /// Final-layer hidden states `[B×T×E]`.
    pub tokens: Var<'t>,
    /// Hidden state at position 0 (`[CLS]`), `[B×E]`.
    pub cls: Var<'t>,
    /// One attention node per layer; see [`Var::saved_attention`].
    pub attention: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let e = cfg.hidden;
        Self {
            norm1: LayerNorm::new(e),
            query: Linear::new(e, e, rng),
            key: Linear::new(e, e, rng),
            value: Linear::new(e, e, rng),
            out: Linear::new(e, e, rng),
            norm2: LayerNorm::new(e),
            ff1: Linear::new(e, cfg.ffn, rng),
            ff2: Linear::new(cfg.ffn, e, rng),
        }
    }
}

impl Module for Block {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.query.visit_params(&join(prefix, "query"), f);
        self.key.visit_params(&join(prefix, "key"), f);
        self.value.visit_params(&join(prefix, "value"), f);
        self.out.visit_params(&join(prefix, "out"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.ff1.visit_params(&join(prefix, "ff1"), f);
        self.ff2.visit_params(&join(prefix, "ff2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.query.visit_params_mut(&join(prefix, "query"), f);
        self.key.visit_params_mut(&join(prefix, "key"), f);
        self.value.visit_params_mut(&join(prefix, "value"), f);
        self.out.visit_params_mut(&join(prefix, "out"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.ff1.visit_params_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_params_mut(&join(prefix, "ff2"), f);
    }
}

/// Transformer encoder with its own vocabulary.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    token_embedding: Parameter,
    position_embedding: Parameter,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Encoder {
    /// Randomly initialized encoder; `config.vocab_size` is taken from `vocab`.
    pub fn new<R: Rng + ?Sized>(mut config: EncoderConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let e = config.hidden;
        let token_embedding = Parameter::new(Tensor::randn([vocab.len(), e], 0.5, rng));
        let position_embedding = Parameter::new(Tensor::randn([config.max_len, e], 0.1, rng));
        let blocks = (0..config.layers).map(|_| Block::new(&config, rng)).collect();
        Ok(Self {
            final_norm: LayerNorm::new(e),
            config,
            vocab,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn is_frozen(&self) -> bool {
        self.token_embedding.is_frozen()
    }

    /// Zeroes the positional table (test hook for permutation symmetry).
    pub fn zero_positions(&mut self) {
        self.position_embedding.value_mut().fill(0.0);
    }

    /// `[CLS] passage [SEP] topic [SEP]`, truncating the passage first.
    pub fn format_pair(&self, passage: &str, topic: &str) -> Result<Vec<usize>> {
        let topic_ids = self.vocab.tokenize(topic);
        let budget = self.config.max_len - 3;
        if topic_ids.len() > budget {
            return Err(Error::Input(format!(
                "topic has {} tokens; at most {budget} fit in max_len {}",
                topic_ids.len(),
                self.config.max_len
            )));
        }
        let mut passage_ids = self.vocab.tokenize(passage);
        passage_ids.truncate(budget - topic_ids.len());
        let mut seq = Vec::with_capacity(passage_ids.len() + topic_ids.len() + 3);
        seq.push(CLS);
        seq.extend(passage_ids);
        seq.push(SEP);
        seq.extend(topic_ids);
        seq.push(SEP);
        Ok(seq)
    }

    /// `[CLS] topic [SEP]`.
    pub fn format_topic(&self, topic: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.tokenize(topic);
        if ids.len() > self.config.max_len - 2 {
            return Err(Error::Input(format!(
                "topic has {} tokens; max_len is {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let mut seq = Vec::with_capacity(ids.len() + 2);
        seq.push(CLS);
        seq.extend(ids);
        seq.push(SEP);
        Ok(seq)
    }

    pub fn encode<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        batch: &TokenBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Encoded<'t>> {
        let (b, t, e) = (batch.batch, batch.steps, self.config.hidden);
        if t > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {t} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab.len()
            )));
        }
        let p = self.config.dropout;
        let tok = tape.param(&self.token_embedding).embedding(&batch.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = tape.param(&self.position_embedding).embedding(&positions)?;
        let mut x = tok.add(&pos)?.reshape([b, t, e])?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = blk.norm1.forward(tape, &x)?;
            let q = blk.query.forward(tape, &h)?;
            let k = blk.key.forward(tape, &h)?;
            let v = blk.value.forward(tape, &h)?;
            let att = Var::attention(&q, &k, &v, self.config.heads, Some(&batch.mask))?;
            attention.push(att);
            let a = blk.out.forward(tape, &att)?.dropout(p, training, rng)?;
            x = x.add(&a)?;
            let h = blk.norm2.forward(tape, &x)?;
            let f = blk.ff1.forward(tape, &h)?.gelu()?;
            let f = blk.ff2.forward(tape, &f)?.dropout(p, training, rng)?;
            x = x.add(&f)?;
        }
        let tokens = self.final_norm.forward(tape, &x)?;
        let cls = tokens.take_position(0)?;
        Ok(Encoded {
            tokens,
            cls,
            attention,
        })
    }

    /// Eval-mode features without gradient tracking: per-sequence token
    /// states (unpadded, `[T_i×E]`) and `[CLS]` vectors.
    pub fn features(&self, seqs: &[Vec<usize>]) -> Result<Vec<(Tensor, Tensor)>> {
        let batch = TokenBatch::pad(seqs)?;
        let tape = Tape::unchecked();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode(&tape, &batch, false, &mut rng)?;
        let all = enc.tokens.value();
        let e = self.config.hidden;
        let t = batch.steps;
        let mut out = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            let rows = &all.data()[i * t * e..(i * t + s.len()) * e];
            let tokens = Tensor::new([s.len(), e], rows.to_vec())?;
            let cls = Tensor::new([e], rows[..e].to_vec())?;
            out.push((tokens, cls));
        }
        if !all.all_finite() {
            return Err(crate::tensor::TensorError::NonFinite { op: "encode" }.into());
        }
        Ok(out)
    }
}

impl Module for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join(prefix, "token_embedding"), &self.token_embedding);
        f(&join(prefix, "position_embedding"), &self.position_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_params(&join(prefix, "final_norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "token_embedding"), &mut self.token_embedding);
        f(&join(prefix, "position_embedding"), &mut self.position_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_params_mut(&join(prefix, "final_norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(max_len: usize) -> Encoder {
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "guns", "x"]);
        let cfg = EncoderConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_len,
            dropout: 0.1,
            ..Default::default()
        };
        Encoder::new(cfg, vocab, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig {
            vocab_size: 10,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.max_len = 4;
        assert!(c.validate().is_err());
        c.max_len = 513;
        assert!(c.validate().is_err());
    }

    #[test]
    fn format_pair_examples() {
        let enc = small(16);
        let v = enc.vocab();
        assert_eq!(enc.format_pair("", "guns").unwrap(), vec![CLS, SEP, v.id("guns"), SEP]);
        assert_eq!(
            enc.format_pair("a b", "c").unwrap(),
            vec![CLS, v.id("a"), v.id("b"), SEP, v.id("c"), SEP]
        );
        let long = vec!["a"; 100].join(" ");
        let seq = enc.format_pair(&long, "c d").unwrap();
        assert_eq!(seq.len(), 16);
        assert_eq!(seq.iter().filter(|&&i| i == v.id("a")).count(), 11);
        let topic = vec!["c"; 14].join(" ");
        assert!(matches!(enc.format_pair("a", &topic), Err(Error::Input(_))));
    }

    #[test]
    fn identical_rows_encode_identically() {
        let enc = small(16);
        let s = enc.format_pair("a b c", "d").unwrap();
        let batch = TokenBatch::pad(&[s.clone(), s]).unwrap();
        let tape = Tape::new();
        let out = enc.encode(&tape, &batch, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cls = out.cls.value();
        assert_eq!(cls.row(0), cls.row(1));
    }

    #[test]
    fn padding_leaves_cls_unchanged() {
        let enc = small(16);
        let s = enc.format_pair("a b", "c").unwrap();
        let long = enc.format_pair("a b c d a b", "c").unwrap();
        let f1 = enc.features(std::slice::from_ref(&s)).unwrap();
        let f2 = enc.features(&[s, long]).unwrap();
        assert!(f1[0].1.max_abs_diff(&f2[0].1) < 1e-10);
    }

    #[test]
    fn permutation_symmetry_without_positions() {
        let mut enc = small(16);
        enc.zero_positions();
        let v = enc.vocab().clone();
        let s1 = vec![CLS, v.id("a"), v.id("b"), v.id("c"), SEP];
        let s2 = vec![CLS, v.id("c"), SEP, v.id("a"), v.id("b")];
        let f = enc.features(&[s1, s2]).unwrap();
        assert!(f[0].1.max_abs_diff(&f[1].1) < 1e-12);
    }

    #[test]
    fn attention_weights_sum_to_one_over_unmasked() {
        let enc = small(16);
        let a = enc.format_pair("a b c", "d").unwrap();
        let b = enc.format_pair("a", "d").unwrap();
        let batch = TokenBatch::pad(&[a, b]).unwrap();
        let tape = Tape::new();
        let out = enc.encode(&tape, &batch, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = batch.steps;
        for node in &out.attention {
            let p = node.saved_attention().unwrap();
            for (r, row) in p.data().chunks(t).enumerate() {
                let bi = r / (2 * t);
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for j in batch.row_len(bi)..t {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_vocab_ids_and_long_sequences() {
        let enc = small(8);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = TokenBatch::pad(&[vec![CLS, 99, SEP]]).unwrap();
        assert!(matches!(enc.encode(&tape, &bad, false, &mut rng), Err(Error::Input(_))));
        let long = TokenBatch::pad(&[vec![CLS; 9]]).unwrap();
        assert!(matches!(enc.encode(&tape, &long, false, &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn cls_head_gradients_pass_check() {
        let mut enc = small(16);
        let seqs = vec![
            enc.format_pair("a b c", "guns").unwrap(),
            enc.format_pair("d", "x").unwrap(),
        ];
        let batch = TokenBatch::pad(&seqs).unwrap();
        let w = Tensor::randn([2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let err = grad_check_params(
            &mut enc,
            |tape, m| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = m.encode(tape, &batch, false, &mut rng)?;
                Ok::<_, Error>(out.cls.gelu()?.dot(&tape.constant(w.clone()))?)
            },
            1e-5,
            1,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
