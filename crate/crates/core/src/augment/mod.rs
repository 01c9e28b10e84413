//! Construction of the topic-paired pre-training set and paraphrase
//! augmentation of labelled stance data, written against provider traits.

pub mod mock;
pub mod protocol;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{StanceExample, TawQuadruplet, Validate, SIMILARITY_THRESHOLD};
use crate::error::{Error, Result};

pub use mock::MockProviders;
pub use protocol::ProtocolClient;

/// Entity classes whose topics are never paraphrased.
pub const NER_SKIP_CLASSES: [&str; 9] = [
    "PERSON", "GPE", "LOC", "TIME", "PERCENT", "QUANTITY", "ORDINAL", "MONEY", "DATE",
];

pub trait NounPhraseExtractor {
    fn noun_phrases(&self, passage: &str) -> Result<Vec<String>>;
}

pub trait TopicExtractor {
    /// Picks one of `candidates`, or `None` when nothing fits.
    fn extract(&self, passage: &str, candidates: &[String]) -> Result<Option<String>>;
}

pub trait TopicParaphraser {
    fn paraphrase_topic(&self, topic: &str) -> Result<Vec<String>>;
}

pub trait PassageParaphraser {
    fn paraphrase_passage(&self, passage: &str, n: usize) -> Result<Vec<String>>;
}

pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub trait EntityTagger {
    fn classes(&self, topic: &str) -> Result<BTreeSet<String>>;
}

/// Borrowed set of providers used by the builders.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub noun_phrases: &'a dyn NounPhraseExtractor,
    pub topics: &'a dyn TopicExtractor,
    pub topic_paraphraser: &'a dyn TopicParaphraser,
    pub passage_paraphraser: &'a dyn PassageParaphraser,
    pub embedder: &'a dyn Embedder,
    pub tagger: &'a dyn EntityTagger,
}

impl<'a> Providers<'a> {
    /// All six roles served by one object.
    pub fn uniform<P>(p: &'a P) -> Self
    where
        P: NounPhraseExtractor + TopicExtractor + TopicParaphraser + PassageParaphraser + Embedder + EntityTagger,
    {
        Self {
            noun_phrases: p,
            topics: p,
            topic_paraphraser: p,
            passage_paraphraser: p,
            embedder: p,
            tagger: p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub site: String,
    pub text: String,
}

impl Validate for CorpusDoc {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.site.trim().is_empty() {
            return Err("empty site".into());
        }
        Ok(())
    }
}

pub const PASSAGE_WORDS: usize = 100;

/// First non-blank paragraph, cut to [`PASSAGE_WORDS`] words with
/// whitespace collapsed. Paragraphs are separated by blank lines.
pub fn first_passage(doc: &CorpusDoc) -> Option<String> {
    let mut para = Vec::new();
    for line in doc.text.lines() {
        if line.trim().is_empty() {
            if !para.is_empty() {
                break;
            }
            continue;
        }
        para.extend(line.split_whitespace());
    }
    if para.is_empty() {
        return None;
    }
    para.truncate(PASSAGE_WORDS);
    Some(para.join(" "))
}

/// True iff the tagger reports any class in [`NER_SKIP_CLASSES`].
pub fn ner_skip(topic: &str, tagger: &dyn EntityTagger) -> Result<bool> {
    Ok(tagger.classes(topic)?.iter().any(|c| NER_SKIP_CLASSES.contains(&c.as_str())))
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn cosine_unit(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// Exhaustive cosine index over embedded passages.
#[derive(Debug, Clone, Default)]
pub struct PassageIndex {
    sites: Vec<String>,
    passages: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl PassageIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn insert(&mut self, site: &str, passage: &str, embedding: Vec<f64>) -> Result<()> {
        if let Some(first) = self.vectors.first() {
            if first.len() != embedding.len() {
                return Err(Error::Provider(format!(
                    "embedding dimension {} differs from index dimension {}",
                    embedding.len(),
                    first.len()
                )));
            }
        }
        self.sites.push(site.to_string());
        self.passages.push(passage.to_string());
        self.vectors.push(unit(embedding));
        Ok(())
    }

    pub fn passage(&self, i: usize) -> &str {
        &self.passages[i]
    }

    pub fn site(&self, i: usize) -> &str {
        &self.sites[i]
    }

    /// Most similar entry not from `exclude_site`; ties keep the lowest index.
    pub fn nearest(&self, query: &[f64], exclude_site: Option<&str>) -> Option<(usize, f64)> {
        let q = unit(query.to_vec());
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.vectors.iter().enumerate() {
            if exclude_site == Some(self.sites[i].as_str()) {
                continue;
            }
            let s = cosine_unit(&q, v);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best
    }
}

/// Nearest indexed passage to `passage` from a site other than `site`.
pub fn nearest_similar<'i>(
    passage: &str,
    site: &str,
    index: &'i PassageIndex,
    embedder: &dyn Embedder,
) -> Result<Option<(&'i str, f64)>> {
    let q = embedder.embed(passage)?;
    Ok(index.nearest(&q, Some(site)).map(|(i, s)| (index.passage(i), s)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TawBuildConfig {
    pub site_cap: usize,
    pub topic_cap: usize,
    pub similarity_threshold: f64,
    /// Stop after this many quadruplets.
    pub target_size: Option<usize>,
}

impl Default for TawBuildConfig {
    fn default() -> Self {
        Self {
            site_cap: 1000,
            topic_cap: 3,
            similarity_threshold: SIMILARITY_THRESHOLD,
            target_size: None,
        }
    }
}

/// Per-reason drop counts from [`build_taw_dataset`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TawBuildReport {
    pub docs: usize,
    pub site_capped: usize,
    pub empty: usize,
    pub no_noun_phrase: usize,
    pub no_topic: usize,
    pub topic_capped: usize,
    pub no_partner: usize,
    pub provider_failures: usize,
    pub paraphrase_skipped_ner: usize,
    pub emitted: usize,
}

/// Builds topic-paired quadruplets from a corpus, in corpus order.
pub fn build_taw_dataset(
    corpus: &[CorpusDoc],
    providers: Providers<'_>,
    config: &TawBuildConfig,
) -> Result<(Vec<TawQuadruplet>, TawBuildReport)> {
    if config.topic_cap == 0 || config.site_cap == 0 {
        return Err(Error::Config("site and topic caps must be positive".into()));
    }
    if !(-1.0..=1.0).contains(&config.similarity_threshold) {
        return Err(Error::Config(format!("similarity threshold {} outside [-1, 1]", config.similarity_threshold)));
    }
    let mut report = TawBuildReport {
        docs: corpus.len(),
        ..Default::default()
    };
    let fail = |report: &mut TawBuildReport, what: &str, e: Error| {
        report.provider_failures += 1;
        log::debug!("skipping passage: {what} failed: {e}");
    };

    let mut per_site: BTreeMap<&str, usize> = BTreeMap::new();
    let mut index = PassageIndex::new();
    for doc in corpus {
        if doc.site.is_empty() {
            report.empty += 1;
            continue;
        }
        let n = per_site.entry(&doc.site).or_default();
        if *n >= config.site_cap {
            report.site_capped += 1;
            continue;
        }
        *n += 1;
        let Some(passage) = first_passage(doc) else {
            report.empty += 1;
            continue;
        };
        match providers.embedder.embed(&passage) {
            Ok(v) => index.insert(&doc.site, &passage, v)?,
            Err(e) => fail(&mut report, "embed", e),
        }
    }

    let mut out = Vec::new();
    let mut topic_counts: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..index.len() {
        if config.target_size.is_some_and(|t| out.len() >= t) {
            break;
        }
        let passage = index.passage(i);
        let candidates = match providers.noun_phrases.noun_phrases(passage) {
            Ok(c) => c,
            Err(e) => {
                fail(&mut report, "noun phrases", e);
                continue;
            }
        };
        if candidates.is_empty() {
            report.no_noun_phrase += 1;
            continue;
        }
        let topic = match providers.topics.extract(passage, &candidates) {
            Ok(Some(t)) if candidates.contains(&t) => t,
            Ok(Some(t)) => {
                log::warn!("extractor returned {t:?}, not a candidate; dropped");
                report.no_topic += 1;
                continue;
            }
            Ok(None) => {
                report.no_topic += 1;
                continue;
            }
            Err(e) => {
                fail(&mut report, "topic extraction", e);
                continue;
            }
        };
        let key = topic.trim().to_lowercase();
        if topic_counts.get(&key).copied().unwrap_or(0) >= config.topic_cap {
            report.topic_capped += 1;
            continue;
        }
        let Some((j, sim)) = index.nearest(&index.vectors[i], Some(index.site(i))) else {
            report.no_partner += 1;
            continue;
        };
        if sim < config.similarity_threshold {
            report.no_partner += 1;
            continue;
        }
        let topic_paraphrase = match ner_skip(&topic, providers.tagger) {
            Ok(true) => {
                report.paraphrase_skipped_ner += 1;
                topic.clone()
            }
            Ok(false) => match providers.topic_paraphraser.paraphrase_topic(&topic) {
                Ok(list) => list
                    .into_iter()
                    .map(|s| s.trim().to_string())
                    .find(|s| !s.is_empty() && *s != topic)
                    .unwrap_or_else(|| topic.clone()),
                Err(e) => {
                    fail(&mut report, "topic paraphrase", e);
                    continue;
                }
            },
            Err(e) => {
                fail(&mut report, "entity tagging", e);
                continue;
            }
        };
        *topic_counts.entry(key).or_default() += 1;
        out.push(TawQuadruplet {
            passage: passage.to_string(),
            topic,
            topic_paraphrase,
            similar_passage: index.passage(j).to_string(),
            site_p: index.site(i).to_string(),
            site_q: index.site(j).to_string(),
            similarity: sim,
        });
    }
    report.emitted = out.len();
    Ok((out, report))
}

/// Drops validation quadruplets whose topic also occurs in training.
/// Returns the kept records and the number rejected.
pub fn disjoint_validation(train: &[TawQuadruplet], val: Vec<TawQuadruplet>) -> (Vec<TawQuadruplet>, usize) {
    let seen: HashSet<String> = train.iter().map(|q| q.topic.trim().to_lowercase()).collect();
    let before = val.len();
    let kept: Vec<_> = val.into_iter().filter(|q| !seen.contains(&q.topic.trim().to_lowercase())).collect();
    let rejected = before - kept.len();
    (kept, rejected)
}

/// Topic-disjoint train/validation split: whole topics go to validation
/// (in seeded random order) until `val_fraction` of records is reached.
pub fn split_taw(
    quads: Vec<TawQuadruplet>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<TawQuadruplet>, Vec<TawQuadruplet>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut topics: Vec<String> = quads
        .iter()
        .map(|q| q.topic.trim().to_lowercase())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    topics.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let want = (quads.len() as f64 * val_fraction).round() as usize;
    let mut val_topics = HashSet::new();
    let mut count = 0;
    for t in topics {
        if count >= want {
            break;
        }
        count += quads.iter().filter(|q| q.topic.trim().to_lowercase() == t).count();
        val_topics.insert(t);
    }
    let (val, train): (Vec<_>, Vec<_>) = quads
        .into_iter()
        .partition(|q| val_topics.contains(&q.topic.trim().to_lowercase()));
    let (val, rejected) = disjoint_validation(&train, val);
    debug_assert_eq!(rejected, 0);
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_passage_paraphrases: usize,
    pub max_topic_paraphrases: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_passage_paraphrases: 16,
            max_topic_paraphrases: 10,
        }
    }
}

/// Realized fan-out of [`augment_vast`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FanoutStats {
    pub inputs: usize,
    pub outputs: usize,
    pub mean_passage_variants: f64,
    pub max_passage_variants: usize,
    pub mean_topic_variants: f64,
    pub max_topic_variants: usize,
    pub ner_skipped: usize,
    pub provider_failures: usize,
}

fn distinct_variants(original: &str, list: Vec<String>, cap: usize) -> Vec<String> {
    let mut seen = HashSet::from([original.trim().to_string()]);
    let mut out = Vec::new();
    for s in list {
        let s = s.trim().to_string();
        if !s.is_empty() && seen.insert(s.clone()) {
            out.push(s);
        }
        if out.len() == cap {
            break;
        }
    }
    out
}

/// Cross-product of passage and topic paraphrases for every example; the
/// unmodified pair keeps the parent id, the rest get `{id}-p{i}-t{j}`.
pub fn augment_vast(
    train: &[StanceExample],
    providers: Providers<'_>,
    config: &AugmentConfig,
) -> (Vec<StanceExample>, FanoutStats) {
    let mut out = Vec::new();
    let mut stats = FanoutStats {
        inputs: train.len(),
        ..Default::default()
    };
    let (mut pv_total, mut tv_total) = (0usize, 0usize);
    for ex in train {
        let passages = match providers
            .passage_paraphraser
            .paraphrase_passage(&ex.passage, config.max_passage_paraphrases)
        {
            Ok(list) => distinct_variants(&ex.passage, list, config.max_passage_paraphrases),
            Err(e) => {
                log::debug!("{}: passage paraphrase failed: {e}", ex.id);
                stats.provider_failures += 1;
                Vec::new()
            }
        };
        let topics = match ner_skip(&ex.topic, providers.tagger) {
            Ok(true) => {
                stats.ner_skipped += 1;
                Vec::new()
            }
            Ok(false) => match providers.topic_paraphraser.paraphrase_topic(&ex.topic) {
                Ok(list) => distinct_variants(&ex.topic, list, config.max_topic_paraphrases),
                Err(e) => {
                    log::debug!("{}: topic paraphrase failed: {e}", ex.id);
                    stats.provider_failures += 1;
                    Vec::new()
                }
            },
            Err(e) => {
                log::debug!("{}: entity tagging failed: {e}", ex.id);
                stats.provider_failures += 1;
                Vec::new()
            }
        };
        pv_total += passages.len();
        tv_total += topics.len();
        stats.max_passage_variants = stats.max_passage_variants.max(passages.len());
        stats.max_topic_variants = stats.max_topic_variants.max(topics.len());
        let passages: Vec<&str> = std::iter::once(ex.passage.as_str()).chain(passages.iter().map(String::as_str)).collect();
        let topics: Vec<&str> = std::iter::once(ex.topic.as_str()).chain(topics.iter().map(String::as_str)).collect();
        for (i, p) in passages.iter().enumerate() {
            for (j, t) in topics.iter().enumerate() {
                let mut e = ex.clone();
                if i > 0 || j > 0 {
                    e.id = format!("{}-p{i}-t{j}", ex.id);
                }
                e.passage = p.to_string();
                e.topic = t.to_string();
                out.push(e);
            }
        }
    }
    stats.outputs = out.len();
    if !train.is_empty() {
        stats.mean_passage_variants = pv_total as f64 / train.len() as f64;
        stats.mean_topic_variants = tv_total as f64 / train.len() as f64;
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StanceLabel;
    use crate::augment::mock::{GazetteerTagger, HashedEmbedder};

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn first_passage_cases() {
        let doc = |t: &str| CorpusDoc {
            site: "s".into(),
            text: t.into(),
        };
        assert_eq!(first_passage(&doc(&words(50))).unwrap(), words(50));
        assert_eq!(first_passage(&doc(&words(250))).unwrap(), words(100));
        assert_eq!(first_passage(&doc("\n\n  \nhello world\nagain\n\nsecond")).unwrap(), "hello world again");
        assert!(first_passage(&doc(" \n\n")).is_none());
    }

    #[test]
    fn ner_skip_classes() {
        let tagger = GazetteerTagger::from_pairs([("abraham lincoln", "PERSON"), ("acme", "ORG")]);
        assert!(ner_skip("Abraham Lincoln", &tagger).unwrap());
        assert!(!ner_skip("acme", &tagger).unwrap());
        assert!(!ner_skip("corporations", &tagger).unwrap());
    }

    #[test]
    fn nearest_prefers_other_sites_and_lowest_index() {
        let mut idx = PassageIndex::new();
        idx.insert("a", "p0", vec![1.0, 0.0]).unwrap();
        idx.insert("b", "p1", vec![0.0, 1.0]).unwrap();
        idx.insert("c", "p2", vec![0.0, 2.0]).unwrap();
        idx.insert("a", "p3", vec![1.0, 0.1]).unwrap();
        let (i, s) = idx.nearest(&[1.0, 0.0], Some("a")).unwrap();
        assert_eq!(i, 1);
        assert!(s.abs() < 1e-15);
        assert_eq!(idx.nearest(&[1.0, 0.0], None).unwrap(), (0, 1.0));
        assert!(PassageIndex::new().nearest(&[1.0], None).is_none());
        assert!(idx.insert("d", "bad", vec![1.0]).is_err());
    }

    #[test]
    fn planted_pair_is_found() {
        let c = 0.796f64;
        let emb = HashedEmbedder::new(3)
            .plant("query", vec![1.0, 0.0, 0.0])
            .plant("partner", vec![c, (1.0 - c * c).sqrt(), 0.0])
            .plant("other", vec![0.0, 0.0, 1.0]);
        let mut idx = PassageIndex::new();
        for (site, p) in [("x", "other"), ("y", "partner"), ("q", "query")] {
            idx.insert(site, p, emb.embed(p).unwrap()).unwrap();
        }
        let (p, s) = nearest_similar("query", "q", &idx, &emb).unwrap().unwrap();
        assert_eq!(p, "partner");
        assert!((s - c).abs() < 1e-12);
    }

    #[test]
    fn augmentation_counts_and_ids() {
        let mut mock = MockProviders::default();
        mock.passage_paraphraser.variants = 2;
        mock.topic_paraphraser.variants = 1;
        let ex = StanceExample::new("e1", "we support the plan", "plan", StanceLabel::Against);
        let (out, stats) = augment_vast(std::slice::from_ref(&ex), Providers::uniform(&mock), &AugmentConfig::default());
        assert_eq!(out.len(), 6);
        assert_eq!(stats.outputs, 6);
        assert_eq!(out[0], ex);
        assert!(out.iter().all(|e| e.stance == StanceLabel::Against));
        assert_eq!(out[5].id, "e1-p2-t1");

        mock.passage_paraphraser.variants = 0;
        mock.topic_paraphraser.variants = 0;
        let (out, _) = augment_vast(std::slice::from_ref(&ex), Providers::uniform(&mock), &AugmentConfig::default());
        assert_eq!(out, vec![ex]);
    }

    #[test]
    fn validation_topics_disjoint() {
        let q = |t: &str| TawQuadruplet {
            passage: "p".into(),
            topic: t.into(),
            topic_paraphrase: t.into(),
            similar_passage: "q".into(),
            site_p: "a".into(),
            site_q: "b".into(),
            similarity: 0.9,
        };
        let (kept, rejected) = disjoint_validation(&[q("tax")], vec![q("Tax"), q("school")]);
        assert_eq!(rejected, 1);
        assert_eq!(kept[0].topic, "school");
        let all: Vec<_> = ["a", "a", "b", "c", "c", "c", "d"].iter().map(|t| q(t)).collect();
        let (train, val) = split_taw(all, 0.3, 1).unwrap();
        assert_eq!(train.len() + val.len(), 7);
        assert!(!val.is_empty());
        let tt: HashSet<_> = train.iter().map(|q| &q.topic).collect();
        assert!(val.iter().all(|q| !tt.contains(&q.topic)));
    }
}
