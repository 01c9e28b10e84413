//! Deterministic in-process providers.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::{Embedder, EntityTagger, NounPhraseExtractor, PassageParaphraser, TopicExtractor, TopicParaphraser};
use crate::encoder::split_words;
use crate::error::Result;

const DETERMINERS: [&str; 14] = [
    "the", "a", "an", "this", "that", "these", "those", "our", "their", "his", "her", "its", "my", "your",
];

const STOPWORDS: [&str; 30] = [
    "the", "a", "an", "this", "that", "these", "those", "our", "their", "his", "her", "its", "my", "your", "and",
    "or", "but", "to", "of", "in", "on", "for", "with", "is", "are", "was", "were", "be", "it", "we",
];

fn clean(word: &str) -> &str {
    word.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Candidate phrases from two rules: runs of capitalized words (a lone
/// sentence-initial capital is ignored) and a determiner followed by up to
/// two lowercase content words. Output is lowercased and deduplicated.
#[derive(Debug, Clone, Default)]
pub struct HeuristicNounPhrases;

impl HeuristicNounPhrases {
    pub fn extract(&self, passage: &str) -> Vec<String> {
        let raw: Vec<&str> = passage.split_whitespace().collect();
        let mut starts = vec![false; raw.len()];
        for i in 0..raw.len() {
            starts[i] = i == 0 || raw[i - 1].ends_with(['.', '!', '?']);
        }
        let words: Vec<&str> = raw.iter().map(|w| clean(w)).collect();
        let capital = |w: &str| w.chars().next().is_some_and(char::is_uppercase);
        let content = |w: &str| {
            w.len() >= 3 && w.chars().all(char::is_lowercase) && !STOPWORDS.contains(&w)
        };
        let mut out: Vec<String> = Vec::new();
        let mut push = |phrase: String| {
            if !phrase.is_empty() && !out.contains(&phrase) {
                out.push(phrase);
            }
        };

        let mut i = 0;
        while i < words.len() {
            if capital(words[i]) {
                let mut j = i;
                while j < words.len() && capital(words[j]) && (j == i || !starts[j]) {
                    j += 1;
                }
                let mut run: Vec<String> = words[i..j].iter().map(|w| w.to_lowercase()).collect();
                while run.first().is_some_and(|w| DETERMINERS.contains(&w.as_str())) {
                    run.remove(0);
                }
                let lone_start = j - i == 1 && starts[i];
                if !lone_start && !run.is_empty() {
                    push(run.join(" "));
                }
                i = j;
            } else {
                i += 1;
            }
        }
        for i in 0..words.len() {
            if DETERMINERS.contains(&words[i].to_lowercase().as_str()) {
                let mut phrase = Vec::new();
                for w in words.iter().skip(i + 1).take(2) {
                    if content(w) {
                        phrase.push(*w);
                    } else {
                        break;
                    }
                    if raw[i + phrase.len()].ends_with([',', '.', '!', '?', ';', ':']) {
                        break;
                    }
                }
                push(phrase.join(" "));
            }
        }
        out
    }
}

impl NounPhraseExtractor for HeuristicNounPhrases {
    fn noun_phrases(&self, passage: &str) -> Result<Vec<String>> {
        Ok(self.extract(passage))
    }
}

/// Chooses the candidate with the most occurrences in the passage (first on ties).
#[derive(Debug, Clone, Default)]
pub struct FrequentTopicExtractor;

impl TopicExtractor for FrequentTopicExtractor {
    fn extract(&self, passage: &str, candidates: &[String]) -> Result<Option<String>> {
        let words = split_words(passage);
        let count = |c: &String| {
            let needle = split_words(c);
            if needle.is_empty() || needle.len() > words.len() {
                return 0;
            }
            words.windows(needle.len()).filter(|w| *w == needle.as_slice()).count()
        };
        let mut best: Option<(&String, usize)> = None;
        for c in candidates {
            let n = count(c);
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((c, n));
            }
        }
        Ok(best.map(|(c, _)| c.clone()))
    }
}

const TOPIC_TEMPLATES: [&str; 10] = [
    "{} issue",
    "the {} question",
    "{} policy",
    "{} debate",
    "matter of {}",
    "{} proposal",
    "{} plan",
    "{} reform",
    "{} controversy",
    "{} topic",
];

/// Fixed templates, or an explicit table when the topic is listed.
#[derive(Debug, Clone)]
pub struct TemplateTopicParaphraser {
    pub variants: usize,
    pub table: BTreeMap<String, Vec<String>>,
}

impl Default for TemplateTopicParaphraser {
    fn default() -> Self {
        Self {
            variants: 3,
            table: BTreeMap::new(),
        }
    }
}

impl TopicParaphraser for TemplateTopicParaphraser {
    fn paraphrase_topic(&self, topic: &str) -> Result<Vec<String>> {
        if let Some(list) = self.table.get(&topic.trim().to_lowercase()) {
            return Ok(list.clone());
        }
        Ok(TOPIC_TEMPLATES
            .iter()
            .take(self.variants)
            .map(|t| t.replace("{}", topic.trim()))
            .collect())
    }
}

const PASSAGE_PREFIXES: [&str; 16] = [
    "In short,",
    "Put simply,",
    "Reportedly,",
    "To be clear,",
    "As noted,",
    "In other words,",
    "Frankly,",
    "Simply put,",
    "For the record,",
    "Honestly,",
    "Basically,",
    "Indeed,",
    "Clearly,",
    "In brief,",
    "Overall,",
    "Notably,",
];

/// Prepends stock discourse markers.
#[derive(Debug, Clone)]
pub struct TemplatePassageParaphraser {
    pub variants: usize,
}

impl Default for TemplatePassageParaphraser {
    fn default() -> Self {
        Self { variants: 2 }
    }
}

impl PassageParaphraser for TemplatePassageParaphraser {
    fn paraphrase_passage(&self, passage: &str, n: usize) -> Result<Vec<String>> {
        if passage.trim().is_empty() {
            return Ok(Vec::new());
        }
        Ok(PASSAGE_PREFIXES
            .iter()
            .take(n.min(self.variants))
            .map(|p| format!("{p} {}", passage.trim()))
            .collect())
    }
}

/// Signed feature hashing of lowercase words, with optional planted vectors.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    pub dim: usize,
    planted: BTreeMap<String, Vec<f64>>,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl HashedEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            planted: BTreeMap::new(),
        }
    }

    /// Returns `vector` whenever `text` is embedded.
    pub fn plant(mut self, text: &str, vector: Vec<f64>) -> Self {
        self.planted.insert(text.to_string(), vector);
        self
    }
}

impl Embedder for HashedEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.planted.get(text) {
            return Ok(v.clone());
        }
        let mut v = vec![0.0; self.dim];
        for w in split_words(text) {
            if !w.chars().any(char::is_alphanumeric) {
                continue;
            }
            let h = Sha256::digest(w.as_bytes());
            let slot = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % self.dim;
            v[slot] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        Ok(v)
    }
}

/// Exact-phrase gazetteer; a topic gets every class of every listed phrase
/// it contains as a word sequence.
#[derive(Debug, Clone, Default)]
pub struct GazetteerTagger {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl GazetteerTagger {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut t = Self::default();
        for (phrase, class) in pairs {
            t.insert(phrase, class);
        }
        t
    }

    pub fn insert(&mut self, phrase: &str, class: &str) {
        self.entries
            .entry(split_words(phrase).join(" "))
            .or_default()
            .insert(class.to_string());
    }

    /// A handful of common names, places and dates.
    pub fn with_defaults() -> Self {
        Self::from_pairs([
            ("abraham lincoln", "PERSON"),
            ("donald trump", "PERSON"),
            ("hillary clinton", "PERSON"),
            ("france", "GPE"),
            ("china", "GPE"),
            ("united states", "GPE"),
            ("europe", "LOC"),
            ("monday", "DATE"),
            ("2016", "DATE"),
            ("united nations", "ORG"),
        ])
    }
}

impl EntityTagger for GazetteerTagger {
    fn classes(&self, topic: &str) -> Result<BTreeSet<String>> {
        let words = split_words(topic);
        let mut out = BTreeSet::new();
        for (phrase, classes) in &self.entries {
            let needle: Vec<&str> = phrase.split(' ').collect();
            if needle.len() <= words.len() && words.windows(needle.len()).any(|w| w.iter().zip(&needle).all(|(a, b)| a == b)) {
                out.extend(classes.iter().cloned());
            }
        }
        Ok(out)
    }
}

/// All mock providers bundled; usable with [`super::Providers::uniform`].
#[derive(Debug, Clone)]
pub struct MockProviders {
    pub noun_phrases: HeuristicNounPhrases,
    pub topics: FrequentTopicExtractor,
    pub topic_paraphraser: TemplateTopicParaphraser,
    pub passage_paraphraser: TemplatePassageParaphraser,
    pub embedder: HashedEmbedder,
    pub tagger: GazetteerTagger,
}

impl Default for MockProviders {
    fn default() -> Self {
        Self {
            noun_phrases: HeuristicNounPhrases,
            topics: FrequentTopicExtractor,
            topic_paraphraser: TemplateTopicParaphraser::default(),
            passage_paraphraser: TemplatePassageParaphraser::default(),
            embedder: HashedEmbedder::default(),
            tagger: GazetteerTagger::with_defaults(),
        }
    }
}

impl NounPhraseExtractor for MockProviders {
    fn noun_phrases(&self, passage: &str) -> Result<Vec<String>> {
        self.noun_phrases.noun_phrases(passage)
    }
}

impl TopicExtractor for MockProviders {
    fn extract(&self, passage: &str, candidates: &[String]) -> Result<Option<String>> {
        self.topics.extract(passage, candidates)
    }
}

impl TopicParaphraser for MockProviders {
    fn paraphrase_topic(&self, topic: &str) -> Result<Vec<String>> {
        self.topic_paraphraser.paraphrase_topic(topic)
    }
}

impl PassageParaphraser for MockProviders {
    fn paraphrase_passage(&self, passage: &str, n: usize) -> Result<Vec<String>> {
        self.passage_paraphraser.paraphrase_passage(passage, n)
    }
}

impl Embedder for MockProviders {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embedder.embed(text)
    }
}

impl EntityTagger for MockProviders {
    fn classes(&self, topic: &str) -> Result<BTreeSet<String>> {
        self.tagger.classes(topic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noun_phrase_rules() {
        let np = HeuristicNounPhrases;
        let got = np.extract("Officials said the Supreme Court would hear the tax increase case. We back the plan.");
        assert!(got.contains(&"supreme court".to_string()), "{got:?}");
        assert!(got.contains(&"tax increase".to_string()), "{got:?}");
        assert!(got.contains(&"plan".to_string()), "{got:?}");
        assert!(!got.contains(&"officials".to_string()));
        assert!(np.extract("and so it goes").is_empty());
    }

    #[test]
    fn extractor_picks_most_frequent() {
        let c = vec!["plan".to_string(), "tax".to_string()];
        let got = FrequentTopicExtractor.extract("tax the plan, tax more", &c).unwrap();
        assert_eq!(got.as_deref(), Some("tax"));
        assert_eq!(FrequentTopicExtractor.extract("x", &[]).unwrap(), None);
    }

    #[test]
    fn embedder_is_deterministic_and_bag_of_words() {
        let e = HashedEmbedder::new(16);
        assert_eq!(e.embed("a b c").unwrap(), e.embed("c b a").unwrap());
        assert_eq!(e.embed("x").unwrap().len(), 16);
        assert!(e.embed("").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gazetteer_matches_phrases() {
        let t = GazetteerTagger::with_defaults();
        assert!(t.classes("Abraham Lincoln").unwrap().contains("PERSON"));
        assert!(t.classes("corporations").unwrap().is_empty());
        assert!(t.classes("trade with china").unwrap().contains("GPE"));
    }
}
