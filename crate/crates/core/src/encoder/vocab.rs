use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token and runs of alphanumerics stay together.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token↔id map with the four specials pinned at ids 0–3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary tokens (specials are prepended).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s.to_string());
        }
        for t in tokens {
            v.insert(t.into());
        }
        v
    }

    /// Corpus-built vocabulary: every token seen at least `min_count` times,
    /// ordered by descending frequency then lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut items: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(items.into_iter().map(|(t, _)| t))
    }

    fn insert(&mut self, tok: String) {
        if !self.index.contains_key(&tok) {
            self.index.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> io::Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "vocabulary must start with [CLS], [SEP], [PAD], [UNK]",
            ));
        }
        let v = Self::from_tokens(tokens[4..].iter().copied());
        if v.len() != tokens.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "duplicate vocabulary entry"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_pinned() {
        let v = Vocabulary::from_tokens(["a"]);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[UNK]"), UNK);
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::from_tokens(["abraham", "lincoln", "!"]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(
            v.tokenize("Abraham Lincoln!"),
            vec![v.id("abraham"), v.id("lincoln"), v.id("!")]
        );
        assert_eq!(v.tokenize("zzzqqq"), vec![UNK]);
    }

    #[test]
    fn split_handles_punctuation_runs() {
        assert_eq!(split_words("Don't stop,now"), ["don", "'", "t", "stop", ",", "now"]);
    }

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocabulary::build(["b a b", "c b a"], 1);
        assert_eq!(&v.tokens()[4..], &["b", "a", "c"]);
        let v = Vocabulary::build(["b a b", "c b a"], 2);
        assert_eq!(&v.tokens()[4..], &["b", "a"]);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["the cat sat on the mat"], 1);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }
}
