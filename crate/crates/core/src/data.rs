//! Record types, JSONL loading and dataset splits.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Three-way stance. Class indices follow the declaration order, which is
/// also the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StanceLabel {
    Pro,
    Against,
    Neutral,
}

impl StanceLabel {
    pub const ALL: [StanceLabel; 3] = [StanceLabel::Pro, StanceLabel::Against, StanceLabel::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StanceLabel::Pro => "Pro",
            StanceLabel::Against => "Against",
            StanceLabel::Neutral => "Neutral",
        }
    }

    /// Integer wire encoding: 0 = Against, 1 = Neutral, 2 = Pro.
    pub fn from_wire(v: i64) -> Option<Self> {
        match v {
            0 => Some(StanceLabel::Against),
            1 => Some(StanceLabel::Neutral),
            2 => Some(StanceLabel::Pro),
            _ => None,
        }
    }

    pub fn wire(self) -> i64 {
        match self {
            StanceLabel::Against => 0,
            StanceLabel::Neutral => 1,
            StanceLabel::Pro => 2,
        }
    }
}

impl fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StanceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Ok(v) = t.parse::<i64>() {
            return Self::from_wire(v).ok_or_else(|| Error::Input(format!("unknown stance {s:?}")));
        }
        match t.to_ascii_lowercase().as_str() {
            "pro" | "favor" | "favour" => Ok(StanceLabel::Pro),
            "against" | "con" => Ok(StanceLabel::Against),
            "neutral" | "none" => Ok(StanceLabel::Neutral),
            _ => Err(Error::Input(format!("unknown stance {s:?}"))),
        }
    }
}

impl Serialize for StanceLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for StanceLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Int(i64),
            Str(String),
        }
        match Wire::deserialize(d)? {
            Wire::Int(v) => StanceLabel::from_wire(v)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown stance {v}"))),
            Wire::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Records that check their own invariants after parsing.
pub trait Validate {
    fn validate(&self) -> std::result::Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StanceExample {
    pub id: String,
    pub passage: String,
    pub topic: String,
    pub stance: StanceLabel,
    /// True when the topic also occurs in training (few-shot).
    pub seen: bool,
    #[serde(default)]
    pub phenomena: BTreeSet<String>,
}

impl StanceExample {
    pub fn new(id: impl Into<String>, passage: impl Into<String>, topic: impl Into<String>, stance: StanceLabel) -> Self {
        Self {
            id: id.into(),
            passage: passage.into(),
            topic: topic.into(),
            stance,
            seen: true,
            phenomena: BTreeSet::new(),
        }
    }

    pub fn has(&self, phenomenon: &str) -> bool {
        self.phenomena.contains(phenomenon)
    }
}

impl Validate for StanceExample {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.topic.trim().is_empty() {
            return Err("empty topic".into());
        }
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        Ok(())
    }
}

/// Phenomenon flags used by the challenging-phenomena report.
pub const PHENOMENA: [&str; 5] = ["Qte", "Sarc", "Imp", "mlS", "mlT"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TawQuadruplet {
    pub passage: String,
    pub topic: String,
    pub topic_paraphrase: String,
    pub similar_passage: String,
    pub site_p: String,
    pub site_q: String,
    pub similarity: f64,
}

/// Minimum cosine similarity between a passage and its partner.
pub const SIMILARITY_THRESHOLD: f64 = 0.70;

impl Validate for TawQuadruplet {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.site_p == self.site_q {
            return Err(format!("both passages come from {}", self.site_p));
        }
        if !(self.similarity >= SIMILARITY_THRESHOLD && self.similarity <= 1.0 + 1e-9) {
            return Err(format!("similarity {} outside [0.70, 1]", self.similarity));
        }
        if self.topic.trim().is_empty() || self.topic_paraphrase.trim().is_empty() {
            return Err("empty topic or paraphrase".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sem16Target {
    DT,
    HC,
    FM,
    LA,
    A,
    CC,
}

impl Sem16Target {
    pub const ALL: [Sem16Target; 6] = [
        Sem16Target::DT,
        Sem16Target::HC,
        Sem16Target::FM,
        Sem16Target::LA,
        Sem16Target::A,
        Sem16Target::CC,
    ];

    /// Natural-language topic used when the target is fed to a model.
    pub fn topic(self) -> &'static str {
        match self {
            Sem16Target::DT => "donald trump",
            Sem16Target::HC => "hillary clinton",
            Sem16Target::FM => "feminist movement",
            Sem16Target::LA => "legalization of abortion",
            Sem16Target::A => "atheism",
            Sem16Target::CC => "climate change is a real concern",
        }
    }
}

impl FromStr for Sem16Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| format!("{t:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Input(format!("unknown target {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sem16Record {
    pub passage: String,
    pub target: Sem16Target,
    pub stance: StanceLabel,
}

impl Validate for Sem16Record {
    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Abort on the first malformed line.
    #[default]
    Strict,
    /// Skip malformed lines and report them.
    Lenient,
}

#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// `(line, message)` for every skipped line (lenient mode only).
    pub skipped: Vec<(usize, String)>,
}

/// Reads one JSON object per non-blank line.
pub fn load_jsonl<T: DeserializeOwned + Validate>(path: &Path, mode: LoadMode) -> Result<Loaded<T>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<T>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r));
        match (parsed, mode) {
            (Ok(r), _) => records.push(r),
            (Err(msg), LoadMode::Strict) => {
                return Err(Error::Data {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg,
                })
            }
            (Err(msg), LoadMode::Lenient) => {
                log::warn!("{}:{line_no}: skipped: {msg}", path.display());
                skipped.push((line_no, msg));
            }
        }
    }
    Ok(Loaded { records, skipped })
}

pub fn load_stance_jsonl(path: &Path, mode: LoadMode) -> Result<Vec<StanceExample>> {
    Ok(load_jsonl(path, mode)?.records)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes records as JSONL via a temporary file and rename.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct ZeroFewSplit {
    pub zero: Vec<StanceExample>,
    pub few: Vec<StanceExample>,
    pub zero_topics: usize,
    pub few_topics: usize,
}

/// Partitions by the stored `seen` flag and counts distinct topics per side.
pub fn split_zero_few(examples: &[StanceExample]) -> ZeroFewSplit {
    let (few, zero): (Vec<_>, Vec<_>) = examples.iter().cloned().partition(|e| e.seen);
    let topics = |v: &[StanceExample]| v.iter().map(|e| e.topic.as_str()).collect::<BTreeSet<_>>().len();
    ZeroFewSplit {
        zero_topics: topics(&zero),
        few_topics: topics(&few),
        zero,
        few,
    }
}

/// `(train, test)` with every record of `held_out` in test.
pub fn leave_one_target_out(records: &[Sem16Record], held_out: Sem16Target) -> (Vec<Sem16Record>, Vec<Sem16Record>) {
    let (test, train): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| r.target == held_out);
    if test.is_empty() {
        log::warn!("target {held_out:?} has no records; test split is empty");
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stance_wire_values() {
        let p: StanceExample =
            serde_json::from_str(r#"{"id":"a","passage":"x","topic":"t","stance":"2","seen":true}"#).unwrap();
        assert_eq!(p.stance, StanceLabel::Pro);
        let p: StanceExample =
            serde_json::from_str(r#"{"id":"a","passage":"x","topic":"t","stance":0,"seen":false}"#).unwrap();
        assert_eq!(p.stance, StanceLabel::Against);
        assert_eq!("neutral".parse::<StanceLabel>().unwrap(), StanceLabel::Neutral);
        assert!("3".parse::<StanceLabel>().is_err());
        assert_eq!(serde_json::to_string(&StanceLabel::Pro).unwrap(), "\"Pro\"");
    }

    #[test]
    fn loader_strict_and_lenient() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"1","passage":"p","topic":"t","stance":2,"seen":true}"#, "\n",
                r#"{"id":"2","passage":"p","topic":"t","stance":"Against","seen":true,"phenomena":["Qte"]}"#, "\n",
                "\n",
                r#"{"id":"3","passage":"","topic":"u","stance":1,"seen":false}"#, "\n",
            ),
        )
        .unwrap();
        let r = load_stance_jsonl(&path, LoadMode::Strict).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r[1].has("Qte"));

        fs::write(
            &path,
            concat!(
                r#"{"id":"1","passage":"p","topic":"t","stance":2,"seen":true}"#, "\n",
                r#"{"id":"2","passage":"p","stance":2,"seen":true}"#, "\n",
                r#"{"id":"3","passage":"p","topic":"t","stance":7,"seen":true}"#, "\n",
            ),
        )
        .unwrap();
        match load_stance_jsonl(&path, LoadMode::Strict) {
            Err(Error::Data { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("topic"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let l: Loaded<StanceExample> = load_jsonl(&path, LoadMode::Lenient).unwrap();
        assert_eq!(l.records.len(), 1);
        assert_eq!(l.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), [2, 3]);
    }

    #[test]
    fn quadruplet_invariants() {
        let mut q = TawQuadruplet {
            passage: "p".into(),
            topic: "t".into(),
            topic_paraphrase: "t".into(),
            similar_passage: "q".into(),
            site_p: "a".into(),
            site_q: "b".into(),
            similarity: 0.7,
        };
        assert!(q.validate().is_ok());
        q.similarity = 0.69;
        assert!(q.validate().is_err());
        q.similarity = 0.9;
        q.site_q = "a".into();
        assert!(q.validate().is_err());
    }

    #[test]
    fn zero_few_counts() {
        let mut a = StanceExample::new("1", "p", "x", StanceLabel::Pro);
        let mut b = a.clone();
        b.id = "2".into();
        let mut c = a.clone();
        c.topic = "y".into();
        c.seen = false;
        a.seen = true;
        b.seen = true;
        let s = split_zero_few(&[a.clone(), b, c]);
        assert_eq!((s.few.len(), s.zero.len(), s.few_topics, s.zero_topics), (2, 1, 1, 1));
        assert!(split_zero_few(&[a]).zero.is_empty());
    }

    #[test]
    fn target_names_parse() {
        assert_eq!("dt".parse::<Sem16Target>().unwrap(), Sem16Target::DT);
        assert!("XX".parse::<Sem16Target>().is_err());
    }

    fn arb_example() -> impl Strategy<Value = StanceExample> {
        (
            "[a-z0-9]{1,8}",
            ".{0,40}",
            "[a-z ]{0,10}[a-z]",
            0usize..3,
            any::<bool>(),
            prop::collection::btree_set(prop::sample::select(PHENOMENA.to_vec()), 0..3),
        )
            .prop_map(|(id, passage, topic, s, seen, ph)| StanceExample {
                id,
                passage,
                topic,
                stance: StanceLabel::from_index(s).unwrap(),
                seen,
                phenomena: ph.into_iter().map(String::from).collect(),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jsonl_round_trip(records in prop::collection::vec(arb_example(), 0..12)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.jsonl");
            write_jsonl(&path, &records).unwrap();
            let back = load_stance_jsonl(&path, LoadMode::Strict).unwrap();
            prop_assert_eq!(back, records);
        }

        #[test]
        fn zero_few_is_partition(records in prop::collection::vec(arb_example(), 0..30)) {
            let s = split_zero_few(&records);
            prop_assert_eq!(s.zero.len() + s.few.len(), records.len());
            prop_assert!(s.zero.iter().all(|e| !e.seen));
            prop_assert!(s.few.iter().all(|e| e.seen));
        }

        #[test]
        fn loto_is_partition(targets in prop::collection::vec(0usize..6, 0..50), held in 0usize..6) {
            let recs: Vec<_> = targets.iter().enumerate().map(|(i, &t)| Sem16Record {
                passage: i.to_string(),
                target: Sem16Target::ALL[t],
                stance: StanceLabel::Pro,
            }).collect();
            let (train, test) = leave_one_target_out(&recs, Sem16Target::ALL[held]);
            prop_assert_eq!(train.len() + test.len(), recs.len());
            prop_assert!(test.iter().all(|r| r.target == Sem16Target::ALL[held]));
            prop_assert!(train.iter().all(|r| r.target != Sem16Target::ALL[held]));
        }
    }
}
