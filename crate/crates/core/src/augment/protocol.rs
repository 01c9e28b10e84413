//! Directory-based batch protocol for out-of-process providers.
//!
//! The client writes `requests.jsonl` (one `{kind, id, payload}` object per
//! line) and reads `responses.jsonl` (`{id, kind, ok, result, error, meta}`).
//! Request ids are content hashes, so a rerun over the same inputs asks for
//! the same ids and picks up earlier answers. Calls without an answer are
//! recorded as pending and fail with a provider error; the caller writes
//! them out, lets the provider respond, and runs again.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::mock::{HeuristicNounPhrases, MockProviders};
use super::{Embedder, EntityTagger, NounPhraseExtractor, PassageParaphraser, TopicExtractor, TopicParaphraser};
use crate::data::write_atomic;
use crate::error::{Error, Result};

pub const REQUESTS_FILE: &str = "requests.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ExtractTopic,
    ParaphraseTopic,
    ParaphrasePassage,
    Embed,
    TagEntities,
}

impl RequestKind {
    pub fn name(self) -> &'static str {
        match self {
            RequestKind::ExtractTopic => "extract_topic",
            RequestKind::ParaphraseTopic => "paraphrase_topic",
            RequestKind::ParaphrasePassage => "paraphrase_passage",
            RequestKind::Embed => "embed",
            RequestKind::TagEntities => "tag_entities",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub kind: RequestKind,
    pub id: String,
    pub payload: Value,
}

impl Request {
    pub fn new(kind: RequestKind, payload: Value) -> Self {
        Self {
            id: request_id(kind, &payload),
            kind,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub kind: RequestKind,
    pub ok: bool,
    #[serde(default)]
    pub result: Value,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub meta: Value,
}

/// First 16 bytes of SHA-256 over the kind and canonical payload, in hex.
pub fn request_id(kind: RequestKind, payload: &Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update([0]);
    h.update(payload.to_string().as_bytes());
    hex::encode(&h.finalize()[..16])
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, Result<T, String>)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str(l).map_err(|e| e.to_string())))
        .collect())
}

pub fn read_responses(path: &Path) -> Result<Vec<Response>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, r)| {
            r.map_err(|msg| Error::Data {
                path: path.to_path_buf(),
                line,
                msg,
            })
        })
        .collect()
}

pub fn read_requests(path: &Path) -> Result<Vec<Request>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, r)| {
            r.map_err(|msg| Error::Data {
                path: path.to_path_buf(),
                line,
                msg,
            })
        })
        .collect()
}

/// Provider implementation backed by a response file. Noun-phrase
/// candidates are computed in-process.
#[derive(Debug)]
pub struct ProtocolClient {
    dir: PathBuf,
    responses: HashMap<String, Response>,
    pending: RefCell<(Vec<Request>, HashSet<String>)>,
    noun_phrases: HeuristicNounPhrases,
}

impl ProtocolClient {
    /// Opens `dir`, loading `responses.jsonl` when present.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESPONSES_FILE);
        let mut responses = HashMap::new();
        if path.exists() {
            for r in read_responses(&path)? {
                if responses.insert(r.id.clone(), r).is_some() {
                    return Err(Error::Provider(format!("duplicate response id in {}", path.display())));
                }
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            responses,
            pending: RefCell::new((Vec::new(), HashSet::new())),
            noun_phrases: HeuristicNounPhrases,
        })
    }

    pub fn answered(&self) -> usize {
        self.responses.len()
    }

    pub fn pending(&self) -> usize {
        self.pending.borrow().0.len()
    }

    /// Writes unanswered requests (in first-call order) to `requests.jsonl`.
    pub fn write_requests(&self) -> Result<usize> {
        let p = self.pending.borrow();
        crate::data::write_jsonl(&self.dir.join(REQUESTS_FILE), &p.0)?;
        Ok(p.0.len())
    }

    fn call(&self, kind: RequestKind, payload: Value) -> Result<Value> {
        let req = Request::new(kind, payload);
        match self.responses.get(&req.id) {
            Some(r) if r.kind != kind => Err(Error::Provider(format!("response {} has kind {:?}", r.id, r.kind))),
            Some(r) if r.ok => Ok(r.result.clone()),
            Some(r) => Err(Error::Provider(r.error.clone().unwrap_or_else(|| "provider error".into()))),
            None => {
                let mut p = self.pending.borrow_mut();
                if p.1.insert(req.id.clone()) {
                    p.0.push(req);
                }
                Err(Error::Provider(format!("{} pending", kind.name())))
            }
        }
    }

    fn strings(&self, kind: RequestKind, payload: Value) -> Result<Vec<String>> {
        serde_json::from_value(self.call(kind, payload)?)
            .map_err(|e| Error::Provider(format!("{}: malformed result: {e}", kind.name())))
    }
}

impl NounPhraseExtractor for ProtocolClient {
    fn noun_phrases(&self, passage: &str) -> Result<Vec<String>> {
        self.noun_phrases.noun_phrases(passage)
    }
}

impl TopicExtractor for ProtocolClient {
    fn extract(&self, passage: &str, candidates: &[String]) -> Result<Option<String>> {
        let v = self.call(RequestKind::ExtractTopic, json!({"passage": passage, "candidates": candidates}))?;
        serde_json::from_value(v).map_err(|e| Error::Provider(format!("extract_topic: malformed result: {e}")))
    }
}

impl TopicParaphraser for ProtocolClient {
    fn paraphrase_topic(&self, topic: &str) -> Result<Vec<String>> {
        self.strings(RequestKind::ParaphraseTopic, json!({"topic": topic, "max": 10}))
    }
}

impl PassageParaphraser for ProtocolClient {
    fn paraphrase_passage(&self, passage: &str, n: usize) -> Result<Vec<String>> {
        self.strings(RequestKind::ParaphrasePassage, json!({"passage": passage, "n": n}))
    }
}

impl Embedder for ProtocolClient {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let v = self.call(RequestKind::Embed, json!({"text": text}))?;
        serde_json::from_value(v).map_err(|e| Error::Provider(format!("embed: malformed result: {e}")))
    }
}

impl EntityTagger for ProtocolClient {
    fn classes(&self, topic: &str) -> Result<BTreeSet<String>> {
        Ok(self.strings(RequestKind::TagEntities, json!({"topic": topic}))?.into_iter().collect())
    }
}

fn field<'a>(payload: &'a Value, key: &str) -> std::result::Result<&'a Value, String> {
    payload.get(key).ok_or_else(|| format!("payload lacks {key:?}"))
}

fn text_field<'a>(payload: &'a Value, key: &str) -> std::result::Result<&'a str, String> {
    field(payload, key)?.as_str().ok_or_else(|| format!("{key:?} is not a string"))
}

/// Answers one request with the mock providers.
pub fn answer(mock: &MockProviders, req: &Request) -> Response {
    let result: std::result::Result<Value, String> = (|| {
        let p = &req.payload;
        let v = match req.kind {
            RequestKind::ExtractTopic => {
                let cands: Vec<String> =
                    serde_json::from_value(field(p, "candidates")?.clone()).map_err(|e| e.to_string())?;
                json!(mock.extract(text_field(p, "passage")?, &cands).map_err(|e| e.to_string())?)
            }
            RequestKind::ParaphraseTopic => {
                let mut out = mock.paraphrase_topic(text_field(p, "topic")?).map_err(|e| e.to_string())?;
                out.truncate(p.get("max").and_then(Value::as_u64).unwrap_or(10) as usize);
                json!(out)
            }
            RequestKind::ParaphrasePassage => {
                let n = field(p, "n")?.as_u64().ok_or("\"n\" is not an integer")? as usize;
                json!(mock.paraphrase_passage(text_field(p, "passage")?, n).map_err(|e| e.to_string())?)
            }
            RequestKind::Embed => json!(mock.embed(text_field(p, "text")?).map_err(|e| e.to_string())?),
            RequestKind::TagEntities => json!(mock.classes(text_field(p, "topic")?).map_err(|e| e.to_string())?),
        };
        Ok(v)
    })();
    let meta = json!({"provider": "mock"});
    match result {
        Ok(v) => Response {
            id: req.id.clone(),
            kind: req.kind,
            ok: true,
            result: v,
            error: None,
            meta,
        },
        Err(e) => Response {
            id: req.id.clone(),
            kind: req.kind,
            ok: false,
            result: Value::Null,
            error: Some(e),
            meta,
        },
    }
}

/// In-process responder: answers every request in `dir/requests.jsonl`
/// and merges the answers into `dir/responses.jsonl`. Returns how many
/// new responses were written.
pub fn respond_with_mock(dir: &Path, mock: &MockProviders) -> Result<usize> {
    let requests = read_requests(&dir.join(REQUESTS_FILE))?;
    let resp_path = dir.join(RESPONSES_FILE);
    let mut all = if resp_path.exists() { read_responses(&resp_path)? } else { Vec::new() };
    let mut known: HashSet<String> = all.iter().map(|r| r.id.clone()).collect();
    let mut added = 0;
    for req in &requests {
        if known.insert(req.id.clone()) {
            all.push(answer(mock, req));
            added += 1;
        }
    }
    write_atomic(&resp_path, crate::data::to_jsonl(&all)?.as_bytes())?;
    Ok(added)
}

/// Checks that responses answer exactly the requested ids, once each.
pub fn check_complete(requests: &[Request], responses: &[Response]) -> Result<()> {
    let want: HashSet<&str> = requests.iter().map(|r| r.id.as_str()).collect();
    let mut got = HashSet::new();
    for r in responses {
        if !got.insert(r.id.as_str()) {
            return Err(Error::Provider(format!("duplicate response {}", r.id)));
        }
    }
    if want != got {
        let missing = want.difference(&got).count();
        let extra = got.difference(&want).count();
        return Err(Error::Provider(format!("{missing} requests unanswered, {extra} unexpected responses")));
    }
    Ok(())
}

/// Runs `job` against a [`ProtocolClient`] on `dir`, answering pending
/// requests with `mock` between rounds until nothing is pending.
pub fn run_rounds<T>(
    dir: &Path,
    mock: &MockProviders,
    max_rounds: usize,
    mut job: impl FnMut(&ProtocolClient) -> Result<T>,
) -> Result<(T, usize)> {
    for round in 1..=max_rounds {
        let client = ProtocolClient::open(dir)?;
        let out = job(&client)?;
        if client.pending() == 0 {
            return Ok((out, round));
        }
        client.write_requests()?;
        respond_with_mock(dir, mock)?;
    }
    Err(Error::Provider(format!("requests still pending after {max_rounds} rounds")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable_and_content_addressed() {
        let a = request_id(RequestKind::Embed, &json!({"text": "x"}));
        assert_eq!(a, request_id(RequestKind::Embed, &json!({"text": "x"})));
        assert_ne!(a, request_id(RequestKind::Embed, &json!({"text": "y"})));
        assert_ne!(a, request_id(RequestKind::TagEntities, &json!({"text": "x"})));
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn pending_then_answered() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockProviders::default();
        let c = ProtocolClient::open(dir.path()).unwrap();
        assert!(c.embed("hello").is_err());
        assert!(c.embed("hello").is_err());
        assert!(c.paraphrase_topic("tax").is_err());
        assert_eq!(c.pending(), 2);
        assert_eq!(c.write_requests().unwrap(), 2);
        assert_eq!(respond_with_mock(dir.path(), &mock).unwrap(), 2);

        let reqs = read_requests(&dir.path().join(REQUESTS_FILE)).unwrap();
        let resps = read_responses(&dir.path().join(RESPONSES_FILE)).unwrap();
        check_complete(&reqs, &resps).unwrap();

        let c = ProtocolClient::open(dir.path()).unwrap();
        assert_eq!(c.embed("hello").unwrap(), mock.embed("hello").unwrap());
        assert_eq!(c.paraphrase_topic("tax").unwrap(), mock.paraphrase_topic("tax").unwrap());
        assert_eq!(c.pending(), 0);
    }

    #[test]
    fn malformed_requests_get_structured_errors() {
        let mock = MockProviders::default();
        let req = Request::new(RequestKind::Embed, json!({"txt": 1}));
        let r = answer(&mock, &req);
        assert!(!r.ok);
        assert!(r.error.unwrap().contains("text"));
    }

    #[test]
    fn completeness_check() {
        let a = Request::new(RequestKind::Embed, json!({"text": "a"}));
        let mock = MockProviders::default();
        let r = answer(&mock, &a);
        assert!(check_complete(std::slice::from_ref(&a), std::slice::from_ref(&r)).is_ok());
        assert!(check_complete(std::slice::from_ref(&a), &[]).is_err());
        assert!(check_complete(&[a], &[r.clone(), r]).is_err());
    }
}
