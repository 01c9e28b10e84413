//! Seeded synthetic corpora: a small separable stance task, a syndicated
//! news corpus for topic pairing, a fixed-target fixture and toy word
//! vectors.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::CorpusDoc;
use crate::data::{Sem16Record, Sem16Target, StanceExample, StanceLabel};
use crate::encoder::EncoderConfig;
use crate::eval::WordEmbeddings;

/// Topics with training data in the toy task.
pub const SEEN_TOPICS: [&str; 12] = [
    "solar power",
    "school uniforms",
    "nuclear energy",
    "minimum wage",
    "space exploration",
    "organic farming",
    "public transit",
    "remote work",
    "electric cars",
    "video games",
    "online voting",
    "plastic bags",
];

/// Topics that only appear at test time.
pub const ZERO_SHOT_TOPICS: [&str; 8] = [
    "wind farms",
    "city parks",
    "bike lanes",
    "rent control",
    "toll roads",
    "street lights",
    "water meters",
    "food trucks",
];

pub const PRO_CUES: [&str; 6] = ["support", "welcome", "endorse", "applaud", "praise", "champion"];
pub const AGAINST_CUES: [&str; 6] = ["oppose", "reject", "condemn", "resist", "denounce", "criticize"];

const SUBJECTS: [&str; 8] = [
    "residents", "local groups", "many teachers", "the council", "voters", "some experts", "our editors", "parents",
];
const ADVERBS: [&str; 5] = ["strongly", "firmly", "openly", "loudly", "clearly"];
const FRAMES: [&str; 5] = ["talked about", "wrote about", "asked about", "heard about", "read about"];
const TAILS: [&str; 7] = [
    "at the meeting",
    "this week",
    "in the newspaper",
    "on the radio",
    "after the vote",
    "during the forum",
    "last month",
];

/// Train/validation/test partition of the toy stance task.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub train: Vec<StanceExample>,
    pub val: Vec<StanceExample>,
    /// Seen-topic test rows (`seen = true`) followed by zero-shot rows.
    pub test: Vec<StanceExample>,
}

impl ToyCorpus {
    pub const SEEN_PER_TOPIC: usize = 20;
    pub const ZERO_SHOT_TOTAL: usize = 60;

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &StanceExample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// One passage whose stance toward `topic` is carried only by the cue verb.
/// Neutral passages use the shared framing words and no cue, down to a bare
/// mention of the topic.
pub fn toy_passage<R: Rng + ?Sized>(topic: &str, stance: StanceLabel, rng: &mut R) -> String {
    let subject = SUBJECTS.choose(rng).expect("non-empty");
    let adverb = ADVERBS.choose(rng).expect("non-empty");
    let frame = FRAMES.choose(rng).expect("non-empty");
    let tail = TAILS.choose(rng).expect("non-empty");
    let cue = match stance {
        StanceLabel::Pro => PRO_CUES.choose(rng),
        StanceLabel::Against => AGAINST_CUES.choose(rng),
        StanceLabel::Neutral => None,
    };
    match cue {
        None => match rng.random_range(0..4) {
            0 => format!("{subject} {frame} {topic} {tail} ."),
            1 => format!("{tail} , {subject} {frame} the {topic} plan ."),
            2 => format!("{topic} {tail} ."),
            _ => format!("{topic} ."),
        },
        Some(cue) => match rng.random_range(0..3) {
            0 => format!("{subject} {adverb} {cue} {topic} {tail} ."),
            1 => format!("{subject} {frame} {topic} {tail} and {adverb} {cue} it ."),
            _ => format!("{tail} , {subject} {cue} the {topic} plan ."),
        },
    }
}

/// 300 examples: 20 per seen topic (14 train, 3 validation, 3 test) and 60
/// zero-shot test examples spread over the held-out topics. Labels cycle
/// Pro, Against, Neutral within each topic.
pub fn toy_stance_corpus(seed: u64) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ToyCorpus {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut n = 0;
    let mut make = |topic: &str, k: usize, seen: bool, rng: &mut ChaCha8Rng| {
        let stance = StanceLabel::ALL[k % 3];
        n += 1;
        let mut e = StanceExample::new(format!("toy-{n:03}"), toy_passage(topic, stance, rng), topic, stance);
        e.seen = seen;
        e
    };
    let mut zero = Vec::new();
    for topic in SEEN_TOPICS {
        let mut rows: Vec<StanceExample> =
            (0..ToyCorpus::SEEN_PER_TOPIC).map(|k| make(topic, k, true, &mut rng)).collect();
        rows.shuffle(&mut rng);
        out.test.extend(rows.drain(17..));
        out.val.extend(rows.drain(14..));
        out.train.extend(rows);
    }
    let base = ToyCorpus::ZERO_SHOT_TOTAL / ZERO_SHOT_TOPICS.len();
    let extra = ToyCorpus::ZERO_SHOT_TOTAL % ZERO_SHOT_TOPICS.len();
    for (i, topic) in ZERO_SHOT_TOPICS.iter().enumerate() {
        for k in 0..base + usize::from(i < extra) {
            zero.push(make(topic, k + i, false, &mut rng));
        }
    }
    out.test.extend(zero);
    out
}

const SITES: [&str; 5] = ["daily-ledger", "metro-wire", "river-post", "valley-news", "harbor-times"];
const EVENT_WORDS: [&str; 24] = [
    "budget", "hearing", "survey", "petition", "lawsuit", "audit", "rally", "forecast", "grant", "contract",
    "deadline", "pilot", "inspection", "report", "ballot", "shortage", "expansion", "merger", "strike", "summit",
    "permit", "study", "tender", "review",
];

/// News corpus in which every story appears on two or three sites with a
/// one-word edit, so each passage has a near-duplicate elsewhere. Stories
/// per topic exceed the default per-topic cap. A few single-site and empty
/// documents are mixed in.
pub fn toy_news_corpus(seed: u64, stories_per_topic: usize) -> Vec<CorpusDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let topics = SEEN_TOPICS.iter().chain(ZERO_SHOT_TOPICS.iter());
    for (ti, topic) in topics.enumerate() {
        for s in 0..stories_per_topic {
            let events: Vec<&str> = EVENT_WORDS.choose_multiple(&mut rng, 3).copied().collect();
            let day = ["monday", "tuesday", "friday"][s % 3];
            let text = format!(
                "Reporters followed the {topic} {} on {day}. Officials said the {topic} {} would shape the coming {} \
                 and that the {topic} debate was far from over.",
                events[0], events[1], events[2]
            );
            let copies = 2 + (ti + s) % 2;
            let first = rng.random_range(0..SITES.len());
            for c in 0..copies {
                let site = SITES[(first + c) % SITES.len()];
                let edited = if c == 0 { text.clone() } else { text.replacen(day, "later", 1) };
                docs.push(CorpusDoc {
                    site: site.to_string(),
                    text: edited,
                });
            }
        }
    }
    docs.push(CorpusDoc {
        site: SITES[0].to_string(),
        text: "\n\n".to_string(),
    });
    docs.push(CorpusDoc {
        site: SITES[1].to_string(),
        text: "Weather stays mild and dry across the coast through the weekend.".to_string(),
    });
    docs
}

/// Per-target (Pro, Against, Neutral) counts of the six-target benchmark.
pub const SEM16_COUNTS: [(Sem16Target, [usize; 3]); 6] = [
    (Sem16Target::DT, [148, 200, 260]),
    (Sem16Target::HC, [163, 565, 256]),
    (Sem16Target::FM, [268, 511, 170]),
    (Sem16Target::LA, [167, 544, 222]),
    (Sem16Target::A, [124, 464, 145]),
    (Sem16Target::CC, [335, 26, 203]),
];

/// Placeholder records with the benchmark's per-target label counts.
pub fn sem16_fixture() -> Vec<Sem16Record> {
    let mut out = Vec::new();
    for (target, counts) in SEM16_COUNTS {
        for (label, &n) in StanceLabel::ALL.iter().zip(&counts) {
            for i in 0..n {
                out.push(Sem16Record {
                    passage: format!("{} {} post {i}", target.topic(), label.name().to_lowercase()),
                    target,
                    stance: *label,
                });
            }
        }
    }
    out
}

/// Encoder size used by the toy pipeline.
pub fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig {
        hidden: 32,
        layers: 2,
        heads: 4,
        ffn: 64,
        max_len: 32,
        vocab_size: 0,
        dropout: 0.1,
    }
}

/// Word vectors in which each topic's words share a random direction, so
/// some pairs of topics exceed a high cosine threshold.
pub fn toy_word_vectors(seed: u64, dim: usize) -> WordEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let mut pairs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for topic in SEEN_TOPICS.iter().chain(ZERO_SHOT_TOPICS.iter()) {
        let base = normal(&mut rng);
        for w in topic.split_whitespace() {
            if seen.insert(w.to_string()) {
                let noise = normal(&mut rng);
                let v: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + 0.3 * n).collect();
                pairs.push((w.to_string(), v));
            }
        }
    }
    WordEmbeddings::from_pairs(pairs).expect("uniform dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_target_out, split_zero_few};
    use std::collections::BTreeSet;

    #[test]
    fn toy_shape() {
        let c = toy_stance_corpus(7);
        assert_eq!(c.len(), 300);
        assert_eq!(c.train.len(), 168);
        assert_eq!(c.val.len(), 36);
        assert_eq!(c.test.len(), 96);
        let split = split_zero_few(&c.test);
        assert_eq!(split.zero.len(), 60);
        assert_eq!(split.zero_topics, 8);
        assert_eq!(split.few_topics, 12);
        let train_topics: BTreeSet<_> = c.train.iter().map(|e| e.topic.as_str()).collect();
        assert!(ZERO_SHOT_TOPICS.iter().all(|t| !train_topics.contains(t)));
        let ids: BTreeSet<_> = c.all().map(|e| e.id.as_str()).collect();
        assert_eq!(ids.len(), 300);
        for l in StanceLabel::ALL {
            let n = c.train.iter().filter(|e| e.stance == l).count();
            assert!(n >= 40, "{l:?}: {n}");
        }
        assert_eq!(c, toy_stance_corpus(7));
    }

    #[test]
    fn cues_determine_labels() {
        let c = toy_stance_corpus(3);
        for e in c.all() {
            let words: BTreeSet<&str> = e.passage.split_whitespace().collect();
            let pro = PRO_CUES.iter().any(|w| words.contains(w));
            let against = AGAINST_CUES.iter().any(|w| words.contains(w));
            let want = match (pro, against) {
                (true, false) => StanceLabel::Pro,
                (false, true) => StanceLabel::Against,
                (false, false) => StanceLabel::Neutral,
                _ => panic!("both cues in {:?}", e.passage),
            };
            assert_eq!(e.stance, want, "{}", e.passage);
            assert!(e.passage.contains(&e.topic));
        }
    }

    #[test]
    fn sem16_sizes() {
        let f = sem16_fixture();
        assert_eq!(f.len(), 4771);
        let (train, test) = leave_one_target_out(&f, Sem16Target::DT);
        assert_eq!(test.len(), 608);
        assert_eq!(train.len(), f.len() - 608);
    }

    #[test]
    fn news_has_cross_site_twins() {
        let docs = toy_news_corpus(1, 4);
        assert_eq!(docs.len(), 20 * 4 * 2 + 20 * 2 + 2);
        assert_eq!(docs, toy_news_corpus(1, 4));
    }

    #[test]
    fn word_vectors_cover_topics() {
        let e = toy_word_vectors(1, 16);
        for t in SEEN_TOPICS.iter().chain(&ZERO_SHOT_TOPICS) {
            assert!(crate::eval::topic_vector(t, &e).is_some());
        }
    }
}
