//! Expand stance examples with every combination of passage and topic
//! paraphrase.

use tata::augment::mock::MockProviders;
use tata::augment::{augment_vast, AugmentConfig, Providers};
use tata::data::{StanceExample, StanceLabel};

fn main() {
    let train = vec![
        StanceExample::new("a1", "Residents welcome new bike lanes on main street .", "bike lanes", StanceLabel::Pro),
        StanceExample::new("a2", "Drivers oppose the toll roads plan .", "toll roads", StanceLabel::Against),
    ];
    let mock = MockProviders::default();
    let config = AugmentConfig {
        max_passage_paraphrases: 3,
        max_topic_paraphrases: 2,
    };
    let (rows, stats) = augment_vast(&train, Providers::uniform(&mock), &config);
    println!("{} examples -> {} rows", stats.inputs, stats.outputs);
    println!("{stats:#?}");
    for r in rows.iter().filter(|r| r.id.starts_with("a1")) {
        println!("{:<12} [{}] {}", r.id, r.topic, r.passage);
    }
}
