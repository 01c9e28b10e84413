//! Build topic-paired quadruplets from a synthetic news corpus using the
//! mock providers, and check the record constraints.

use std::collections::HashMap;

use tata::augment::mock::MockProviders;
use tata::augment::{build_taw_dataset, split_taw, Providers, TawBuildConfig};
use tata::synthetic::toy_news_corpus;
use tata::Result;

fn main() -> Result<()> {
    let news = toy_news_corpus(1, 4);
    let mock = MockProviders::default();
    let config = TawBuildConfig::default();
    let (quads, report) = build_taw_dataset(&news, Providers::uniform(&mock), &config)?;
    println!("{} documents -> {} quadruplets", news.len(), quads.len());
    println!("{report:#?}");

    let mut per_topic: HashMap<&str, usize> = HashMap::new();
    for q in &quads {
        *per_topic.entry(q.topic.as_str()).or_default() += 1;
    }
    let worst_sim = quads.iter().map(|q| q.similarity).fold(f64::INFINITY, f64::min);
    println!("max per topic {}", per_topic.values().max().unwrap_or(&0));
    println!("min similarity {worst_sim:.3}");
    println!("all cross-site: {}", quads.iter().all(|q| q.site_p != q.site_q));

    if let Some(q) = quads.first() {
        println!("\nexample:\n  topic      {}\n  paraphrase {}\n  passage    {}\n  similar    {}", q.topic, q.topic_paraphrase, q.passage, q.similar_passage);
    }
    let (train, val) = split_taw(quads, 0.2, 0)?;
    println!("\nsplit: {} train / {} validation", train.len(), val.len());
    Ok(())
}
