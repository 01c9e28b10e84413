//! Full run on the synthetic corpus: topic-paired data, both pre-training
//! stages, augmentation, then Tata and Baseline training and evaluation.
//!
//! `cargo run --release --example toy_pipeline -- [seed]`

use std::time::Instant;

use tata::augment::mock::MockProviders;
use tata::augment::Providers;
use tata::model::ModelKind;
use tata::pipeline::{pretrain_all, train_and_evaluate, PipelineConfig};
use tata::synthetic::{toy_news_corpus, toy_stance_corpus};
use tata::Result;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let start = Instant::now();
    let corpus = toy_stance_corpus(1);
    let news = toy_news_corpus(1, 4);
    let mock = MockProviders::default();
    let config = PipelineConfig::default().with_seed(seed);

    let pre = pretrain_all(&corpus.train, &corpus.val, &news, Providers::uniform(&mock), &config)?;
    println!(
        "pre-training done in {:.1?}: {} topic pairs, {} augmented rows",
        start.elapsed(),
        pre.taw_train.len() + pre.taw_val.len(),
        pre.augmented.len()
    );
    println!("  triplet validation loss     {:?}", pre.taw_report.val_losses);
    println!("  contrastive validation loss {:?}", pre.tag_report.val_losses);

    for kind in [ModelKind::Tata, ModelKind::Baseline] {
        let out = train_and_evaluate(kind, &pre, &corpus.train, &corpus.val, &corpus.test, &config)?;
        println!("\n{kind} (best epoch {}, stopped early: {})", out.run.best_epoch, out.run.stopped_early);
        println!("{}", out.reports);
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
