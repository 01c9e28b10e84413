//! File-based provider exchange: the builder writes requests, an external
//! service (here the mock) answers them, and the build is rerun until
//! nothing is pending.

use tata::augment::mock::MockProviders;
use tata::augment::protocol::{read_requests, run_rounds, REQUESTS_FILE};
use tata::augment::{build_taw_dataset, Providers, TawBuildConfig};
use tata::synthetic::toy_news_corpus;
use tata::Result;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let news = toy_news_corpus(2, 2);
    let mock = MockProviders::default();
    let config = TawBuildConfig::default();

    let ((quads, report), rounds) = run_rounds(dir.path(), &mock, 10, |client| {
        build_taw_dataset(&news, Providers::uniform(client), &config)
    })?;
    let requests = read_requests(&dir.path().join(REQUESTS_FILE))?;
    println!("{} quadruplets after {rounds} rounds ({} requests in the last round file)", quads.len(), requests.len());
    if let Some(r) = requests.first() {
        println!("sample request: {}", serde_json::to_string(r)?);
    }

    let (direct, _) = build_taw_dataset(&news, Providers::uniform(&mock), &config)?;
    println!("same as in-process mock: {}", direct == quads);
    println!("{report:?}");
    Ok(())
}
