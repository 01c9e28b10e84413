//! Project contrastively trained [CLS] vectors to two dimensions and write
//! a CSV for plotting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tata::encoder::{Encoder, Vocabulary};
use tata::eval::{pca_2d, projection_csv};
use tata::synthetic::{toy_encoder_config, toy_stance_corpus};
use tata::tensor::Tensor;
use tata::training::{pretrain_tag, TrainConfig};
use tata::Result;

fn main() -> Result<()> {
    let corpus = toy_stance_corpus(0);
    let vocab = Vocabulary::build(corpus.all().flat_map(|e| [e.passage.as_str(), e.topic.as_str()]), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = Encoder::new(toy_encoder_config(), vocab, &mut rng)?;
    let config = TrainConfig::toy();
    let (tag, report) = pretrain_tag(encoder, &corpus.train, &corpus.val, &config)?;
    println!("contrastive validation loss {:?}", report.val_losses);

    let seqs = corpus
        .test
        .iter()
        .map(|e| tag.format_pair(&e.passage, &e.topic))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = tag.features(&seqs)?.into_iter().map(|(_, cls)| cls.into_data()).collect();
    let proj = pca_2d(&Tensor::from_rows(&rows)?)?;
    println!("top two variances {:.4} {:.4}", proj.eigenvalues[0], proj.eigenvalues[1]);
    let labels: Vec<String> = corpus.test.iter().map(|e| e.stance.name().to_string()).collect();
    let csv = projection_csv(&proj, &labels)?;
    let path = std::env::temp_dir().join("tata_projection.csv");
    std::fs::write(&path, &csv)?;
    println!("wrote {} rows to {}", labels.len(), path.display());
    Ok(())
}
