//! Save a model, load it back and confirm parameters and predictions match.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tata::encoder::{Encoder, Vocabulary};
use tata::model::{HeadConfig, ModelKind, TataModel};
use tata::synthetic::{toy_encoder_config, toy_stance_corpus};
use tata::tensor::Module;
use tata::Result;

fn main() -> Result<()> {
    let corpus = toy_stance_corpus(0);
    let vocab = Vocabulary::build(corpus.all().flat_map(|e| [e.passage.as_str(), e.topic.as_str()]), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = Encoder::new(toy_encoder_config(), vocab, &mut rng)?;
    let model = TataModel::new(
        ModelKind::Tata,
        base.clone(),
        Some(base.clone()),
        Some(base),
        HeadConfig::default(),
        &mut rng,
    )?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    model.save(&path)?;
    let loaded = TataModel::load(&path)?;
    println!("{} bytes on disk", std::fs::metadata(&path)?.len());

    let mut same = true;
    let mut a = Vec::new();
    let mut b = Vec::new();
    model.visit_params("", &mut |name, p| a.push((name.to_string(), p.value().clone())));
    loaded.visit_params("", &mut |name, p| b.push((name.to_string(), p.value().clone())));
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        same &= na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    println!("{} parameter tensors, bitwise equal: {}", a.len(), same && a.len() == b.len());

    let pairs: Vec<(&str, &str)> = corpus.test.iter().map(|e| (e.passage.as_str(), e.topic.as_str())).collect();
    println!("predictions equal: {}", model.predict_batch(&pairs)? == loaded.predict_batch(&pairs)?);
    Ok(())
}
