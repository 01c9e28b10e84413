//! Attention fusion on its own, then a full forward pass of every model
//! variant on a tiny batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tata::encoder::{Encoder, Vocabulary};
use tata::model::{topic_attention, HeadConfig, ModelKind, TataModel};
use tata::synthetic::toy_encoder_config;
use tata::tensor::{Tape, Tensor};
use tata::Result;

fn main() -> Result<()> {
    let tokens = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let query = Tensor::vector(vec![1.0, 1.0]);
    let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]])?;
    let (fused, weights) = topic_attention(&tokens, &query, &w)?;
    println!("attention weights {:?} -> fused {:?}", weights.data(), fused.data());

    let pairs = [
        ("we support bike lanes downtown .", "bike lanes"),
        ("critics oppose new toll roads .", "toll roads"),
    ];
    let vocab = Vocabulary::build(pairs.iter().flat_map(|(p, t)| [*p, *t]), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = toy_encoder_config();
    let base = Encoder::new(cfg.clone(), vocab, &mut rng)?;
    for kind in ModelKind::ALL {
        let model = TataModel::new(
            kind,
            base.clone(),
            Some(base.clone()),
            Some(base.clone()),
            HeadConfig::default(),
            &mut rng,
        )?;
        let feats = model.prepare(&pairs)?;
        let tape = Tape::new();
        let out = model.forward(&tape, &feats.iter().collect::<Vec<_>>(), false, &mut rng)?;
        println!(
            "{:<9} head input {:>3}  probs {:?}",
            kind.name(),
            model.head_input_dim(),
            out.probs.value().row(0)
        );
    }
    Ok(())
}
