//! Tokenize a passage/topic pair and run the transformer encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tata::encoder::{Encoder, Vocabulary};
use tata::synthetic::toy_encoder_config;
use tata::Result;

fn main() -> Result<()> {
    let passage = "We strongly support wind farms near the coast.";
    let topic = "wind farms";
    let vocab = Vocabulary::build([passage, topic], 1);
    println!("vocabulary: {} tokens", vocab.len());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = Encoder::new(toy_encoder_config(), vocab, &mut rng)?;
    let ids = encoder.format_pair(passage, topic)?;
    let words: Vec<&str> = ids.iter().filter_map(|&i| encoder.vocab().token(i)).collect();
    println!("input: {}", words.join(" "));

    let (tokens, cls) = encoder.features(&[ids])?.remove(0);
    println!("token states {:?}, [CLS] {:?}", tokens.shape(), cls.shape());
    println!("[CLS] head: {:?}", &cls.data()[..4]);
    Ok(())
}
