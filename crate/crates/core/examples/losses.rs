//! Triplet, contrastive and cross-entropy losses on small hand-built batches.

use tata::losses::{cross_entropy_loss, supervised_contrastive_loss, triplet_taw_loss};
use tata::tensor::{Tape, Tensor};
use tata::Result;

fn main() -> Result<()> {
    let tape = Tape::new();
    let anchors = tape.var(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]])?);
    let positives = tape.var(Tensor::from_rows(&[vec![1.0, 0.2], vec![0.0, 0.1]])?);
    let triplet = triplet_taw_loss(&anchors, &positives, 0.5)?;
    println!("triplet loss (margin 0.5): {:.6}", triplet.item());
    let grads = tape.backward(triplet)?;
    println!("d/d anchors: {:?}", grads.get(anchors).map(|g| g.into_data()));

    let tape = Tape::new();
    let h = tape.var(Tensor::from_rows(&[
        vec![1.0, 0.1],
        vec![0.9, 0.2],
        vec![-0.1, 1.0],
        vec![0.0, 0.8],
    ])?);
    let con = supervised_contrastive_loss(&h, &["pro", "pro", "con", "con"], 0.07)?;
    println!("contrastive loss (tau 0.07): {:.6}", con.loss.item());
    let lonely = supervised_contrastive_loss(&h, &["a", "b", "c", "d"], 0.07)?;
    println!("all-distinct labels: loss {} skipped {} degenerate {}", lonely.loss.item(), lonely.skipped, lonely.degenerate);

    let tape = Tape::new();
    let probs = tape.var(Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8]])?);
    println!("cross-entropy: {:.6}", cross_entropy_loss(&probs, &[0, 2])?.item());
    Ok(())
}
