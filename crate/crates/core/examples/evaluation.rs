//! Scoring utilities: macro-F1, the two-class average, phenomenon
//! accuracy, leave-one-target-out splits and the similarity correlation.

use std::collections::BTreeSet;

use tata::data::{leave_one_target_out, Sem16Target, StanceLabel::*};
use tata::eval::{lexical_similarity_correlation, macro_f1, phenomena_accuracy, sem16_score};
use tata::synthetic::{sem16_fixture, toy_word_vectors};
use tata::Result;

fn main() -> Result<()> {
    let golds = [Pro, Pro, Against, Against, Neutral, Neutral, Pro];
    let preds = [Pro, Against, Against, Against, Neutral, Pro, Pro];
    let report = macro_f1(&preds, &golds)?;
    println!("{report}");
    println!("Pro/Against average: {:.4}", sem16_score(&preds, &golds)?);

    let flags: Vec<BTreeSet<String>> = (0..golds.len())
        .map(|i| {
            let mut f = BTreeSet::new();
            if i % 2 == 0 {
                f.insert("Sarc".to_string());
            }
            if i % 3 == 0 {
                f.insert("Qte".to_string());
            }
            f
        })
        .collect();
    print!("{}", phenomena_accuracy(&preds, &golds, &flags)?);

    let records = sem16_fixture();
    for target in Sem16Target::ALL {
        let (train, test) = leave_one_target_out(&records, target);
        println!("held out {:<32} train {:>5} test {:>4}", target.topic(), train.len(), test.len());
    }

    let emb = toy_word_vectors(0, 16);
    let train_topics: Vec<String> = ["solar power", "wind power", "nuclear energy", "school uniforms"]
        .map(String::from)
        .to_vec();
    let test_rates = vec![
        ("wind farms".to_string(), 0.9),
        ("solar panels".to_string(), 0.8),
        ("city parks".to_string(), 0.4),
        ("rent control".to_string(), 0.3),
    ];
    let c = lexical_similarity_correlation(&test_rates, &train_topics, &emb, 0.3)?;
    println!("correlation over {} topics: r={:?} p={:?}", c.n, c.r, c.p);
    Ok(())
}
