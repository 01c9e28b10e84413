//! Scoring: per-class and macro F1, split breakdowns, phenomenon
//! accuracies, the fixed-target score, lexical-similarity correlation and
//! 2-D projections.

pub mod correlation;
pub mod projection;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::data::{split_zero_few, StanceExample, StanceLabel, PHENOMENA};
use crate::error::{Error, Result};
use crate::model::TataModel;

pub use correlation::{
    lexical_similarity_correlation, pearson, student_t_two_tailed, topic_correctness, topic_vector, Correlation,
    WordEmbeddings,
};
pub use projection::{pca_2d, projection_csv, Projection};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold count.
    pub support: usize,
    pub predicted: usize,
    /// Precision or recall had a zero denominator and was set to 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Option<String>,
    pub pro: ClassScore,
    pub against: ClassScore,
    pub neutral: ClassScore,
    /// Unweighted mean of the three per-class F1 values.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub count: usize,
    /// `confusion[gold][pred]` in Pro, Against, Neutral order.
    pub confusion: [[usize; 3]; 3],
}

impl EvalReport {
    pub fn class(&self, label: StanceLabel) -> &ClassScore {
        match label {
            StanceLabel::Pro => &self.pro,
            StanceLabel::Against => &self.against,
            StanceLabel::Neutral => &self.neutral,
        }
    }

    pub fn named(mut self, split: &str) -> Self {
        self.split = Some(split.to_string());
        self
    }

    /// True when any class used the zero convention.
    pub fn has_undefined(&self) -> bool {
        self.pro.undefined || self.against.undefined || self.neutral.undefined
    }

    pub const CSV_HEADER: &'static str = "split,count,f1_pro,f1_against,f1_neutral,f1_all,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.split.as_deref().unwrap_or("all"),
            self.count,
            self.pro.f1,
            self.against.f1,
            self.neutral.f1,
            self.macro_f1,
            self.accuracy
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} n={:<5} Pro {:.3}  Against {:.3}  Neutral {:.3}  All {:.3}{}",
            self.split.as_deref().unwrap_or("all"),
            self.count,
            self.pro.f1,
            self.against.f1,
            self.neutral.f1,
            self.macro_f1,
            if self.has_undefined() { "  (zero-convention applied)" } else { "" }
        )
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Per-class precision, recall and F1 plus their unweighted mean.
pub fn macro_f1(preds: &[StanceLabel], golds: &[StanceLabel]) -> Result<EvalReport> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, g) in preds.iter().zip(golds) {
        confusion[g.index()][p.index()] += 1;
    }
    let score = |c: usize| {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..3).map(|g| confusion[g][c]).sum();
        let (precision, up) = ratio(tp, predicted);
        let (recall, ur) = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScore {
            precision,
            recall,
            f1,
            support,
            predicted,
            undefined: up || ur,
        }
    };
    let (pro, against, neutral) = (score(0), score(1), score(2));
    let correct = (0..3).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        split: None,
        macro_f1: (pro.f1 + against.f1 + neutral.f1) / 3.0,
        accuracy: ratio(correct, golds.len()).0,
        pro,
        against,
        neutral,
        count: golds.len(),
        confusion,
    })
}

/// Mean of the Pro and Against F1; Neutral stays in the confusion matrix.
pub fn sem16_score(preds: &[StanceLabel], golds: &[StanceLabel]) -> Result<f64> {
    let r = macro_f1(preds, golds)?;
    Ok((r.pro.f1 + r.against.f1) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReports {
    pub zero: EvalReport,
    pub few: EvalReport,
    pub all: EvalReport,
    pub zero_topics: usize,
    pub few_topics: usize,
}

impl fmt::Display for SplitReports {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}  ({} topics)", self.zero, self.zero_topics)?;
        writeln!(f, "{}  ({} topics)", self.few, self.few_topics)?;
        write!(f, "{}", self.all)
    }
}

/// Zero-shot, few-shot and overall reports from precomputed predictions.
pub fn split_reports(examples: &[StanceExample], preds: &[StanceLabel]) -> Result<SplitReports> {
    if examples.len() != preds.len() {
        return Err(Error::Input("predictions do not align with examples".into()));
    }
    let golds: Vec<_> = examples.iter().map(|e| e.stance).collect();
    let pick = |seen: bool| -> (Vec<StanceLabel>, Vec<StanceLabel>) {
        examples
            .iter()
            .zip(preds)
            .filter(|(e, _)| e.seen == seen)
            .map(|(e, p)| (*p, e.stance))
            .unzip()
    };
    let (zp, zg) = pick(false);
    let (fp, fg) = pick(true);
    let split = split_zero_few(examples);
    Ok(SplitReports {
        zero: macro_f1(&zp, &zg)?.named("zero"),
        few: macro_f1(&fp, &fg)?.named("few"),
        all: macro_f1(preds, &golds)?.named("all"),
        zero_topics: split.zero_topics,
        few_topics: split.few_topics,
    })
}

/// Runs `model` over `test` and reports each split.
pub fn evaluate_splits(model: &TataModel, test: &[StanceExample]) -> Result<SplitReports> {
    let preds = predict_examples(model, test)?;
    split_reports(test, &preds)
}

pub fn predict_examples(model: &TataModel, examples: &[StanceExample]) -> Result<Vec<StanceLabel>> {
    let pairs: Vec<(&str, &str)> = examples.iter().map(|e| (e.passage.as_str(), e.topic.as_str())).collect();
    model.predict_batch(&pairs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Cell {
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PhenomenaReport {
    pub cells: BTreeMap<String, Cell>,
}

impl fmt::Display for PhenomenaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, c) in &self.cells {
            if c.n == 0 {
                writeln!(f, "{name:<5} n=0     acc -")?;
            } else {
                writeln!(f, "{name:<5} n={:<5} acc {:.3}", c.n, c.accuracy)?;
            }
        }
        Ok(())
    }
}

/// Accuracy over the examples carrying each flag; an example counts
/// toward every flag it has. The five standard flags are always present.
pub fn phenomena_accuracy(
    preds: &[StanceLabel],
    golds: &[StanceLabel],
    flags: &[BTreeSet<String>],
) -> Result<PhenomenaReport> {
    if preds.len() != golds.len() || flags.len() != golds.len() {
        return Err(Error::Input("predictions, labels and flags must align".into()));
    }
    let mut tally: BTreeMap<String, (usize, usize)> = PHENOMENA.iter().map(|p| (p.to_string(), (0, 0))).collect();
    for ((p, g), fl) in preds.iter().zip(golds).zip(flags) {
        for name in fl {
            let t = tally.entry(name.clone()).or_default();
            t.1 += 1;
            if p == g {
                t.0 += 1;
            }
        }
    }
    Ok(PhenomenaReport {
        cells: tally
            .into_iter()
            .map(|(k, (c, n))| (k, Cell { accuracy: ratio(c, n).0, n }))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use StanceLabel::*;

    #[test]
    fn macro_f1_hand_case() {
        let r = macro_f1(&[Pro, Against, Against, Neutral], &[Pro, Pro, Against, Neutral]).unwrap();
        assert!((r.pro.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.against.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.neutral.f1, 1.0);
        assert!((r.macro_f1 - 7.0 / 9.0).abs() < 1e-12);
        assert!(!r.has_undefined());
    }

    #[test]
    fn perfect_and_absent_classes() {
        let g = [Pro, Against, Neutral, Pro];
        let r = macro_f1(&g, &g).unwrap();
        assert_eq!((r.pro.f1, r.against.f1, r.neutral.f1, r.macro_f1), (1.0, 1.0, 1.0, 1.0));
        let r = macro_f1(&[Pro, Against], &[Pro, Against]).unwrap();
        assert_eq!(r.neutral.f1, 0.0);
        assert!(r.neutral.undefined);
        assert!(macro_f1(&[Pro], &[]).is_err());
        let empty = macro_f1(&[], &[]).unwrap();
        assert_eq!(empty.count, 0);
    }

    #[test]
    fn sem16_cases() {
        let g = [Pro, Against, Neutral, Pro, Against, Neutral];
        assert_eq!(sem16_score(&g, &g).unwrap(), 1.0);
        assert_eq!(sem16_score(&[Neutral; 6], &g).unwrap(), 0.0);
        // Pro and Against both P=1/2 R=1/2.
        let p = [Pro, Neutral, Neutral, Against, Against, Pro];
        let want = 0.5;
        assert!((sem16_score(&p, &g).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn phenomena_hand_case() {
        let f = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        let flags = [f(&["Qte"]), f(&["Qte", "Sarc"]), f(&["Sarc"]), f(&[])];
        let golds = [Pro, Against, Neutral, Pro];
        let preds = [Pro, Pro, Neutral, Against];
        let r = phenomena_accuracy(&preds, &golds, &flags).unwrap();
        assert_eq!(r.cells["Qte"], Cell { accuracy: 0.5, n: 2 });
        assert_eq!(r.cells["Sarc"], Cell { accuracy: 0.5, n: 2 });
        assert_eq!(r.cells["Imp"], Cell { accuracy: 0.0, n: 0 });
        let r = phenomena_accuracy(&golds, &golds, &flags).unwrap();
        assert!(r.cells.values().filter(|c| c.n > 0).all(|c| c.accuracy == 1.0));
    }

    fn label() -> impl Strategy<Value = StanceLabel> {
        (0usize..3).prop_map(|i| StanceLabel::from_index(i).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn macro_f1_bounds_and_permutation(
            (pairs, perm) in prop::collection::vec((label(), label()), 1..40)
                .prop_flat_map(|v| { let n = v.len(); (Just(v), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) })
        ) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let r = macro_f1(&p, &g).unwrap();
            for c in [r.pro, r.against, r.neutral] {
                prop_assert!((0.0..=1.0).contains(&c.f1));
            }
            prop_assert!((r.macro_f1 - (r.pro.f1 + r.against.f1 + r.neutral.f1) / 3.0).abs() < 1e-12);
            let pp: Vec<_> = perm.iter().map(|&i| p[i]).collect();
            let gp: Vec<_> = perm.iter().map(|&i| g[i]).collect();
            let r2 = macro_f1(&pp, &gp).unwrap();
            prop_assert_eq!(r.macro_f1, r2.macro_f1);
        }
    }
}
