//! Word-vector topic similarity against per-topic correctness.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::data::{StanceExample, StanceLabel};
use crate::encoder::split_words;
use crate::error::{Error, Result};

/// Token → vector table read from whitespace-separated text lines
/// (`token v1 v2 ...`).
#[derive(Debug, Clone, Default)]
pub struct WordEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl WordEmbeddings {
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut e = Self::default();
        for (t, v) in pairs {
            e.insert(t.into(), v)?;
        }
        Ok(e)
    }

    fn insert(&mut self, token: String, v: Vec<f64>) -> Result<()> {
        if self.table.is_empty() {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(Error::Input(format!(
                "vector for {token:?} has {} dims, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.table.insert(token, v);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Self::default();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let v = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|err| Error::Input(format!("line {}: {err}", i + 1)))?;
            e.insert(tok.to_string(), v)?;
        }
        Ok(e)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.table.get(token).map(Vec::as_slice)
    }
}

/// Mean of the in-vocabulary token vectors; `None` if every token is unknown.
pub fn topic_vector(topic: &str, emb: &WordEmbeddings) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; emb.dim()];
    let mut n = 0;
    for w in split_words(topic) {
        if let Some(v) = emb.get(&w) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pearson correlation; `None` when either variable has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn t_pdf(x: f64, dof: f64) -> f64 {
    let c = ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * std::f64::consts::PI).ln();
    (c - (dof + 1.0) / 2.0 * (x * x / dof).ln_1p()).exp()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    adaptive(f, a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), eps, 48)
}

/// Two-tailed p-value of `t` under Student's t with `dof` degrees of freedom,
/// by adaptive Simpson integration of the density.
pub fn student_t_two_tailed(t: f64, dof: f64) -> f64 {
    let a = t.abs();
    if a.is_infinite() {
        return 0.0;
    }
    if a <= 1.0 {
        let inner = integrate(&|x| t_pdf(x, dof), 0.0, a, 1e-15);
        (1.0 - 2.0 * inner).clamp(0.0, 1.0)
    } else {
        // Tail ∫_a^∞ pdf(x) dx with x = 1/u.
        let g = |u: f64| if u == 0.0 { tail_limit(dof) } else { t_pdf(1.0 / u, dof) / (u * u) };
        (2.0 * integrate(&g, 0.0, 1.0 / a, 1e-16)).clamp(0.0, 1.0)
    }
}

// pdf(1/u)/u² as u → 0: finite only for dof = 1.
fn tail_limit(dof: f64) -> f64 {
    if dof == 1.0 {
        1.0 / std::f64::consts::PI
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Correlation {
    pub n: usize,
    /// `None` when either variable is constant.
    pub r: Option<f64>,
    pub p: Option<f64>,
    /// Topics dropped because no token had a vector.
    pub excluded: usize,
    /// `(near-train-topic count, correctness rate)` per kept topic.
    pub points: Vec<(f64, f64)>,
}

/// Correlates, per test topic, the number of training topics with cosine
/// above `threshold` against the fraction of that topic's examples
/// predicted correctly.
pub fn lexical_similarity_correlation(
    test_topics: &[(String, f64)],
    train_topics: &[String],
    emb: &WordEmbeddings,
    threshold: f64,
) -> Result<Correlation> {
    let train: Vec<Vec<f64>> = train_topics.iter().filter_map(|t| topic_vector(t, emb)).collect();
    let mut out = Correlation::default();
    for (topic, rate) in test_topics {
        let Some(v) = topic_vector(topic, emb) else {
            out.excluded += 1;
            continue;
        };
        let near = train.iter().filter(|u| cosine(&v, u) > threshold).count();
        out.points.push((near as f64, *rate));
    }
    if out.excluded > 0 {
        log::info!("{} topics had no in-vocabulary tokens and were excluded", out.excluded);
    }
    out.n = out.points.len();
    if out.n < 3 {
        return Err(Error::Input(format!("correlation needs at least 3 topics with vectors, got {}", out.n)));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = out.points.iter().cloned().unzip();
    out.r = pearson(&x, &y);
    out.p = out.r.map(|r| {
        let dof = (out.n - 2) as f64;
        if r.abs() >= 1.0 {
            0.0
        } else {
            student_t_two_tailed(r * (dof / (1.0 - r * r)).sqrt(), dof)
        }
    });
    Ok(out)
}

/// Fraction of each topic's examples predicted correctly, in first-seen order.
pub fn topic_correctness(examples: &[StanceExample], preds: &[StanceLabel]) -> Vec<(String, f64)> {
    let mut order = Vec::new();
    let mut tally: HashMap<&str, (usize, usize)> = HashMap::new();
    for (e, p) in examples.iter().zip(preds) {
        let t = tally.entry(&e.topic).or_insert_with(|| {
            order.push(e.topic.clone());
            (0, 0)
        });
        t.1 += 1;
        if *p == e.stance {
            t.0 += 1;
        }
    }
    order
        .into_iter()
        .map(|t| {
            let (c, n) = tally[t.as_str()];
            (t, c as f64 / n as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn brute_r(x: &[f64], y: &[f64]) -> f64 {
        // Covariance as a double sum over pairs.
        let n = x.len();
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                sxy += (x[i] - x[j]) * (y[i] - y[j]);
                sxx += (x[i] - x[j]).powi(2);
                syy += (y[i] - y[j]).powi(2);
            }
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y = [2.0, 1.0, 4.0, 3.0, 7.0];
        // Σdxdy = 12, Σdx² = 10, Σdy² = 21.2
        let hand = 12.0 / (10.0f64 * 21.2).sqrt();
        assert!((pearson(&x, &y).unwrap() - hand).abs() < 1e-12);
        assert!((pearson(&x, &y).unwrap() - brute_r(&x, &y)).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 5]), None);
    }

    #[test]
    fn t_tail_matches_reference_cdf() {
        for &dof in &[1.0, 2.0, 3.0, 8.0, 30.0, 150.0] {
            let d = StudentsT::new(0.0, 1.0, dof).unwrap();
            for &t in &[0.0, 0.3, 1.0, 1.7, 2.5, 4.0, 9.0, 40.0] {
                let want = 2.0 * (1.0 - d.cdf(t));
                let want = if want < 1e-8 { 2.0 * d.cdf(-t) } else { want };
                let got = student_t_two_tailed(t, dof);
                assert!((got - want).abs() < 1e-10 * want.max(1e-3), "dof {dof} t {t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn topic_vectors() {
        let e = WordEmbeddings::parse("tax 1 0\nrich 0 2\n").unwrap();
        assert_eq!(topic_vector("tax", &e).unwrap(), vec![1.0, 0.0]);
        assert_eq!(topic_vector("Tax the rich", &e).unwrap(), vec![0.5, 1.0]);
        assert!(topic_vector("nothing here", &e).is_none());
        assert!(WordEmbeddings::parse("a 1 2\nb 1\n").is_err());
    }

    #[test]
    fn correlation_end_to_end() {
        let e = WordEmbeddings::parse("a 1 0\nb 0 1\nc 1 1\nd -1 0\n").unwrap();
        let train = vec!["a".to_string(), "a".into(), "b".into(), "c".into()];
        let test = vec![
            ("a".to_string(), 0.9),
            ("b".to_string(), 0.5),
            ("d".to_string(), 0.2),
            ("zzz".to_string(), 0.4),
        ];
        let c = lexical_similarity_correlation(&test, &train, &e, 0.9).unwrap();
        assert_eq!(c.excluded, 1);
        assert_eq!(c.points, vec![(2.0, 0.9), (1.0, 0.5), (0.0, 0.2)]);
        let r = c.r.unwrap();
        assert!((r - brute_r(&[2.0, 1.0, 0.0], &[0.9, 0.5, 0.2])).abs() < 1e-12);
        assert!(c.p.unwrap() > 0.0 && c.p.unwrap() < 1.0);
    }

    #[test]
    fn correctness_rates() {
        let mk = |t: &str, s| StanceExample::new("x", "p", t, s);
        let ex = [mk("a", StanceLabel::Pro), mk("b", StanceLabel::Pro), mk("a", StanceLabel::Against)];
        let r = topic_correctness(&ex, &[StanceLabel::Pro, StanceLabel::Against, StanceLabel::Pro]);
        assert_eq!(r, vec![("a".to_string(), 0.5), ("b".to_string(), 0.0)]);
    }

    proptest! {
        #[test]
        fn pearson_properties(
            xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            a in 0.1f64..5.0, b in -5.0f64..5.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            if let Some(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - brute_r(&x, &y)).abs() < 1e-9);
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
            }
        }
    }
}
