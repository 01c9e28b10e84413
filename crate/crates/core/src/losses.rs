//! Pre-training objectives and the classification loss.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Probability floor applied before taking logs in [`cross_entropy_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Batch-level triplet loss over paired passages.
///
/// Row `i` of `anchors` is positive with row `i` of `positives`; every other
/// row of `positives` is a negative for it. With squared Euclidean
/// distances `d`:
///
/// `L = (1/N) Σ_i Σ_{k≠i} max(0, margin + d(p_i, q_i) − d(p_i, q_k))`
pub fn triplet_taw_loss<'t>(anchors: &Var<'t>, positives: &Var<'t>, margin: f64) -> Result<Var<'t>> {
    let (a, p) = (anchors.shape(), positives.shape());
    if a.len() != 2 || a != p {
        return Err(Error::Batch(format!(
            "anchor/positive shapes differ: {a:?} vs {p:?}"
        )));
    }
    let n = a[0];
    if n < 2 {
        return Err(Error::Batch(format!("triplet loss needs at least 2 pairs, got {n}")));
    }
    if margin < 0.0 || !margin.is_finite() {
        return Err(Error::Config(format!("margin {margin} must be non-negative")));
    }
    let tape = anchors.tape();
    let dist = anchors.pairwise_sq_dist(positives)?;
    let pos = dist.diag()?;
    let hinge = dist.neg()?.add_col(&pos)?.add_scalar(margin)?.relu()?;
    let off_diag = tape.constant(off_diagonal(n));
    Ok(hinge.mul(&off_diag)?.sum()?.scale(1.0 / n as f64)?)
}

/// Result of [`supervised_contrastive_loss`].
#[derive(Debug)]
pub struct ContrastiveLoss<'t> {
    pub loss: Var<'t>,
    /// Anchors with no same-label partner in the batch.
    pub skipped: usize,
    /// Every anchor was skipped; the loss is the constant 0.
    pub degenerate: bool,
}

/// Supervised contrastive loss on cosine similarities at temperature `tau`.
///
/// For anchor `i` with at least one same-label partner,
/// `l_i = log( Σ_{j≠i, y_j=y_i} exp(cos_ij/τ) / Σ_{j≠i} exp(cos_ij/τ) )`;
/// the loss is `−mean(l_i)` over those anchors.
pub fn supervised_contrastive_loss<'t, L: PartialEq>(
    hiddens: &Var<'t>,
    labels: &[L],
    tau: f64,
) -> Result<ContrastiveLoss<'t>> {
    let shape = hiddens.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Batch(format!(
            "hiddens {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Batch(format!("contrastive loss needs at least 2 rows, got {n}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let tape = hiddens.tape();
    let mut positive = Tensor::zeros([n, n]);
    let mut anchor = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                positive.set(&[i, j], 1.0);
                anchor[i] = 1.0;
            }
        }
    }
    let kept = anchor.iter().filter(|&&a| a != 0.0).count();
    if kept == 0 {
        log::warn!("contrastive batch of {n} has no positive pairs; loss set to 0");
        return Ok(ContrastiveLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            skipped: n,
            degenerate: true,
        });
    }
    let unit = hiddens.mul_col(&hiddens.l2_norm_last()?.recip()?)?;
    let cos = unit.matmul(&unit.transpose()?)?;
    // exp((cos − 1)/τ) keeps every term ≤ 1; the shift cancels in the ratio.
    let e = cos.add_scalar(-1.0)?.scale(1.0 / tau)?.exp()?;
    let num = e.mul(&tape.constant(positive))?.sum_last()?;
    let den = e.mul(&tape.constant(off_diagonal(n)))?.sum_last()?;
    let per_anchor = num
        .ln_floor(f64::MIN_POSITIVE)?
        .sub(&den.ln_floor(f64::MIN_POSITIVE)?)?;
    let loss = per_anchor
        .dot(&tape.constant(Tensor::vector(anchor)))?
        .scale(-1.0 / kept as f64)?;
    Ok(ContrastiveLoss {
        loss,
        skipped: n - kept,
        degenerate: false,
    })
}

/// Mean negative log-probability of the gold class; `probs` is `[B×3]`.
pub fn cross_entropy_loss<'t>(probs: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != 3 {
        return Err(Error::Batch(format!(
            "probabilities {shape:?} do not match {} labels over 3 classes",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 2) {
        return Err(Error::Input(format!("label {bad} outside {{0, 1, 2}}")));
    }
    Ok(probs.pick(labels)?.ln_floor(PROB_FLOOR)?.mean()?.neg()?)
}

fn off_diagonal(n: usize) -> Tensor {
    let mut t = Tensor::ones([n, n]);
    for i in 0..n {
        t.set(&[i, i], 0.0);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many, Tape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows<'t>(t: &'t Tape, r: &[Vec<f64>]) -> Var<'t> {
        t.var(Tensor::from_rows(r).unwrap())
    }

    // Naive per-pair oracles.
    fn triplet_oracle(p: &[Vec<f64>], q: &[Vec<f64>], margin: f64) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let n = p.len();
        let mut total = 0.0;
        for i in 0..n {
            for k in 0..n {
                if k != i {
                    total += (margin + d(&p[i], &q[i]) - d(&p[i], &q[k])).max(0.0);
                }
            }
        }
        total / n as f64
    }

    fn supcon_oracle(h: &[Vec<f64>], y: &[u8], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..h.len() {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut any = false;
            for j in 0..h.len() {
                if j == i {
                    continue;
                }
                let e = (cos(&h[i], &h[j]) / tau).exp();
                den += e;
                if y[i] == y[j] {
                    num += e;
                    any = true;
                }
            }
            if any {
                sum += (num / den).ln();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            -sum / count as f64
        }
    }

    #[test]
    fn triplet_hand_cases() {
        let t = Tape::new();
        let l = triplet_taw_loss(&rows(&t, &[vec![0.0], vec![10.0]]), &rows(&t, &[vec![1.0], vec![9.0]]), 0.0)
            .unwrap();
        assert_eq!(l.item(), 0.0);
        let l = triplet_taw_loss(&rows(&t, &[vec![0.0], vec![10.0]]), &rows(&t, &[vec![1.0], vec![0.5]]), 0.0)
            .unwrap();
        // (0.75 + 9.25) / 2
        assert!((l.item() - 5.0).abs() < 1e-15);
        let same = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0]];
        let l = triplet_taw_loss(&rows(&t, &same), &rows(&t, &same), 0.0).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn triplet_rejects_single_pair() {
        let t = Tape::new();
        let r = triplet_taw_loss(&rows(&t, &[vec![0.0]]), &rows(&t, &[vec![1.0]]), 0.0);
        assert!(matches!(r, Err(Error::Batch(_))));
    }

    #[test]
    fn supcon_hand_cases() {
        let t = Tape::new();
        let h = rows(&t, &[vec![1.0, 0.3], vec![-0.2, 2.0]]);
        let out = supervised_contrastive_loss(&h, &[1, 1], 0.07).unwrap();
        assert!(out.loss.item().abs() < 1e-15);

        let h = rows(&t, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let out = supervised_contrastive_loss(&h, &["pro", "pro", "against"], 0.07).unwrap();
        assert!((out.loss.item() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.skipped, 1);
        assert!(!out.degenerate);
    }

    #[test]
    fn supcon_all_distinct_labels_is_degenerate_zero() {
        let t = Tape::new();
        let h = rows(&t, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let out = supervised_contrastive_loss(&h, &[0, 1, 2], 0.07).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.loss.item(), 0.0);
        assert!(supervised_contrastive_loss(&h, &[0, 1, 2], 0.0).is_err());
    }

    #[test]
    fn supcon_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::randn([6, 4], 1.0, &mut rng);
        let y = [0, 1, 0, 2, 1, 2];
        let t = Tape::new();
        let a = supervised_contrastive_loss(&t.constant(h.clone()), &y, 0.5).unwrap().loss.item();
        let b = supervised_contrastive_loss(&t.constant(h).scale(5.0).unwrap(), &y, 0.5)
            .unwrap()
            .loss
            .item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn supcon_large_temperature_approaches_count_baseline() {
        // cos/τ → 0, so each ratio → n_pos/(N−1).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::randn([6, 5], 1.0, &mut rng);
        let y = [0, 0, 0, 1, 1, 2];
        let t = Tape::new();
        let l = supervised_contrastive_loss(&t.constant(h), &y, 1e3).unwrap().loss.item();
        let counts = [2.0f64, 2.0, 2.0, 1.0, 1.0];
        let baseline = counts.iter().map(|c| (5.0 / c).ln()).sum::<f64>() / 5.0;
        assert!((l - baseline).abs() < 1e-3, "{l} vs {baseline}");
    }

    #[test]
    fn cross_entropy_cases() {
        let t = Tape::new();
        let one_hot = t.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        assert_eq!(cross_entropy_loss(&one_hot, &[0, 2]).unwrap().item(), 0.0);
        let u = t.constant(Tensor::full([2, 3], 1.0 / 3.0));
        assert!((cross_entropy_loss(&u, &[1, 2]).unwrap().item() - 3f64.ln()).abs() < 1e-15);
        assert!(matches!(cross_entropy_loss(&u, &[1, 3]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_through_softmax_gradient_is_probs_minus_onehot() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.0, 0.5, -0.5]]).unwrap();
        let labels = [2usize, 0];
        let tape = Tape::new();
        let x = tape.var(logits.clone());
        let probs = x.softmax(1).unwrap();
        let loss = cross_entropy_loss(&probs, &labels).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        let p = probs.value();
        for b in 0..2 {
            for c in 0..3 {
                let onehot = if labels[b] == c { 1.0 } else { 0.0 };
                let want = (p.get(&[b, c]) - onehot) / 2.0;
                assert!((g.get(&[b, c]) - want).abs() < 1e-14);
            }
        }
        let err = grad_check(
            |_, v| cross_entropy_loss(&v.softmax(1)?, &labels),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn loss_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let p = Tensor::randn([5, 4], 1.0, &mut rng);
            let q = Tensor::randn([5, 4], 1.0, &mut rng);
            let err = grad_check_many(|_, v| triplet_taw_loss(&v[0], &v[1], 0.5), &[p, q], 1e-5).unwrap();
            assert!(err < 1e-4, "triplet {err}");
            let h = Tensor::randn([6, 4], 1.0, &mut rng);
            let err = grad_check(
                |_, v| Ok::<_, Error>(supervised_contrastive_loss(&v, &[0, 1, 0, 2, 1, 1], 0.07)?.loss),
                &h,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "supcon {err}");
        }
    }

    fn matrix(n: usize, e: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, e), n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn triplet_matches_oracle_and_is_permutation_equivariant(
            (p, q, perm) in (2usize..10, 1usize..6).prop_flat_map(|(n, e)| {
                (matrix(n, e), matrix(n, e), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
            }),
            margin in 0.0f64..2.0,
        ) {
            let t = Tape::new();
            let l = triplet_taw_loss(&rows(&t, &p), &rows(&t, &q), margin).unwrap().item();
            prop_assert!((l - triplet_oracle(&p, &q, margin)).abs() < 1e-9);
            let pp: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
            let qp: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
            let lp = triplet_taw_loss(&rows(&t, &pp), &rows(&t, &qp), margin).unwrap().item();
            prop_assert!((l - lp).abs() < 1e-9);
        }

        #[test]
        fn supcon_matches_oracle(
            (h, y) in (2usize..12, 1usize..6).prop_flat_map(|(n, e)| {
                (matrix(n, e), prop::collection::vec(0u8..3, n))
            }),
            tau in 0.05f64..2.0,
        ) {
            prop_assume!(h.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
            let t = Tape::new();
            let l = supervised_contrastive_loss(&rows(&t, &h), &y, tau).unwrap().loss.item();
            let want = supcon_oracle(&h, &y, tau);
            prop_assert!((l - want).abs() < 1e-9 * want.abs().max(1.0), "{} vs {}", l, want);
            prop_assert!(l >= -1e-12);
        }
    }

    #[test]
    fn supcon_decreases_when_positive_cosine_increases() {
        // Rotate row 1 toward row 0 (same label); nothing else moves.
        let base = |angle: f64| {
            vec![
                vec![1.0, 0.0, 0.0],
                vec![angle.cos(), angle.sin(), 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, -1.0],
            ]
        };
        let y = [0, 0, 1, 1];
        let t = Tape::new();
        let mut last = f64::INFINITY;
        for k in 0..8 {
            let angle = 1.5 - 0.2 * k as f64;
            let l = supervised_contrastive_loss(&rows(&t, &base(angle)), &y, 0.5)
                .unwrap()
                .loss
                .item();
            assert!(l < last);
            last = l;
        }
    }
}
