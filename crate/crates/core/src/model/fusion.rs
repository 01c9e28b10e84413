//! Scaled dot-product fusion between token states and a single query vector.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Attends over `tokens: [B×T×E]` with one query per row, `query: [B×E]`.
///
/// Scores are `λ · tokens[b,t] · (W query[b])` with `λ = 1/√E`, softmaxed
/// over unmasked positions. Returns `(r [B×E], weights [B×T])`, where each
/// `r[b]` is the weighted sum of that row's token states.
pub fn fuse<'t>(tokens: &Var<'t>, query: &Var<'t>, w: &Var<'t>, mask: &Tensor) -> Result<(Var<'t>, Var<'t>)> {
    let ts = tokens.shape();
    let qs = query.shape();
    if ts.len() != 3 || qs.len() != 2 || qs[0] != ts[0] || qs[1] != ts[2] {
        return Err(Error::Batch(format!("fusion: tokens {ts:?} vs query {qs:?}")));
    }
    let (b, t, e) = (ts[0], ts[1], ts[2]);
    if w.shape() != [e, e] {
        return Err(Error::Batch(format!("fusion weight {:?}, expected [{e}, {e}]", w.shape())));
    }
    if mask.shape() != [b, t] {
        return Err(Error::Batch(format!("fusion mask {:?}, expected [{b}, {t}]", mask.shape())));
    }
    let lambda = 1.0 / (e as f64).sqrt();
    // Row b of u is (W query_b)ᵀ.
    let u = query.matmul(&w.transpose()?)?.reshape([b, e, 1])?;
    let scores = tokens.bmm(&u)?.reshape([b, t])?.scale(lambda)?;
    let weights = scores.masked_softmax(mask)?;
    let r = weights.reshape([b, 1, t])?.bmm(tokens)?.reshape([b, e])?;
    Ok((r, weights))
}

/// Single-example fusion on plain tensors: `tokens [T×E]`, `query [E]`,
/// `w [E×E]`, optional `mask [T]`. Returns `(r [E], weights [T])`.
pub fn attend(tokens: &Tensor, query: &Tensor, w: &Tensor, mask: Option<&[f64]>) -> Result<(Tensor, Tensor)> {
    let s = tokens.shape();
    if s.len() != 2 {
        return Err(Error::Batch(format!("attend expects [T, E] tokens, got {s:?}")));
    }
    let (t, e) = (s[0], s[1]);
    if t == 0 {
        return Err(Error::Batch("attend needs at least one position".into()));
    }
    let mask = match mask {
        Some(m) if m.len() != t => return Err(Error::Batch(format!("mask length {} for {t} positions", m.len()))),
        Some(m) => Tensor::new([1, t], m.to_vec())?,
        None => Tensor::ones([1, t]),
    };
    let tape = Tape::new();
    let tok = tape.constant(tokens.clone().reshaped([1, t, e])?);
    let q = tape.constant(query.clone().reshaped([1, e])?);
    let (r, a) = fuse(&tok, &q, &tape.constant(w.clone()), &mask)?;
    Ok((r.value().reshaped([e])?, a.value().reshaped([t])?))
}

/// Fusion of TAW token states with the topic vector.
pub fn topic_attention(h_taw_tokens: &Tensor, h_topic: &Tensor, w_taw: &Tensor) -> Result<(Tensor, Tensor)> {
    attend(h_taw_tokens, h_topic, w_taw, None)
}

/// Fusion of joint-encoder token states with the TAG vector.
pub fn stance_attention(h_pt_tokens: &Tensor, h_tag: &Tensor, w_tag: &Tensor) -> Result<(Tensor, Tensor)> {
    attend(h_pt_tokens, h_tag, w_tag, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, TensorError};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_position_returns_that_state() {
        let tok = Tensor::from_rows(&[vec![0.3, -2.0, 5.0]]).unwrap();
        let q = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let w = Tensor::eye(3);
        let (r, a) = topic_attention(&tok, &q, &w).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(r.data(), tok.data());
    }

    #[test]
    fn zero_weight_gives_uniform_over_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tok = Tensor::randn([4, 3], 1.0, &mut rng);
        let q = Tensor::randn([3], 1.0, &mut rng);
        let w = Tensor::zeros([3, 3]);
        let (_, a) = stance_attention(&tok, &q, &w).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.25));
        let (_, a) = attend(&tok, &q, &w, Some(&[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(a.data(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn two_by_two_hand_case() {
        // h = [[1,0],[0,1]], q = [1,2], W = [[2,0],[0,1]] → W q = [2,2],
        // scores = [2,2]/√2 → equal weights; change h1 to [0,3]:
        // scores = [2, 6]/√2.
        let tok = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let q = Tensor::vector(vec![1.0, 2.0]);
        let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (r, a) = attend(&tok, &q, &w, None).unwrap();
        let s = [2.0 / 2f64.sqrt(), 6.0 / 2f64.sqrt()];
        let z = s[0].exp() + s[1].exp();
        let want = [s[0].exp() / z, s[1].exp() / z];
        assert!((a.data()[0] - want[0]).abs() < 1e-15);
        assert!((a.data()[1] - want[1]).abs() < 1e-15);
        assert!((r.data()[0] - want[0]).abs() < 1e-15);
        assert!((r.data()[1] - 3.0 * want[1]).abs() < 1e-14);
    }

    #[test]
    fn fully_masked_row_is_contract_error() {
        let tok = Tensor::zeros([2, 2]);
        let q = Tensor::vector(vec![1.0, 1.0]);
        let err = attend(&tok, &q, &Tensor::eye(2), Some(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Tensor(TensorError::Contract(_))), "{err:?}");
    }

    #[test]
    fn fusion_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tok = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let q = Tensor::randn([2, 4], 1.0, &mut rng);
        let w = Tensor::randn([4, 4], 0.5, &mut rng);
        let mask = Tensor::new([2, 3], vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let c = Tensor::randn([2, 4], 1.0, &mut rng);
        let err = grad_check_many(
            |tape, v| {
                let (r, _) = fuse(&v[0], &v[1], &v[2], &mask)?;
                r.mul(&tape.constant(c.clone()))?.sum().map_err(Error::from)
            },
            &[tok, q, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn output_in_convex_hull(seed in any::<u64>(), t in 1usize..6, e in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tok = Tensor::randn([t, e], 2.0, &mut rng);
            let q = Tensor::randn([e], 2.0, &mut rng);
            let w = Tensor::randn([e, e], 1.0, &mut rng);
            let (r, a) = attend(&tok, &q, &w, None).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            for j in 0..e {
                let col: Vec<f64> = (0..t).map(|i| tok.get(&[i, j])).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r.data()[j] >= lo - 1e-12 && r.data()[j] <= hi + 1e-12);
            }
        }
    }
}
