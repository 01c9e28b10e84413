//! Two-component PCA by power iteration with deflation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One `[x, y]` per input row.
    pub coords: Vec<[f64; 2]>,
    /// Unit principal directions (a zero vector when the data has rank < 2).
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

const MAX_ITERS: usize = 200_000;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let e = v.len();
    (0..e).map(|i| (0..e).map(|j| m[i * e + j] * v[j]).sum()).collect()
}

/// Leading eigenpair of a symmetric PSD matrix.
fn leading(m: &[f64], e: usize, scale: f64) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..e).map(|i| ((i + 1) as f64 * 0.754_877_666_2).fract() + 0.1).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..MAX_ITERS {
        let w = mat_vec(m, &v);
        let nw = norm(&w);
        if nw <= 1e-13 * scale {
            return (vec![0.0; e], 0.0);
        }
        let w: Vec<f64> = w.into_iter().map(|x| x / nw).collect();
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < 1e-15 {
            break;
        }
    }
    let lambda = v.iter().zip(mat_vec(m, &v)).map(|(a, b)| a * b).sum();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    (v, lambda)
}

/// Centers `data` (`[N×E]`, N ≥ 3) and projects it onto its top two
/// principal directions. Each direction's first nonzero loading is positive.
pub fn pca_2d(data: &Tensor) -> Result<Projection> {
    let s = data.shape();
    if s.len() != 2 || s[0] < 3 {
        return Err(Error::Input(format!("projection needs an [N×E] matrix with N ≥ 3, got {s:?}")));
    }
    let (n, e) = (s[0], s[1]);
    let mut mean = vec![0.0; e];
    for i in 0..n {
        mean.iter_mut().zip(data.row(i)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| data.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; e * e];
    for r in &centered {
        for a in 0..e {
            for b in 0..e {
                cov[a * e + b] += r[a] * r[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let scale = cov.iter().map(|c| c.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    let (v1, l1) = leading(&cov, e, scale);
    for a in 0..e {
        for b in 0..e {
            cov[a * e + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (v2, l2) = leading(&cov, e, scale);
    let dot = |r: &[f64], v: &[f64]| r.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let coords = centered.iter().map(|r| [dot(r, &v1), dot(r, &v2)]).collect();
    Ok(Projection {
        coords,
        components: [v1, v2],
        eigenvalues: [l1, l2],
    })
}

/// `x,y,label` rows with a header line.
pub fn projection_csv(p: &Projection, labels: &[String]) -> Result<String> {
    if labels.len() != p.coords.len() {
        return Err(Error::Input("one label per projected row required".into()));
    }
    let mut out = String::from("x,y,label\n");
    for (c, l) in p.coords.iter().zip(labels) {
        out.push_str(&format!("{},{},{}\n", c[0], c[1], l));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn planar_data_keeps_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xy = Tensor::randn([8, 2], 1.0, &mut rng);
        // Embed the plane in 4-D through an orthonormal pair.
        let u = [0.5, 0.5, 0.5, 0.5];
        let w = [0.5, -0.5, 0.5, -0.5];
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..4).map(|k| xy.row(i)[0] * u[k] + xy.row(i)[1] * w[k] + 3.0).collect())
            .collect();
        let p = pca_2d(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = dist(xy.row(i), xy.row(j));
                assert!((dist(&p.coords[i], &p.coords[j]) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn collinear_points_have_zero_y() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![3.0, 6.0, 9.0]]).unwrap();
        let p = pca_2d(&t).unwrap();
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-9));
        assert!(p.components[0][0] > 0.0);
        assert!(pca_2d(&Tensor::zeros([2, 3])).is_err());
    }

    #[test]
    fn matches_full_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = Tensor::randn([10, 6], 1.0, &mut rng);
            let p = pca_2d(&x).unwrap();
            let m = DMatrix::from_row_slice(10, 6, x.data());
            let mean = m.row_mean();
            let c = DMatrix::from_fn(10, 6, |i, j| m[(i, j)] - mean[j]);
            let cov = c.transpose() * &c / 9.0;
            let eig = SymmetricEigen::new(cov);
            let mut idx: Vec<usize> = (0..6).collect();
            idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            for (k, &i) in idx.iter().take(2).enumerate() {
                assert!((p.eigenvalues[k] - eig.eigenvalues[i]).abs() < 1e-9);
                let v = eig.eigenvectors.column(i);
                let cosang: f64 = (0..6).map(|j| v[j] * p.components[k][j]).sum::<f64>().abs();
                assert!((1.0 - cosang.min(1.0)).sqrt() < 1e-6, "principal angle too large");
            }
        }
    }

    #[test]
    fn clusters_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = [[5.0, 0.0, 0.0, 0.0], [0.0, 5.0, 0.0, 0.0], [0.0, 0.0, 5.0, 0.0]];
        let mut rows = Vec::new();
        for c in &centers {
            for _ in 0..20 {
                let noise = Tensor::randn([4], 0.3, &mut rng);
                rows.push(c.iter().zip(noise.data()).map(|(a, b)| a + b).collect::<Vec<f64>>());
            }
        }
        let p = pca_2d(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let centroid = |k: usize| {
            let pts = &p.coords[k * 20..(k + 1) * 20];
            [pts.iter().map(|c| c[0]).sum::<f64>() / 20.0, pts.iter().map(|c| c[1]).sum::<f64>() / 20.0]
        };
        let cs: Vec<[f64; 2]> = (0..3).map(centroid).collect();
        let radius = (0..3)
            .map(|k| p.coords[k * 20..(k + 1) * 20].iter().map(|c| dist(c, &cs[k])).sum::<f64>() / 20.0)
            .fold(0.0, f64::max);
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(dist(&cs[a], &cs[b]) > radius);
            }
        }
        let csv = projection_csv(&p, &vec!["Pro".to_string(); 60]).unwrap();
        assert!(csv.starts_with("x,y,label\n"));
        assert_eq!(csv.lines().count(), 61);
    }
}
