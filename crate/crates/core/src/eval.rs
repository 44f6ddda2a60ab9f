//! Held-out evaluation (RMSE, precision@k) and PCA projection of embedding
//! tables. Everything here is a pure read of frozen parameters — no rng.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::InteractionDataset;
use crate::embedding::{dot, EmbeddingTable, ModelParams};
use crate::error::{Error, Result};

/// Metric bundle produced by the `eval` subcommand.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rmse: Option<f64>,
    pub precision_at: HashMap<usize, f64>,
}

/// Root mean squared error of dot-product predictions over `test`. With
/// `clip` set (the default in the CLI), predictions are clamped to the
/// dataset's rating scale first.
pub fn rmse(params: &ModelParams, test: &InteractionDataset, clip: bool) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("rmse needs a non-empty test set".into()));
    }
    let mut sq = 0.0;
    for it in &test.interactions {
        let mut pred = params.predict(it.user, it.item);
        if clip {
            pred = pred.clamp(test.rating_min, test.rating_max);
        }
        let e = pred - it.rating;
        sq += e * e;
    }
    Ok((sq / test.len() as f64).sqrt())
}

/// Mean precision@k over users with at least one test positive.
///
/// For each such user, every item outside the user's train positives is
/// ranked by score (ties broken by item index, ascending, so ranking is
/// deterministic); P@k counts test positives in the top k. Users without
/// test positives are excluded from the mean.
pub fn precision_at_k(
    params: &ModelParams,
    train: &InteractionDataset,
    test: &InteractionDataset,
    ks: &[usize],
) -> Result<HashMap<usize, f64>> {
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument("ks must be non-empty and >= 1".into()));
    }
    let train_pos = train.positives_by_user();
    let test_pos = test.positives_by_user();
    let max_k = *ks.iter().max().unwrap();

    let mut sums: HashMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut eligible = 0usize;

    for user in 0..test.num_users {
        if test_pos[user].is_empty() {
            continue;
        }
        eligible += 1;
        let mut scored: Vec<(f64, usize)> = (0..test.num_items)
            .filter(|item| !train_pos[user].contains(item))
            .map(|item| (params.predict(user, item), item))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top: Vec<usize> = scored.iter().take(max_k).map(|&(_, item)| item).collect();
        for &k in ks {
            let hits = top.iter().take(k).filter(|i| test_pos[user].contains(i)).count();
            *sums.get_mut(&k).unwrap() += hits as f64 / k as f64;
        }
    }

    if eligible == 0 {
        return Err(Error::EmptyInput("no user has test positives".into()));
    }
    Ok(sums
        .into_iter()
        .map(|(k, s)| (k, s / eligible as f64))
        .collect())
}

/// PCA of an embedding table.
#[derive(Debug, Clone)]
pub struct PcaResult {
    /// `N x out_dim` coordinates of each row in the principal basis.
    pub projection: Vec<Vec<f64>>,
    /// `out_dim` unit-length principal directions in the original space.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Column means subtracted before projecting.
    pub mean: Vec<f64>,
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 100_000;

/// Projects table rows onto the top `out_dim` principal directions of their
/// covariance, via power iteration with deflation (tolerance 1e-9). Columns
/// are ordered by decreasing explained variance. Component signs are
/// arbitrary, as with any eigendecomposition.
pub fn pca_project(table: &EmbeddingTable, out_dim: usize) -> Result<PcaResult> {
    let n = table.rows();
    let d = table.dim();
    if out_dim > d {
        return Err(Error::InvalidArgument(format!(
            "out_dim {out_dim} exceeds table dim {d}"
        )));
    }

    let mut mean = vec![0.0; d];
    for j in 0..n {
        for (m, v) in mean.iter_mut().zip(table.row(j)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let centered: Vec<Vec<f64>> = (0..n)
        .map(|j| table.row(j).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    // d x d covariance (population normalization).
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for a in 0..d {
            for b in a..d {
                cov[a][b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= n as f64;
            cov[b][a] = cov[a][b];
        }
    }

    let mut components = Vec::with_capacity(out_dim);
    let mut explained = Vec::with_capacity(out_dim);
    for _ in 0..out_dim {
        let (vec_k, lambda) = dominant_eigenpair(&cov, d);
        // Deflate: cov -= lambda v v^T
        for a in 0..d {
            for b in 0..d {
                cov[a][b] -= lambda * vec_k[a] * vec_k[b];
            }
        }
        explained.push(lambda);
        components.push(vec_k);
    }

    let projection: Vec<Vec<f64>> = centered
        .iter()
        .map(|row| components.iter().map(|c| dot(row, c)).collect())
        .collect();

    Ok(PcaResult {
        projection,
        components,
        explained_variance: explained,
        mean,
    })
}

/// Power iteration for the dominant eigenpair of a symmetric PSD matrix.
fn dominant_eigenpair(m: &[Vec<f64>], d: usize) -> (Vec<f64>, f64) {
    // Deterministic start with energy in every coordinate.
    let mut v: Vec<f64> = (0..d)
        .map(|t| if t % 2 == 0 { 1.0 } else { -1.0 } / (d as f64).sqrt())
        .collect();
    v[0] += 0.5; // break symmetry against exactly-alternating eigenvectors
    normalize(&mut v);

    let mut prev = v.clone();
    for _ in 0..POWER_MAX_ITERS {
        let mut next = matvec(m, &v);
        let norm = dot(&next, &next).sqrt();
        if norm < 1e-300 {
            // Zero matrix (or fully deflated): any direction has eigenvalue 0.
            return (v, 0.0);
        }
        for x in &mut next {
            *x /= norm;
        }
        // Fix orientation against the previous iterate so the convergence
        // test is sign-stable.
        if dot(&next, &prev) < 0.0 {
            for x in &mut next {
                *x = -*x;
            }
        }
        let delta: f64 = next
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        prev.clone_from(&next);
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let mv = matvec(m, &v);
    let lambda = dot(&v, &mv);
    (v, lambda)
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

/// Writes PCA coordinates as CSV: `table,index,pc1..pc{out_dim}`.
pub fn write_pca_csv(table_name: &str, pca: &PcaResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let out_dim = pca.components.len();
    let header: Vec<String> = (1..=out_dim).map(|t| format!("pc{t}")).collect();
    writeln!(w, "table,index,{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (idx, row) in pca.projection.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{table_name},{idx},{}", vals.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use crate::embedding::EmbeddingTable;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_from(u: Vec<Vec<f64>>, i: Vec<Vec<f64>>) -> ModelParams {
        ModelParams::new(
            EmbeddingTable::from_rows(0, u).unwrap(),
            EmbeddingTable::from_rows(1, i).unwrap(),
        )
        .unwrap()
    }

    fn ds(rows: Vec<(usize, usize, f64)>, nu: usize, ni: usize, lo: f64, hi: f64) -> InteractionDataset {
        InteractionDataset::new(
            rows.into_iter()
                .map(|(user, item, rating)| Interaction { user, item, rating, timestamp: None })
                .collect(),
            nu,
            ni,
            lo,
            hi,
        )
        .unwrap()
    }

    #[test]
    fn rmse_hand_case() {
        // Predictions (1, 2) against truth (1, 4): sqrt((0 + 4) / 2).
        let params = params_from(vec![vec![1.0]], vec![vec![1.0], vec![2.0]]);
        let test = ds(vec![(0, 0, 1.0), (0, 1, 4.0)], 1, 2, 1.0, 5.0);
        let r = rmse(&params, &test, false).unwrap();
        assert!((r - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmse_perfect_predictions() {
        let params = params_from(vec![vec![1.0]], vec![vec![3.0]]);
        let test = ds(vec![(0, 0, 3.0)], 1, 1, 1.0, 5.0);
        assert_eq!(rmse(&params, &test, true).unwrap(), 0.0);
    }

    #[test]
    fn rmse_clips_to_scale() {
        // Raw prediction 7.3 with max rating 5 contributes (5 - r)^2.
        let params = params_from(vec![vec![1.0]], vec![vec![7.3]]);
        let test = ds(vec![(0, 0, 4.0)], 1, 1, 1.0, 5.0);
        let clipped = rmse(&params, &test, true).unwrap();
        assert!((clipped - 1.0).abs() < 1e-15);
        let raw = rmse(&params, &test, false).unwrap();
        assert!((raw - 3.3).abs() < 1e-12);
    }

    #[test]
    fn rmse_rejects_empty_test() {
        let params = params_from(vec![vec![1.0]], vec![vec![1.0]]);
        let mut test = ds(vec![(0, 0, 3.0)], 1, 1, 1.0, 5.0);
        test.interactions.clear();
        assert!(rmse(&params, &test, true).is_err());
    }

    #[test]
    fn rmse_is_permutation_invariant() {
        let params = params_from(
            vec![vec![1.0, 0.5], vec![0.2, 0.8]],
            vec![vec![1.5, 1.0], vec![2.0, 0.1], vec![0.3, 2.2]],
        );
        let rows = vec![(0, 0, 2.0), (0, 1, 3.0), (1, 2, 1.5), (1, 0, 4.0)];
        let a = ds(rows.clone(), 2, 3, 1.0, 5.0);
        let mut rev = rows;
        rev.reverse();
        let b = ds(rev, 2, 3, 1.0, 5.0);
        // Invariant up to summation-order roundoff.
        let ra = rmse(&params, &a, true).unwrap();
        let rb = rmse(&params, &b, true).unwrap();
        assert!((ra - rb).abs() < 1e-12);
    }

    #[test]
    fn precision_forced_rank_one() {
        // Two items; the test positive scores highest.
        let params = params_from(vec![vec![1.0]], vec![vec![5.0], vec![1.0]]);
        let train = ds(vec![(0, 1, 1.0)], 1, 2, 1.0, 5.0);
        let mut test = train.clone();
        test.interactions = vec![Interaction { user: 0, item: 0, rating: 5.0, timestamp: None }];
        // Item 1 is a train positive, so candidates = {0}; P@1 = 1.
        let p = precision_at_k(&params, &train, &test, &[1]).unwrap();
        assert_eq!(p[&1], 1.0);
    }

    #[test]
    fn precision_hand_ranked_second() {
        // Candidates {0, 1} (item 2 is the train positive); the single test
        // positive (item 1) ranks second: P@1 = 0, P@2 = 0.5.
        let train = ds(vec![(0, 2, 3.0)], 1, 3, 1.0, 5.0);
        let mut test = train.clone();
        test.interactions = vec![Interaction { user: 0, item: 1, rating: 5.0, timestamp: None }];
        let params = params_from(vec![vec![1.0]], vec![vec![2.0], vec![1.0], vec![-5.0]]);
        let p = precision_at_k(&params, &train, &test, &[1, 2]).unwrap();
        assert_eq!(p[&1], 0.0);
        assert_eq!(p[&2], 0.5);
    }

    #[test]
    fn precision_excludes_users_without_test_positives() {
        let params = params_from(
            vec![vec![1.0], vec![1.0]],
            vec![vec![2.0], vec![1.0]],
        );
        let train = ds(vec![(0, 0, 3.0), (1, 0, 3.0)], 2, 2, 1.0, 5.0);
        let mut test = train.clone();
        // Only user 0 has a test positive; user 1 must not dilute the mean.
        test.interactions = vec![Interaction { user: 0, item: 1, rating: 4.0, timestamp: None }];
        let p = precision_at_k(&params, &train, &test, &[1]).unwrap();
        assert_eq!(p[&1], 1.0);
    }

    #[test]
    fn precision_errors_when_no_test_positives() {
        let params = params_from(vec![vec![1.0]], vec![vec![2.0]]);
        let train = ds(vec![(0, 0, 3.0)], 1, 1, 1.0, 5.0);
        let mut test = train.clone();
        test.interactions.clear();
        assert!(precision_at_k(&params, &train, &test, &[1]).is_err());
    }

    #[test]
    fn precision_matches_bruteforce_per_user() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let nu = 6;
        let ni = 12;
        let u_rows: Vec<Vec<f64>> = (0..nu)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let i_rows: Vec<Vec<f64>> = (0..ni)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let params = params_from(u_rows, i_rows);
        let mut train_rows = Vec::new();
        let mut test_rows = Vec::new();
        for user in 0..nu {
            for item in 0..ni {
                if rng.random::<f64>() < 0.2 {
                    train_rows.push((user, item, 3.0));
                } else if rng.random::<f64>() < 0.2 {
                    test_rows.push((user, item, 4.0));
                }
            }
        }
        if test_rows.is_empty() {
            test_rows.push((0, 0, 4.0));
        }
        let train = ds(train_rows, nu, ni, 1.0, 5.0);
        let test = ds(test_rows, nu, ni, 1.0, 5.0);
        let ks = [1usize, 3, 5];
        let got = precision_at_k(&params, &train, &test, &ks).unwrap();

        let train_pos = train.positives_by_user();
        let test_pos = test.positives_by_user();
        for &k in &ks {
            let mut sum = 0.0;
            let mut count = 0;
            for user in 0..nu {
                if test_pos[user].is_empty() {
                    continue;
                }
                count += 1;
                let mut cands: Vec<usize> =
                    (0..ni).filter(|i| !train_pos[user].contains(i)).collect();
                cands.sort_by(|&a, &b| {
                    params
                        .predict(user, b)
                        .partial_cmp(&params.predict(user, a))
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let hits = cands.iter().take(k).filter(|i| test_pos[user].contains(i)).count();
                sum += hits as f64 / k as f64;
            }
            let brute = sum / count as f64;
            assert!((got[&k] - brute).abs() < 1e-12, "k={k}: {} vs {brute}", got[&k]);
        }
    }

    #[test]
    fn pca_recovers_exact_subspace() {
        // Rows lie in a 3-dim subspace of R^6; projecting to 3 components
        // and reconstructing should be lossless.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let basis: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0],
        ];
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let coeffs: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                (0..6)
                    .map(|t| coeffs.iter().zip(&basis).map(|(c, b)| c * b[t]).sum())
                    .collect()
            })
            .collect();
        let table = EmbeddingTable::from_rows(0, rows.clone()).unwrap();
        let pca = pca_project(&table, 3).unwrap();
        for (j, row) in rows.iter().enumerate() {
            for t in 0..6 {
                let recon: f64 = pca.mean[t]
                    + pca
                        .projection[j]
                        .iter()
                        .zip(&pca.components)
                        .map(|(p, c)| p * c[t])
                        .sum::<f64>();
                assert!((recon - row[t]).abs() < 1e-8, "row {j} coord {t}");
            }
        }
    }

    #[test]
    fn pca_explained_variance_is_sorted() {
        let table = EmbeddingTable::init(0, 200, 10, 0.3, 5).unwrap();
        let pca = pca_project(&table, 3).unwrap();
        assert!(pca.explained_variance[0] >= pca.explained_variance[1] - 1e-12);
        assert!(pca.explained_variance[1] >= pca.explained_variance[2] - 1e-12);
    }

    #[test]
    fn pca_rejects_out_dim_above_table_dim() {
        let table = EmbeddingTable::init(0, 5, 3, 0.1, 0).unwrap();
        assert!(pca_project(&table, 4).is_err());
    }

    #[test]
    fn pca_is_shift_invariant_up_to_sign() {
        let table = EmbeddingTable::init(0, 50, 4, 0.5, 8).unwrap();
        let shifted_rows: Vec<Vec<f64>> = (0..50)
            .map(|j| table.row(j).iter().map(|v| v + 10.0).collect())
            .collect();
        let shifted = EmbeddingTable::from_rows(0, shifted_rows).unwrap();
        let a = pca_project(&table, 2).unwrap();
        let b = pca_project(&shifted, 2).unwrap();
        for c in 0..2 {
            let flip = if dot(&a.components[c], &b.components[c]) < 0.0 { -1.0 } else { 1.0 };
            for j in 0..50 {
                assert!((a.projection[j][c] - flip * b.projection[j][c]).abs() < 1e-6);
            }
        }
    }
}
