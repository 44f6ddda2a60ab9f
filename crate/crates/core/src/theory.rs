//! Numerical companions to the regularization analysis.
//!
//! [`rademacher_samples`] draws realizations of the signed sum
//! `sum_i sigma_i * E_k[loss_i(k)]`, where `sigma_i` are independent `+-1`
//! signs and the inner expectation averages the squared loss over joint
//! replacement draws for interaction `i`. With identity transitions the
//! samples reduce to the classical signed empirical-loss sums; increasing
//! replacement probability smooths the per-interaction expectations and
//! shrinks the spread of the sums.
//!
//! [`label_smoothing_check`] verifies, on one classification example, that
//! cross-entropy averaged over uniform label replacement equals
//! cross-entropy against the correspondingly smoothed target.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::InteractionDataset;
use crate::embedding::{dot, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, TransitionModel};

/// Controls for the sampling simulation.
#[derive(Debug, Clone)]
pub struct RadSimConfig {
    /// Number of sign vectors drawn, one sample per vector.
    pub num_outer_samples: usize,
    /// Monte Carlo draws per interaction when the joint transition support
    /// is too large to enumerate.
    pub mc_inner: usize,
    /// Replacement probabilities for the sweep driver.
    pub p0_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for RadSimConfig {
    fn default() -> Self {
        Self {
            num_outer_samples: 2000,
            mc_inner: 200,
            p0_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            seed: 0,
        }
    }
}

/// Per-interaction joint supports above this are estimated by Monte Carlo.
const INNER_ENUM_BUDGET: u128 = 1_000_000;

fn squared_loss(params: &ModelParams, ku: usize, ki: usize, rating: f64) -> f64 {
    let e = dot(params.users.row(ku), params.items.row(ki)) - rating;
    e * e
}

/// Exact `E_k[loss]` for one interaction by enumerating both supports.
fn inner_expectation_exact(
    params: &ModelParams,
    user_tm: &TransitionModel,
    item_tm: &TransitionModel,
    user: usize,
    item: usize,
    rating: f64,
) -> Result<f64> {
    let users: Vec<usize> = if user_tm.is_deterministic() {
        vec![user]
    } else {
        (0..user_tm.num_nodes()).collect()
    };
    let items: Vec<usize> = if item_tm.is_deterministic() {
        vec![item]
    } else {
        (0..item_tm.num_nodes()).collect()
    };
    let mut sum = 0.0;
    for &ku in &users {
        let pu = user_tm.prob(user, ku)?;
        if pu == 0.0 {
            continue;
        }
        for &ki in &items {
            let pi = item_tm.prob(item, ki)?;
            if pi == 0.0 {
                continue;
            }
            sum += pu * pi * squared_loss(params, ku, ki, rating);
        }
    }
    Ok(sum)
}

/// Monte Carlo `E_k[loss]` over `draws` joint replacement draws.
fn inner_expectation_mc<R: Rng + ?Sized>(
    params: &ModelParams,
    user_tm: &TransitionModel,
    item_tm: &TransitionModel,
    user: usize,
    item: usize,
    rating: f64,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut sum = 0.0;
    for _ in 0..draws {
        let ku = user_tm.sample(user, rng)?;
        let ki = item_tm.sample(item, rng)?;
        sum += squared_loss(params, ku, ki, rating);
    }
    Ok(sum / draws as f64)
}

/// Draws `cfg.num_outer_samples` realizations of
/// `sum_i sigma_i * E_k[loss_i]` at frozen `params`.
///
/// The inner expectations are computed once (exactly when the joint support
/// has at most 10^6 terms, otherwise by `cfg.mc_inner` Monte Carlo draws),
/// then each outer sample draws fresh signs. Deterministic under
/// `cfg.seed`; sample order is fixed by sample index.
pub fn rademacher_samples(
    params: &ModelParams,
    ds: &InteractionDataset,
    user_tm: &TransitionModel,
    item_tm: &TransitionModel,
    cfg: &RadSimConfig,
) -> Result<Vec<f64>> {
    if cfg.num_outer_samples == 0 || cfg.mc_inner == 0 {
        return Err(Error::InvalidArgument(
            "num_outer_samples and mc_inner must be >= 1".into(),
        ));
    }
    let su = if user_tm.is_deterministic() { 1 } else { user_tm.num_nodes() } as u128;
    let si = if item_tm.is_deterministic() { 1 } else { item_tm.num_nodes() } as u128;
    let enumerable = su * si <= INNER_ENUM_BUDGET;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inner = Vec::with_capacity(ds.len());
    for it in &ds.interactions {
        let m = if enumerable {
            inner_expectation_exact(params, user_tm, item_tm, it.user, it.item, it.rating)?
        } else {
            inner_expectation_mc(
                params, user_tm, item_tm, it.user, it.item, it.rating, cfg.mc_inner, &mut rng,
            )?
        };
        inner.push(m);
    }

    let mut samples = Vec::with_capacity(cfg.num_outer_samples);
    for _ in 0..cfg.num_outer_samples {
        let mut sum = 0.0;
        for &m in &inner {
            if rng.random::<bool>() {
                sum += m;
            } else {
                sum -= m;
            }
        }
        samples.push(sum);
    }
    Ok(samples)
}

/// Transition families for the p0 sweep.
#[derive(Debug, Clone, Copy)]
pub enum RadSimTransitions<'a> {
    /// Uniform replacement on both tables.
    UniformBoth,
    /// Identity users, uniform items.
    UniformItems,
    /// Identity users, graph-driven items with the given ratio.
    GraphItems { graph: &'a KnowledgeGraph, rho: f64 },
}

/// Samples for one grid point.
#[derive(Debug, Clone)]
pub struct RadSimGroup {
    pub p0: f64,
    pub samples: Vec<f64>,
}

/// Runs [`rademacher_samples`] once per `p0` in the grid. Every group reuses
/// `cfg.seed`, so with exact inner expectations the sign vectors are common
/// random numbers across the grid — medians compare with less noise.
pub fn rademacher_sweep(
    params: &ModelParams,
    ds: &InteractionDataset,
    transitions: RadSimTransitions<'_>,
    cfg: &RadSimConfig,
) -> Result<Vec<RadSimGroup>> {
    if cfg.p0_grid.is_empty() {
        return Err(Error::InvalidArgument("p0 grid must be non-empty".into()));
    }
    let mut groups = Vec::with_capacity(cfg.p0_grid.len());
    for &p0 in &cfg.p0_grid {
        let (user_tm, item_tm) = match transitions {
            RadSimTransitions::UniformBoth => (
                TransitionModel::uniform(ds.num_users, p0)?,
                TransitionModel::uniform(ds.num_items, p0)?,
            ),
            RadSimTransitions::UniformItems => (
                TransitionModel::identity(ds.num_users)?,
                TransitionModel::uniform(ds.num_items, p0)?,
            ),
            RadSimTransitions::GraphItems { graph, rho } => (
                TransitionModel::identity(ds.num_users)?,
                TransitionModel::from_graph(graph.clone(), p0, rho)?,
            ),
        };
        let samples = rademacher_samples(params, ds, &user_tm, &item_tm, cfg)?;
        groups.push(RadSimGroup { p0, samples });
    }
    Ok(groups)
}

/// Writes sweep output as CSV: `p0,sample_index,value`.
pub fn write_radsim_csv(groups: &[RadSimGroup], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "p0,sample_index,value").map_err(|e| Error::io(path, e))?;
    for g in groups {
        for (idx, v) in g.samples.iter().enumerate() {
            writeln!(w, "{},{idx},{v}", g.p0).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Cross-entropy of a predicted distribution against a one-hot label whose
/// index is replaced uniformly with probability `p0`, computed two ways:
/// as the expectation of one-hot cross-entropies over the replacement draw,
/// and as a single cross-entropy against the smoothed target (mass `1 - p0`
/// on the true label, `p0 / (N - 1)` elsewhere). The two agree by linearity;
/// both values are returned so callers can assert it.
pub fn label_smoothing_check(
    probs: &[f64],
    true_label: usize,
    p0: f64,
) -> Result<(f64, f64)> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("probs must be non-empty".into()));
    }
    if true_label >= n {
        return Err(Error::IndexOutOfRange {
            index: true_label,
            size: n,
        });
    }
    if !(0.0..1.0).contains(&p0) {
        return Err(Error::InvalidArgument(format!("p0 must lie in [0, 1), got {p0}")));
    }
    if probs.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidArgument("probs entries must be > 0".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "probs must sum to 1 within 1e-12, got {sum}"
        )));
    }

    // Replacement distribution over labels. A single class cannot move.
    let q = |label: usize| -> f64 {
        if n == 1 {
            1.0
        } else if label == true_label {
            1.0 - p0
        } else {
            p0 / (n - 1) as f64
        }
    };

    // Route 1: expectation of the one-hot cross-entropy over the label draw.
    let mut sse_expected_ce = 0.0;
    for label in 0..n {
        let one_hot_ce = -probs[label].ln();
        sse_expected_ce += q(label) * one_hot_ce;
    }

    // Route 2: build the smoothed target, then one cross-entropy.
    let target: Vec<f64> = (0..n).map(q).collect();
    let smoothed_ce = -target.iter().zip(probs).map(|(t, p)| t * p.ln()).sum::<f64>();

    Ok((sse_expected_ce, smoothed_ce))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use crate::embedding::EmbeddingTable;

    fn const_rating_ds(n: usize, rating: f64, nu: usize, ni: usize) -> InteractionDataset {
        let interactions = (0..n)
            .map(|t| Interaction {
                user: t % nu,
                item: t % ni,
                rating,
                timestamp: None,
            })
            .collect();
        InteractionDataset::new(interactions, nu, ni, 1.0, 5.0).unwrap()
    }

    fn zero_params(nu: usize, ni: usize, d: usize) -> ModelParams {
        ModelParams::new(
            EmbeddingTable::from_rows(0, vec![vec![0.0; d]; nu]).unwrap(),
            EmbeddingTable::from_rows(1, vec![vec![0.0; d]; ni]).unwrap(),
        )
        .unwrap()
    }

    /// Replays the sign draws of [`rademacher_samples`] for the exact-inner
    /// path, where the rng is consumed only by the signs.
    fn replay_signed_sums(inner: &[f64], num_samples: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..num_samples)
            .map(|_| {
                inner
                    .iter()
                    .map(|&m| if rng.random::<bool>() { m } else { -m })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn identity_transitions_give_plain_signed_loss_sums() {
        let (ds, _) = crate::dataset::gen_synthetic(8, 6, 2, 2, 3, 0.3, 1).unwrap();
        let params = ModelParams::init(8, 6, 3, 0.2, 2).unwrap();
        let user_tm = TransitionModel::identity(8).unwrap();
        let item_tm = TransitionModel::identity(6).unwrap();
        let cfg = RadSimConfig {
            num_outer_samples: 50,
            mc_inner: 10,
            p0_grid: vec![0.0],
            seed: 7,
        };
        let samples = rademacher_samples(&params, &ds, &user_tm, &item_tm, &cfg).unwrap();

        let losses: Vec<f64> = ds
            .interactions
            .iter()
            .map(|it| squared_loss(&params, it.user, it.item, it.rating))
            .collect();
        let expected = replay_signed_sums(&losses, 50, 7);
        assert_eq!(samples, expected);
    }

    #[test]
    fn constant_loss_factors_out_of_every_sample() {
        // Zero embeddings predict 0 everywhere, so every replacement sees
        // the same loss r^2 and each sample is exactly r^2 * sum(signs).
        let ds = const_rating_ds(20, 2.0, 5, 4);
        let params = zero_params(5, 4, 3);
        let user_tm = TransitionModel::uniform(5, 0.6).unwrap();
        let item_tm = TransitionModel::uniform(4, 0.3).unwrap();
        let cfg = RadSimConfig {
            num_outer_samples: 40,
            mc_inner: 10,
            p0_grid: vec![0.0],
            seed: 3,
        };
        let samples = rademacher_samples(&params, &ds, &user_tm, &item_tm, &cfg).unwrap();
        let c = 4.0; // rating^2
        let expected = replay_signed_sums(&vec![c; 20], 40, 3);
        for (s, e) in samples.iter().zip(&expected) {
            assert!((s - e).abs() < 1e-9, "{s} vs {e}");
        }
    }

    #[test]
    fn inner_mc_agrees_with_inner_exact() {
        let (ds, _) = crate::dataset::gen_synthetic(6, 5, 2, 2, 3, 0.4, 4).unwrap();
        let params = ModelParams::init(6, 5, 3, 0.4, 5).unwrap();
        let user_tm = TransitionModel::uniform(6, 0.3).unwrap();
        let item_tm = TransitionModel::uniform(5, 0.5).unwrap();
        let it = &ds.interactions[0];
        let exact =
            inner_expectation_exact(&params, &user_tm, &item_tm, it.user, it.item, it.rating)
                .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 200_000;
        let mc = inner_expectation_mc(
            &params, &user_tm, &item_tm, it.user, it.item, it.rating, draws, &mut rng,
        )
        .unwrap();
        // Rough SE bound: losses on this instance are O(10).
        assert!((mc - exact).abs() < 0.3, "exact {exact}, mc {mc}");
    }

    #[test]
    fn samples_are_symmetric_about_zero() {
        let (ds, _) = crate::dataset::gen_synthetic(10, 8, 2, 2, 5, 0.4, 6).unwrap();
        let params = ModelParams::init(10, 8, 3, 0.3, 7).unwrap();
        let user_tm = TransitionModel::uniform(10, 0.2).unwrap();
        let item_tm = TransitionModel::uniform(8, 0.2).unwrap();
        let cfg = RadSimConfig {
            num_outer_samples: 10_000,
            mc_inner: 10,
            p0_grid: vec![0.0],
            seed: 11,
        };
        let samples = rademacher_samples(&params, &ds, &user_tm, &item_tm, &cfg).unwrap();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let se = (var / n).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn sweep_produces_group_per_grid_point() {
        let (ds, graph) = crate::dataset::gen_synthetic(10, 8, 2, 2, 4, 0.4, 8).unwrap();
        let params = ModelParams::init(10, 8, 3, 0.3, 9).unwrap();
        let cfg = RadSimConfig {
            num_outer_samples: 20,
            mc_inner: 10,
            p0_grid: vec![0.0, 0.5],
            seed: 12,
        };
        let groups =
            rademacher_sweep(&params, &ds, RadSimTransitions::GraphItems { graph: &graph, rho: 10.0 }, &cfg)
                .unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].p0, 0.0);
        assert_eq!(groups[1].p0, 0.5);
        assert_eq!(groups[0].samples.len(), 20);

        let f = tempfile::NamedTempFile::new().unwrap();
        write_radsim_csv(&groups, f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("p0,sample_index,value\n"));
        assert_eq!(text.lines().count(), 1 + 40);
    }

    #[test]
    fn label_smoothing_routes_agree_hand_case() {
        // q = (0.8, 0.1, 0.1) against probs (0.7, 0.2, 0.1).
        let expected = 0.8 * -(0.7f64.ln()) + 0.1 * -(0.2f64.ln()) + 0.1 * -(0.1f64.ln());
        let (sse, smoothed) = label_smoothing_check(&[0.7, 0.2, 0.1], 0, 0.2).unwrap();
        assert!((sse - expected).abs() < 1e-12);
        assert!((smoothed - expected).abs() < 1e-12);
        assert!((sse - smoothed).abs() < 1e-12);
    }

    #[test]
    fn label_smoothing_p0_zero_is_plain_ce() {
        let (sse, smoothed) = label_smoothing_check(&[0.25, 0.5, 0.25], 1, 0.0).unwrap();
        let plain = -(0.5f64.ln());
        assert!((sse - plain).abs() < 1e-15);
        assert!((smoothed - plain).abs() < 1e-15);
    }

    #[test]
    fn label_smoothing_validates_input() {
        assert!(label_smoothing_check(&[0.5, 0.6], 0, 0.1).is_err());
        assert!(label_smoothing_check(&[1.0, 0.0], 0, 0.1).is_err());
        assert!(label_smoothing_check(&[0.5, 0.5], 2, 0.1).is_err());
        assert!(label_smoothing_check(&[0.5, 0.5], 0, 1.0).is_err());
    }
}
