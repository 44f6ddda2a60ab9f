//! Losses, analytic gradients, and the SGD trainer.
//!
//! The trainer follows the replace-then-update scheme: for every interaction
//! it first draws replacement indices from the per-table transition models,
//! looks up the replaced rows, applies dropout masks, computes the loss
//! gradient there, and applies the update to the replaced rows. Gradients
//! therefore flow to the rows that were looked up after replacement, not to
//! the original indices. Weight decay touches only the rows involved in an
//! update; the graph Laplacian penalty, when enabled, contributes one full
//! gradient step per epoch.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{InteractionDataset, Split};
use crate::embedding::{dot, dropout_mask, EmbeddingTable, ModelParams};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{KnowledgeGraph, TransitionModel};

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Squared loss on explicit ratings.
    Mf,
    /// Pairwise logistic (BPR) loss on implicit positives.
    Bpr,
}

/// Everything the trainer needs besides the data and the initial parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub sse_user: TransitionModel,
    pub sse_item: TransitionModel,
    pub glr_beta: f64,
    /// Item graph for the Laplacian penalty; required when `glr_beta > 0`.
    pub glr_graph: Option<KnowledgeGraph>,
    pub epochs: usize,
    pub minibatch: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Plain SGD baseline: identity transitions, no dropout, no penalties.
    pub fn plain(num_users: usize, num_items: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            lr: 0.01,
            weight_decay: 0.0,
            dropout: 0.0,
            sse_user: TransitionModel::identity(num_users)?,
            sse_item: TransitionModel::identity(num_items)?,
            glr_beta: 0.0,
            glr_graph: None,
            epochs: 1,
            minibatch: 1,
            negatives_per_positive: 1,
            seed,
        })
    }

    fn validate(&self, ds: &InteractionDataset, params: &ModelParams) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.glr_beta >= 0.0) {
            return Err(Error::Config(format!("glr_beta must be >= 0, got {}", self.glr_beta)));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.negatives_per_positive == 0 {
            return Err(Error::Config(
                "epochs, minibatch, and negatives_per_positive must be >= 1".into(),
            ));
        }
        if params.users.rows() != ds.num_users || params.items.rows() != ds.num_items {
            return Err(Error::ShapeMismatch(format!(
                "params are {}x{} users/items but dataset has {}x{}",
                params.users.rows(),
                params.items.rows(),
                ds.num_users,
                ds.num_items
            )));
        }
        if self.sse_user.num_nodes() != ds.num_users {
            return Err(Error::ShapeMismatch(format!(
                "user transition model covers {} nodes, dataset has {} users",
                self.sse_user.num_nodes(),
                ds.num_users
            )));
        }
        if self.sse_item.num_nodes() != ds.num_items {
            return Err(Error::ShapeMismatch(format!(
                "item transition model covers {} nodes, dataset has {} items",
                self.sse_item.num_nodes(),
                ds.num_items
            )));
        }
        if self.glr_beta > 0.0 {
            match &self.glr_graph {
                None => {
                    return Err(Error::Config("glr_beta > 0 requires an item graph".into()))
                }
                Some(g) if g.num_nodes() != ds.num_items => {
                    return Err(Error::ShapeMismatch(format!(
                        "GLR graph has {} nodes, dataset has {} items",
                        g.num_nodes(),
                        ds.num_items
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One completed epoch of the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: f64,
    pub seconds: f64,
}

/// Per-epoch training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `rmse` for MF, `p@10` for BPR.
    pub metric_name: String,
    pub records: Vec<EpochRecord>,
}

/// Persists a report as CSV. Wall-clock seconds are only written when
/// `timings` is set; the column is left empty otherwise so identical runs
/// produce identical bytes.
pub fn write_report_csv(report: &TrainReport, path: &Path, timings: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "epoch,train_loss,metric,seconds").map_err(|e| Error::io(path, e))?;
    for r in &report.records {
        if timings {
            writeln!(w, "{},{},{},{:.3}", r.epoch, r.train_loss, r.metric, r.seconds)
        } else {
            writeln!(w, "{},{},{},", r.epoch, r.train_loss, r.metric)
        }
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Squared loss with L2 decay on the two touched rows:
/// `(dot(u, v) - r)^2 + lambda (|u|^2 + |v|^2)`.
pub fn mf_loss_grad(u: &[f64], v: &[f64], r: f64, lambda: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let e = dot(u, v) - r;
    let loss = e * e + lambda * (dot(u, u) + dot(v, v));
    let grad_u: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| 2.0 * e * vi + 2.0 * lambda * ui)
        .collect();
    let grad_v: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| 2.0 * e * ui + 2.0 * lambda * vi)
        .collect();
    (loss, grad_u, grad_v)
}

/// `ln(1 + e^z)` without overflow for large `|z|`.
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `1 / (1 + e^z)` without overflow for large `|z|`.
fn inv_1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Pairwise ranking loss with margin `x = dot(u, v_pos) - dot(u, v_neg)`:
/// `-ln sigmoid(x) + lambda (|u|^2 + |v_pos|^2 + |v_neg|^2)`, computed in
/// softplus form so large margins neither overflow nor produce NaN.
pub fn bpr_loss_grad(
    u: &[f64],
    v_pos: &[f64],
    v_neg: &[f64],
    lambda: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let x = dot(u, v_pos) - dot(u, v_neg);
    let loss = log1p_exp(-x) + lambda * (dot(u, u) + dot(v_pos, v_pos) + dot(v_neg, v_neg));
    // d loss / dx = -sigmoid(-x)
    let s = inv_1p_exp(x);
    let grad_u: Vec<f64> = u
        .iter()
        .zip(v_pos.iter().zip(v_neg))
        .map(|(&ui, (&pi, &ni))| -s * (pi - ni) + 2.0 * lambda * ui)
        .collect();
    let grad_pos: Vec<f64> = u
        .iter()
        .zip(v_pos)
        .map(|(&ui, &pi)| -s * ui + 2.0 * lambda * pi)
        .collect();
    let grad_neg: Vec<f64> = u
        .iter()
        .zip(v_neg)
        .map(|(&ui, &ni)| s * ui + 2.0 * lambda * ni)
        .collect();
    (loss, grad_u, grad_pos, grad_neg)
}

/// Graph Laplacian penalty `beta * sum_{(j,k) in E, j<k} |E[j] - E[k]|^2`
/// and its gradient `grad[j] = 2 beta * sum_{k in adj(j)} (E[j] - E[k])`.
pub fn glr_penalty_grad(
    table: &EmbeddingTable,
    graph: &KnowledgeGraph,
    beta: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if graph.num_nodes() != table.rows() {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} nodes, table has {} rows",
            graph.num_nodes(),
            table.rows()
        )));
    }
    let d = table.dim();
    let mut penalty = 0.0;
    let mut grad = vec![vec![0.0; d]; table.rows()];
    for (j, k) in graph.edges() {
        let rj = table.row(j);
        let rk = table.row(k);
        for t in 0..d {
            let diff = rj[t] - rk[t];
            penalty += diff * diff;
            grad[j][t] += 2.0 * beta * diff;
            grad[k][t] -= 2.0 * beta * diff;
        }
    }
    Ok((beta * penalty, grad))
}

/// Uniform draw over the items outside `positives`, by rejection (or by
/// enumerating the complement when almost everything is a positive).
pub fn sample_negative<R: Rng + ?Sized>(
    positives: &HashSet<usize>,
    num_items: usize,
    rng: &mut R,
) -> Result<usize> {
    if positives.len() >= num_items {
        return Err(Error::InvalidArgument(
            "user has interacted with every item; no negative exists".into(),
        ));
    }
    let free = (num_items - positives.len()) as f64;
    if num_items as f64 / free > 4.0 {
        let candidates: Vec<usize> =
            (0..num_items).filter(|i| !positives.contains(i)).collect();
        return Ok(candidates[rng.random_range(0..candidates.len())]);
    }
    loop {
        let k = rng.random_range(0..num_items);
        if !positives.contains(&k) {
            return Ok(k);
        }
    }
}

/// Pending update for one row of one table, accumulated over a minibatch.
type GradAcc = BTreeMap<(u8, usize), Vec<f64>>;

const USER_TABLE: u8 = 0;
const ITEM_TABLE: u8 = 1;

fn accumulate(acc: &mut GradAcc, table: u8, row: usize, grad: &[f64]) {
    let entry = acc
        .entry((table, row))
        .or_insert_with(|| vec![0.0; grad.len()]);
    for (a, g) in entry.iter_mut().zip(grad) {
        *a += g;
    }
}

/// Trains `params` on `split.train`, evaluating on `split.test` after every
/// epoch (RMSE for MF, P@10 for BPR; NaN when the test side is empty).
///
/// Per interaction: draw replacement indices from the transition models,
/// mask the replaced rows with dropout, take the loss gradient there, and
/// update those rows. Minibatches average the accumulated gradients.
/// Deterministic under `cfg.seed`.
pub fn train(
    kind: ModelKind,
    split: &Split,
    cfg: &TrainConfig,
    mut params: ModelParams,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate(&split.train, &params)?;
    let train_ds = &split.train;
    let n = train_ds.len();
    let dim = params.dim();

    let positives = match kind {
        ModelKind::Bpr => train_ds.positives_by_user(),
        ModelKind::Mf => Vec::new(),
    };
    if kind == ModelKind::Bpr {
        for it in &train_ds.interactions {
            if positives[it.user].len() >= train_ds.num_items {
                return Err(Error::InvalidArgument(format!(
                    "user {} has interacted with every item; BPR needs negatives",
                    it.user
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;

        for batch in order.chunks(cfg.minibatch) {
            if cfg.minibatch == 1 {
                let it = &train_ds.interactions[batch[0]];
                match kind {
                    ModelKind::Mf => {
                        loss_sum +=
                            step_mf(&mut params, it.user, it.item, it.rating, cfg, dim, &mut rng)?;
                        steps += 1;
                    }
                    ModelKind::Bpr => {
                        for _ in 0..cfg.negatives_per_positive {
                            loss_sum += step_bpr(
                                &mut params, it.user, it.item, &positives, cfg, dim, &mut rng,
                            )?;
                            steps += 1;
                        }
                    }
                }
            } else {
                let mut acc = GradAcc::new();
                let mut batch_steps = 0usize;
                for &idx in batch {
                    let it = &train_ds.interactions[idx];
                    match kind {
                        ModelKind::Mf => {
                            loss_sum +=
                                grad_mf(&params, it.user, it.item, it.rating, cfg, dim, &mut rng, &mut acc)?;
                            batch_steps += 1;
                        }
                        ModelKind::Bpr => {
                            for _ in 0..cfg.negatives_per_positive {
                                loss_sum += grad_bpr(
                                    &params, it.user, it.item, &positives, cfg, dim, &mut rng, &mut acc,
                                )?;
                                batch_steps += 1;
                            }
                        }
                    }
                }
                let scale = cfg.lr / batch_steps as f64;
                for ((table, row), grad) in acc {
                    let target = match table {
                        USER_TABLE => params.users.row_mut(row),
                        _ => params.items.row_mut(row),
                    };
                    for (t, g) in target.iter_mut().zip(grad) {
                        *t -= scale * g;
                    }
                }
                steps += batch_steps;
            }
        }

        if cfg.glr_beta > 0.0 {
            let graph = cfg.glr_graph.as_ref().expect("validated");
            let (_, grad) = glr_penalty_grad(&params.items, graph, cfg.glr_beta)?;
            for (j, row_grad) in grad.iter().enumerate() {
                let row = params.items.row_mut(j);
                for (t, g) in row.iter_mut().zip(row_grad) {
                    *t -= cfg.lr * g;
                }
            }
        }

        let metric = match kind {
            ModelKind::Mf => eval::rmse(&params, &split.test, true).unwrap_or(f64::NAN),
            ModelKind::Bpr => eval::precision_at_k(&params, &split.train, &split.test, &[10])
                .map(|m| m[&10])
                .unwrap_or(f64::NAN),
        };

        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            metric,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    let metric_name = match kind {
        ModelKind::Mf => "rmse",
        ModelKind::Bpr => "p@10",
    };
    Ok((
        params,
        TrainReport {
            metric_name: metric_name.to_string(),
            records,
        },
    ))
}

/// One replace-mask-update step of MF SGD. Returns the per-sample loss.
fn step_mf<R: Rng + ?Sized>(
    params: &mut ModelParams,
    user: usize,
    item: usize,
    rating: f64,
    cfg: &TrainConfig,
    dim: usize,
    rng: &mut R,
) -> Result<f64> {
    let ku = cfg.sse_user.sample(user, rng)?;
    let ki = cfg.sse_item.sample(item, rng)?;
    let mask_u = dropout_mask(dim, cfg.dropout, rng)?;
    let mask_v = dropout_mask(dim, cfg.dropout, rng)?;
    let lambda = cfg.weight_decay;

    let u_row = params.users.row(ku);
    let v_row = params.items.row(ki);
    let du: Vec<f64> = u_row.iter().zip(&mask_u).map(|(x, m)| x * m).collect();
    let dv: Vec<f64> = v_row.iter().zip(&mask_v).map(|(x, m)| x * m).collect();
    let e = dot(&du, &dv) - rating;
    let loss = e * e + lambda * (dot(u_row, u_row) + dot(v_row, v_row));

    let grad_u: Vec<f64> = (0..dim)
        .map(|t| 2.0 * e * dv[t] * mask_u[t] + 2.0 * lambda * u_row[t])
        .collect();
    let grad_v: Vec<f64> = (0..dim)
        .map(|t| 2.0 * e * du[t] * mask_v[t] + 2.0 * lambda * v_row[t])
        .collect();

    let u_mut = params.users.row_mut(ku);
    for (x, g) in u_mut.iter_mut().zip(&grad_u) {
        *x -= cfg.lr * g;
    }
    let v_mut = params.items.row_mut(ki);
    for (x, g) in v_mut.iter_mut().zip(&grad_v) {
        *x -= cfg.lr * g;
    }
    Ok(loss)
}

/// Minibatch variant of [`step_mf`]: accumulates instead of updating.
#[allow(clippy::too_many_arguments)]
fn grad_mf<R: Rng + ?Sized>(
    params: &ModelParams,
    user: usize,
    item: usize,
    rating: f64,
    cfg: &TrainConfig,
    dim: usize,
    rng: &mut R,
    acc: &mut GradAcc,
) -> Result<f64> {
    let ku = cfg.sse_user.sample(user, rng)?;
    let ki = cfg.sse_item.sample(item, rng)?;
    let mask_u = dropout_mask(dim, cfg.dropout, rng)?;
    let mask_v = dropout_mask(dim, cfg.dropout, rng)?;
    let lambda = cfg.weight_decay;

    let u_row = params.users.row(ku);
    let v_row = params.items.row(ki);
    let du: Vec<f64> = u_row.iter().zip(&mask_u).map(|(x, m)| x * m).collect();
    let dv: Vec<f64> = v_row.iter().zip(&mask_v).map(|(x, m)| x * m).collect();
    let e = dot(&du, &dv) - rating;
    let loss = e * e + lambda * (dot(u_row, u_row) + dot(v_row, v_row));

    let grad_u: Vec<f64> = (0..dim)
        .map(|t| 2.0 * e * dv[t] * mask_u[t] + 2.0 * lambda * u_row[t])
        .collect();
    let grad_v: Vec<f64> = (0..dim)
        .map(|t| 2.0 * e * du[t] * mask_v[t] + 2.0 * lambda * v_row[t])
        .collect();
    accumulate(acc, USER_TABLE, ku, &grad_u);
    accumulate(acc, ITEM_TABLE, ki, &grad_v);
    Ok(loss)
}

/// One BPR step: draw a negative for the original user, replace the user and
/// positive-item indices, mask, update all three touched rows.
fn step_bpr<R: Rng + ?Sized>(
    params: &mut ModelParams,
    user: usize,
    pos_item: usize,
    positives: &[HashSet<usize>],
    cfg: &TrainConfig,
    dim: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut acc = GradAcc::new();
    let loss = grad_bpr(params, user, pos_item, positives, cfg, dim, rng, &mut acc)?;
    for ((table, row), grad) in acc {
        let target = match table {
            USER_TABLE => params.users.row_mut(row),
            _ => params.items.row_mut(row),
        };
        for (t, g) in target.iter_mut().zip(grad) {
            *t -= cfg.lr * g;
        }
    }
    Ok(loss)
}

#[allow(clippy::too_many_arguments)]
fn grad_bpr<R: Rng + ?Sized>(
    params: &ModelParams,
    user: usize,
    pos_item: usize,
    positives: &[HashSet<usize>],
    cfg: &TrainConfig,
    dim: usize,
    rng: &mut R,
    acc: &mut GradAcc,
) -> Result<f64> {
    let neg = sample_negative(&positives[user], params.items.rows(), rng)?;
    let ku = cfg.sse_user.sample(user, rng)?;
    let kpos = cfg.sse_item.sample(pos_item, rng)?;
    let mask_u = dropout_mask(dim, cfg.dropout, rng)?;
    let mask_p = dropout_mask(dim, cfg.dropout, rng)?;
    let mask_n = dropout_mask(dim, cfg.dropout, rng)?;
    let lambda = cfg.weight_decay;

    let u_row = params.users.row(ku);
    let p_row = params.items.row(kpos);
    let n_row = params.items.row(neg);
    let du: Vec<f64> = u_row.iter().zip(&mask_u).map(|(x, m)| x * m).collect();
    let dp: Vec<f64> = p_row.iter().zip(&mask_p).map(|(x, m)| x * m).collect();
    let dn: Vec<f64> = n_row.iter().zip(&mask_n).map(|(x, m)| x * m).collect();

    let x = dot(&du, &dp) - dot(&du, &dn);
    let loss = log1p_exp(-x)
        + lambda * (dot(u_row, u_row) + dot(p_row, p_row) + dot(n_row, n_row));
    let s = inv_1p_exp(x);

    let grad_u: Vec<f64> = (0..dim)
        .map(|t| -s * (dp[t] - dn[t]) * mask_u[t] + 2.0 * lambda * u_row[t])
        .collect();
    let grad_p: Vec<f64> = (0..dim)
        .map(|t| -s * du[t] * mask_p[t] + 2.0 * lambda * p_row[t])
        .collect();
    let grad_n: Vec<f64> = (0..dim)
        .map(|t| s * du[t] * mask_n[t] + 2.0 * lambda * n_row[t])
        .collect();
    accumulate(acc, USER_TABLE, ku, &grad_u);
    accumulate(acc, ITEM_TABLE, kpos, &grad_p);
    accumulate(acc, ITEM_TABLE, neg, &grad_n);
    Ok(loss)
}

/// Number of joint terms the exact objective enumeration would visit.
fn joint_support(cfg: &TrainConfig) -> u128 {
    let su = if cfg.sse_user.is_deterministic() {
        1
    } else {
        cfg.sse_user.num_nodes()
    } as u128;
    let si = if cfg.sse_item.is_deterministic() {
        1
    } else {
        cfg.sse_item.num_nodes()
    } as u128;
    su * si
}

const ENUM_BUDGET: u128 = 1_000_000;

/// The replacement-averaged objective, exactly: for every interaction, sums
/// the per-sample loss over all (k_user, k_item) pairs weighted by the
/// product of transition probabilities. For BPR the per-pair loss is the
/// mean over the user's candidate negatives, matching the trainer's uniform
/// negative draw. Dropout is not part of the objective.
///
/// Intended as a test oracle; errors when the joint support exceeds 10^6
/// terms.
pub fn sse_objective_exact(
    kind: ModelKind,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    params: &ModelParams,
) -> Result<f64> {
    let terms = joint_support(cfg);
    if terms > ENUM_BUDGET {
        return Err(Error::EnumerationBudget {
            terms,
            budget: ENUM_BUDGET,
        });
    }
    let lambda = cfg.weight_decay;
    let positives = match kind {
        ModelKind::Bpr => ds.positives_by_user(),
        ModelKind::Mf => Vec::new(),
    };

    let user_support = |j: usize| -> Vec<usize> {
        if cfg.sse_user.is_deterministic() {
            vec![j]
        } else {
            (0..ds.num_users).collect()
        }
    };
    let item_support = |j: usize| -> Vec<usize> {
        if cfg.sse_item.is_deterministic() {
            vec![j]
        } else {
            (0..ds.num_items).collect()
        }
    };

    let mut total = 0.0;
    for it in &ds.interactions {
        for &ku in &user_support(it.user) {
            let pu = cfg.sse_user.prob(it.user, ku)?;
            if pu == 0.0 {
                continue;
            }
            for &ki in &item_support(it.item) {
                let pi = cfg.sse_item.prob(it.item, ki)?;
                if pi == 0.0 {
                    continue;
                }
                let loss = match kind {
                    ModelKind::Mf => {
                        let (l, _, _) = mf_loss_grad(
                            params.users.row(ku),
                            params.items.row(ki),
                            it.rating,
                            lambda,
                        );
                        l
                    }
                    ModelKind::Bpr => {
                        let cand: Vec<usize> = (0..ds.num_items)
                            .filter(|c| !positives[it.user].contains(c))
                            .collect();
                        if cand.is_empty() {
                            return Err(Error::InvalidArgument(format!(
                                "user {} has no negative candidates",
                                it.user
                            )));
                        }
                        let mut sum = 0.0;
                        for &neg in &cand {
                            let (l, _, _, _) = bpr_loss_grad(
                                params.users.row(ku),
                                params.items.row(ki),
                                params.items.row(neg),
                                lambda,
                            );
                            sum += l;
                        }
                        sum / cand.len() as f64
                    }
                };
                total += pu * pi * loss;
            }
        }
    }
    Ok(total)
}

/// Monte Carlo estimate of the expected per-pass objective under the
/// trainer's replacement draws (and negative draws for BPR), without
/// dropout. Returns (mean, standard error) over `rounds` full passes.
pub fn expected_loss_mc(
    kind: ModelKind,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    params: &ModelParams,
    rounds: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if rounds < 2 {
        return Err(Error::InvalidArgument("need >= 2 rounds for a standard error".into()));
    }
    let lambda = cfg.weight_decay;
    let positives = match kind {
        ModelKind::Bpr => ds.positives_by_user(),
        ModelKind::Mf => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..rounds {
        let mut pass = 0.0;
        for it in &ds.interactions {
            let ku = cfg.sse_user.sample(it.user, &mut rng)?;
            let ki = cfg.sse_item.sample(it.item, &mut rng)?;
            let loss = match kind {
                ModelKind::Mf => {
                    let (l, _, _) =
                        mf_loss_grad(params.users.row(ku), params.items.row(ki), it.rating, lambda);
                    l
                }
                ModelKind::Bpr => {
                    let neg = sample_negative(&positives[it.user], ds.num_items, &mut rng)?;
                    let (l, _, _, _) = bpr_loss_grad(
                        params.users.row(ku),
                        params.items.row(ki),
                        params.items.row(neg),
                        lambda,
                    );
                    l
                }
            };
            pass += loss;
        }
        sum += pass;
        sumsq += pass * pass;
    }
    let mean = sum / rounds as f64;
    let var = (sumsq / rounds as f64 - mean * mean).max(0.0);
    let se = (var / rounds as f64).sqrt();
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, split_holdout, Interaction};

    fn tiny_params(u_rows: Vec<Vec<f64>>, i_rows: Vec<Vec<f64>>) -> ModelParams {
        ModelParams::new(
            EmbeddingTable::from_rows(0, u_rows).unwrap(),
            EmbeddingTable::from_rows(1, i_rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn mf_loss_zero_vectors() {
        let (loss, gu, gv) = mf_loss_grad(&[0.0, 0.0], &[0.0, 0.0], 1.0, 0.0);
        assert_eq!(loss, 1.0);
        assert_eq!(gu, vec![0.0, 0.0]);
        assert_eq!(gv, vec![0.0, 0.0]);
    }

    #[test]
    fn mf_loss_hand_case() {
        let (loss, gu, gv) = mf_loss_grad(&[1.0, 0.0], &[1.0, 0.0], 0.0, 0.0);
        assert_eq!(loss, 1.0);
        assert_eq!(gu, vec![2.0, 0.0]);
        assert_eq!(gv, vec![2.0, 0.0]);
    }

    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|t| {
                let mut plus = x.to_vec();
                plus[t] += h;
                let mut minus = x.to_vec();
                minus[t] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], context: &str) {
        for (a, n) in analytic.iter().zip(numeric) {
            let scale = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() / scale < 1e-4,
                "{context}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn mf_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r = rng.random_range(1.0..5.0);
            let lambda = rng.random_range(0.0..0.5);
            let (_, gu, gv) = mf_loss_grad(&u, &v, r, lambda);
            let nu = finite_diff(&|x| mf_loss_grad(x, &v, r, lambda).0, &u);
            let nv = finite_diff(&|x| mf_loss_grad(&u, x, r, lambda).0, &v);
            assert_close(&gu, &nu, "mf grad_u");
            assert_close(&gv, &nv, "mf grad_v");
        }
    }

    #[test]
    fn bpr_equal_items_gives_ln2() {
        let u = vec![0.3, -0.7];
        let v = vec![1.0, 2.0];
        let (loss, _, _, _) = bpr_loss_grad(&u, &v, &v, 0.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let lambda = 0.1;
        let (loss_wd, _, _, _) = bpr_loss_grad(&u, &v, &v, lambda);
        let norms = dot(&u, &u) + 2.0 * dot(&v, &v);
        assert!((loss_wd - (std::f64::consts::LN_2 + lambda * norms)).abs() < 1e-12);
    }

    #[test]
    fn bpr_saturated_margin_is_stable() {
        // x = 50: loss and data-gradient magnitudes collapse below 1e-20
        // with no overflow or NaN.
        let u = vec![1.0, 0.0];
        let v_pos = vec![50.0, 0.0];
        let v_neg = vec![0.0, 0.0];
        let (loss, gu, gp, gn) = bpr_loss_grad(&u, &v_pos, &v_neg, 0.0);
        assert!(loss.is_finite() && loss > 0.0 && loss < 1e-20, "loss {loss}");
        for g in [&gu, &gp, &gn] {
            let norm = dot(g, g).sqrt();
            assert!(norm.is_finite() && norm < 1e-20, "norm {norm}");
        }
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lambda = rng.random_range(0.0..0.3);
            let (_, gu, gp, gn) = bpr_loss_grad(&u, &p, &q, lambda);
            assert_close(&gu, &finite_diff(&|x| bpr_loss_grad(x, &p, &q, lambda).0, &u), "bpr u");
            assert_close(&gp, &finite_diff(&|x| bpr_loss_grad(&u, x, &q, lambda).0, &p), "bpr pos");
            assert_close(&gn, &finite_diff(&|x| bpr_loss_grad(&u, &p, x, lambda).0, &q), "bpr neg");
        }
    }

    #[test]
    fn glr_hand_case() {
        let table = EmbeddingTable::from_rows(1, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let graph = KnowledgeGraph::from_edges(2, &[(0, 1)]).unwrap();
        let (penalty, grad) = glr_penalty_grad(&table, &graph, 1.0).unwrap();
        assert_eq!(penalty, 2.0);
        assert_eq!(grad[0], vec![2.0, -2.0]);
        assert_eq!(grad[1], vec![-2.0, 2.0]);
    }

    #[test]
    fn glr_equal_rows_and_edgeless_are_zero() {
        let table = EmbeddingTable::from_rows(1, vec![vec![0.5, 0.5]; 4]).unwrap();
        let graph = KnowledgeGraph::complete(4);
        let (penalty, grad) = glr_penalty_grad(&table, &graph, 2.0).unwrap();
        assert_eq!(penalty, 0.0);
        assert!(grad.iter().all(|r| r.iter().all(|&g| g == 0.0)));

        let table2 = EmbeddingTable::init(1, 4, 3, 0.5, 0).unwrap();
        let (p2, _) = glr_penalty_grad(&table2, &KnowledgeGraph::edgeless(4), 2.0).unwrap();
        assert_eq!(p2, 0.0);
    }

    #[test]
    fn glr_rejects_size_mismatch() {
        let table = EmbeddingTable::init(1, 4, 2, 0.1, 0).unwrap();
        let graph = KnowledgeGraph::edgeless(5);
        assert!(glr_penalty_grad(&table, &graph, 1.0).is_err());
    }

    #[test]
    fn glr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let graph = KnowledgeGraph::from_edges(5, &[(0, 1), (1, 2), (3, 4), (0, 4)]).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let table = EmbeddingTable::from_rows(1, rows.clone()).unwrap();
        let beta = 0.7;
        let (_, grad) = glr_penalty_grad(&table, &graph, beta).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            for t in 0..3 {
                let mut plus = rows.clone();
                plus[j][t] += h;
                let mut minus = rows.clone();
                minus[j][t] -= h;
                let fp = glr_penalty_grad(&EmbeddingTable::from_rows(1, plus).unwrap(), &graph, beta)
                    .unwrap()
                    .0;
                let fm =
                    glr_penalty_grad(&EmbeddingTable::from_rows(1, minus).unwrap(), &graph, beta)
                        .unwrap()
                        .0;
                let numeric = (fp - fm) / (2.0 * h);
                let scale = grad[j][t].abs().max(numeric.abs()).max(1e-3);
                assert!((grad[j][t] - numeric).abs() / scale < 1e-4);
            }
        }
    }

    #[test]
    fn negative_sampling_forced_and_exhausted() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let positives: HashSet<usize> = [0, 1, 2].into_iter().collect();
        for _ in 0..50 {
            assert_eq!(sample_negative(&positives, 4, &mut rng).unwrap(), 3);
        }
        let all: HashSet<usize> = (0..4).collect();
        assert!(sample_negative(&all, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_init_single_interaction_is_fixed_point() {
        let ds = InteractionDataset::new(
            vec![Interaction { user: 0, item: 0, rating: 3.0, timestamp: None }],
            1,
            1,
            1.0,
            5.0,
        )
        .unwrap();
        let split = Split {
            train: ds.clone(),
            test: ds,
        };
        let params = tiny_params(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]]);
        let mut cfg = TrainConfig::plain(1, 1, 0).unwrap();
        cfg.lr = 0.1;
        let (out, _) = train(ModelKind::Mf, &split, &cfg, params.clone()).unwrap();
        assert_eq!(out.users.values(), params.users.values());
        assert_eq!(out.items.values(), params.items.values());
    }

    #[test]
    fn train_is_seed_deterministic() {
        let (ds, _) = gen_synthetic(30, 20, 3, 2, 8, 0.4, 5).unwrap();
        let split = split_holdout(&ds, 0.25, 1).unwrap();
        let params = ModelParams::init(30, 20, 4, 0.1, 2).unwrap();
        let mut cfg = TrainConfig::plain(30, 20, 9).unwrap();
        cfg.epochs = 3;
        cfg.sse_user = TransitionModel::uniform(30, 0.1).unwrap();
        cfg.sse_item = TransitionModel::uniform(20, 0.1).unwrap();
        cfg.dropout = 0.2;
        let (a, ra) = train(ModelKind::Mf, &split, &cfg, params.clone()).unwrap();
        let (b, rb) = train(ModelKind::Mf, &split, &cfg, params).unwrap();
        assert_eq!(a.users.values(), b.users.values());
        assert_eq!(a.items.values(), b.items.values());
        let key = |r: &TrainReport| -> Vec<(usize, f64, f64)> {
            r.records.iter().map(|e| (e.epoch, e.train_loss, e.metric)).collect()
        };
        assert_eq!(key(&ra), key(&rb));
    }

    #[test]
    fn bpr_training_improves_ranking() {
        // Implicit positives = highly-rated interactions, so item choice
        // reflects preference and ranking is learnable.
        let (full, _) = gen_synthetic(100, 60, 3, 2, 30, 0.3, 21).unwrap();
        let liked: Vec<Interaction> = full
            .interactions
            .iter()
            .filter(|it| it.rating >= 3.4)
            .cloned()
            .collect();
        let ds = InteractionDataset::new(liked, 100, 60, 1.0, 5.0).unwrap();
        let split = split_holdout(&ds, 0.25, 2).unwrap();
        let params = ModelParams::init(100, 60, 6, 0.1, 3).unwrap();
        let before = eval::precision_at_k(&params, &split.train, &split.test, &[10]).unwrap()[&10];
        let mut cfg = TrainConfig::plain(100, 60, 4).unwrap();
        cfg.lr = 0.1;
        cfg.epochs = 120;
        let (_, report) = train(ModelKind::Bpr, &split, &cfg, params).unwrap();
        let after = report.records.last().unwrap().metric;
        assert!(
            after > before + 0.04,
            "p@10 before {before}, after {after}"
        );
    }

    #[test]
    fn objective_identity_equals_plain_empirical_risk() {
        let (ds, _) = gen_synthetic(6, 5, 2, 2, 3, 0.2, 7).unwrap();
        let params = ModelParams::init(6, 5, 3, 0.1, 1).unwrap();
        let mut cfg = TrainConfig::plain(6, 5, 0).unwrap();
        cfg.weight_decay = 0.05;
        let exact = sse_objective_exact(ModelKind::Mf, &ds, &cfg, &params).unwrap();
        let mut direct = 0.0;
        for it in &ds.interactions {
            let (l, _, _) = mf_loss_grad(
                params.users.row(it.user),
                params.items.row(it.item),
                it.rating,
                cfg.weight_decay,
            );
            direct += l;
        }
        assert!((exact - direct).abs() < 1e-12);
    }

    #[test]
    fn objective_hand_enumerated_2x2() {
        // Uniform transitions p_u=0.2, p_i=0.4 over two users/items,
        // lambda=0.5; the four weighted terms per interaction were expanded
        // by hand and total 10.44.
        let ds = InteractionDataset::new(
            vec![
                Interaction { user: 0, item: 0, rating: 1.0, timestamp: None },
                Interaction { user: 1, item: 1, rating: 3.0, timestamp: None },
            ],
            2,
            2,
            1.0,
            3.0,
        )
        .unwrap();
        let params = tiny_params(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 1.0], vec![2.0, 0.0]],
        );
        let mut cfg = TrainConfig::plain(2, 2, 0).unwrap();
        cfg.weight_decay = 0.5;
        cfg.sse_user = TransitionModel::uniform(2, 0.2).unwrap();
        cfg.sse_item = TransitionModel::uniform(2, 0.4).unwrap();
        let exact = sse_objective_exact(ModelKind::Mf, &ds, &cfg, &params).unwrap();
        assert!((exact - 10.44).abs() < 1e-12, "exact {exact}");
    }

    #[test]
    fn objective_monte_carlo_agrees_with_exact() {
        let (ds, _) = gen_synthetic(4, 4, 2, 2, 2, 0.3, 3).unwrap();
        let params = ModelParams::init(4, 4, 3, 0.2, 5).unwrap();
        let mut cfg = TrainConfig::plain(4, 4, 0).unwrap();
        cfg.sse_user = TransitionModel::uniform(4, 0.3).unwrap();
        cfg.sse_item = TransitionModel::uniform(4, 0.5).unwrap();
        cfg.weight_decay = 0.1;
        let exact = sse_objective_exact(ModelKind::Mf, &ds, &cfg, &params).unwrap();
        let (mc, se) = expected_loss_mc(ModelKind::Mf, &ds, &cfg, &params, 20_000, 8).unwrap();
        assert!(
            (mc - exact).abs() < 4.0 * se,
            "exact {exact}, mc {mc} +- {se}"
        );
    }

    #[test]
    fn objective_bpr_monte_carlo_agrees_with_exact() {
        let (ds, _) = gen_synthetic(4, 5, 2, 2, 2, 0.3, 9).unwrap();
        let params = ModelParams::init(4, 5, 3, 0.3, 6).unwrap();
        let mut cfg = TrainConfig::plain(4, 5, 0).unwrap();
        cfg.sse_user = TransitionModel::uniform(4, 0.25).unwrap();
        cfg.sse_item = TransitionModel::uniform(5, 0.4).unwrap();
        let exact = sse_objective_exact(ModelKind::Bpr, &ds, &cfg, &params).unwrap();
        let (mc, se) = expected_loss_mc(ModelKind::Bpr, &ds, &cfg, &params, 20_000, 4).unwrap();
        assert!(
            (mc - exact).abs() < 4.0 * se,
            "exact {exact}, mc {mc} +- {se}"
        );
    }

    #[test]
    fn objective_rejects_oversized_enumeration() {
        let ds = InteractionDataset::new(
            vec![Interaction { user: 0, item: 0, rating: 3.0, timestamp: None }],
            2000,
            2000,
            1.0,
            5.0,
        )
        .unwrap();
        let params = ModelParams::init(2000, 2000, 2, 0.1, 0).unwrap();
        let mut cfg = TrainConfig::plain(2000, 2000, 0).unwrap();
        cfg.sse_user = TransitionModel::uniform(2000, 0.1).unwrap();
        cfg.sse_item = TransitionModel::uniform(2000, 0.1).unwrap();
        assert!(matches!(
            sse_objective_exact(ModelKind::Mf, &ds, &cfg, &params),
            Err(Error::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn train_rejects_mismatched_shapes() {
        let (ds, _) = gen_synthetic(10, 8, 2, 2, 3, 0.2, 1).unwrap();
        let split = split_holdout(&ds, 0.3, 0).unwrap();
        let params = ModelParams::init(10, 9, 4, 0.1, 0).unwrap();
        let cfg = TrainConfig::plain(10, 8, 0).unwrap();
        assert!(train(ModelKind::Mf, &split, &cfg, params).is_err());

        let params_ok = ModelParams::init(10, 8, 4, 0.1, 0).unwrap();
        let mut bad_cfg = TrainConfig::plain(10, 8, 0).unwrap();
        bad_cfg.glr_beta = 0.1;
        assert!(train(ModelKind::Mf, &split, &bad_cfg, params_ok).is_err());
    }

    #[test]
    fn minibatch_training_runs_and_is_deterministic() {
        let (ds, _) = gen_synthetic(20, 15, 3, 3, 6, 0.4, 2).unwrap();
        let split = split_holdout(&ds, 0.2, 3).unwrap();
        let params = ModelParams::init(20, 15, 4, 0.1, 4).unwrap();
        let mut cfg = TrainConfig::plain(20, 15, 5).unwrap();
        cfg.minibatch = 8;
        cfg.epochs = 2;
        let (a, _) = train(ModelKind::Mf, &split, &cfg, params.clone()).unwrap();
        let (b, _) = train(ModelKind::Mf, &split, &cfg, params).unwrap();
        assert_eq!(a.users.values(), b.users.values());
    }
}
