//! Interaction data: TSV ingestion, id remapping, splits, and synthetic data.
//!
//! Raw user/item ids are remapped to contiguous indices through [`IdMap`] so
//! embedding tables can be plain dense matrices. Explicit ratings are kept as
//! `f64`; the same triples double as implicit-feedback positives (any
//! interaction counts as a positive pair).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;

/// One (user, item, rating) triple with an optional timestamp.
///
/// Timestamps are carried through loading and export but nothing in the
/// trainers reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// A set of interactions over contiguous user and item index spaces.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// Lower bound of the rating scale.
    pub rating_min: f64,
    /// Upper bound of the rating scale.
    pub rating_max: f64,
}

impl InteractionDataset {
    /// Builds a dataset, validating the index and rating-bound invariants.
    pub fn new(
        interactions: Vec<Interaction>,
        num_users: usize,
        num_items: usize,
        rating_min: f64,
        rating_max: f64,
    ) -> Result<Self> {
        if num_users == 0 || num_items == 0 {
            return Err(Error::InvalidArgument(
                "num_users and num_items must be >= 1".into(),
            ));
        }
        if !(rating_min <= rating_max) {
            return Err(Error::InvalidArgument(format!(
                "rating_min {rating_min} > rating_max {rating_max}"
            )));
        }
        for (i, it) in interactions.iter().enumerate() {
            if it.user >= num_users {
                return Err(Error::IndexOutOfRange {
                    index: it.user,
                    size: num_users,
                });
            }
            if it.item >= num_items {
                return Err(Error::IndexOutOfRange {
                    index: it.item,
                    size: num_items,
                });
            }
            if !(rating_min <= it.rating && it.rating <= rating_max) {
                return Err(Error::InvalidArgument(format!(
                    "interaction {i}: rating {} outside [{rating_min}, {rating_max}]",
                    it.rating
                )));
            }
        }
        Ok(Self {
            interactions,
            num_users,
            num_items,
            rating_min,
            rating_max,
        })
    }

    /// Builds a dataset taking the rating bounds from the data itself.
    pub fn from_interactions(
        interactions: Vec<Interaction>,
        num_users: usize,
        num_items: usize,
    ) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::EmptyInput("no interactions".into()));
        }
        let rating_min = interactions.iter().map(|i| i.rating).fold(f64::INFINITY, f64::min);
        let rating_max = interactions
            .iter()
            .map(|i| i.rating)
            .fold(f64::NEG_INFINITY, f64::max);
        Self::new(interactions, num_users, num_items, rating_min, rating_max)
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Item indices interacted with, per user. Membership queries only;
    /// iteration order of the sets is unspecified.
    pub fn positives_by_user(&self) -> Vec<HashSet<usize>> {
        let mut sets = vec![HashSet::new(); self.num_users];
        for it in &self.interactions {
            sets[it.user].insert(it.item);
        }
        sets
    }
}

/// Bijective map between raw string ids and contiguous indices.
#[derive(Debug, Clone, Default)]
pub struct IdMap {
    raw_to_index: HashMap<String, usize>,
    index_to_raw: Vec<String>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index for `raw`, inserting it if unseen.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&idx) = self.raw_to_index.get(raw) {
            return idx;
        }
        let idx = self.index_to_raw.len();
        self.raw_to_index.insert(raw.to_string(), idx);
        self.index_to_raw.push(raw.to_string());
        idx
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.raw_to_index.get(raw).copied()
    }

    pub fn raw(&self, index: usize) -> Option<&str> {
        self.index_to_raw.get(index).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.index_to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_raw.is_empty()
    }

    /// Persists the map as a two-column CSV (raw_id, index).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "raw_id,index").map_err(|e| Error::io(path, e))?;
        for (idx, raw) in self.index_to_raw.iter().enumerate() {
            writeln!(w, "{raw},{idx}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Reads a CSV written by [`IdMap::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (lineno0, line) in reader.lines().enumerate() {
            let lineno = lineno0 + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if lineno == 1 || line.trim().is_empty() {
                continue;
            }
            let (raw, idx) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::parse(path, lineno, "expected raw_id,index"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad index {idx:?}")))?;
            rows.push((raw.to_string(), idx));
        }
        rows.sort_by_key(|(_, idx)| *idx);
        let mut map = IdMap::new();
        for (expect, (raw, idx)) in rows.into_iter().enumerate() {
            if idx != expect {
                return Err(Error::InvalidArgument(format!(
                    "id map {} has non-contiguous index {idx}",
                    path.display()
                )));
            }
            map.intern(&raw);
        }
        Ok(map)
    }
}

/// Loads a TSV whose raw ids must already be present in the given maps
/// (e.g. evaluation data for a trained model). Unknown ids are errors
/// naming the line; the resulting dataset uses the maps' table sizes.
pub fn load_tsv_with_maps(
    path: &Path,
    schema: TsvSchema,
    users: &IdMap,
    items: &IdMap,
) -> Result<InteractionDataset> {
    let (ds, raw_users, raw_items) = load_tsv(path, schema)?;
    let mut interactions = Vec::with_capacity(ds.len());
    for it in &ds.interactions {
        let uraw = raw_users.raw(it.user).expect("index from loader");
        let iraw = raw_items.raw(it.item).expect("index from loader");
        let user = users.get(uraw).ok_or_else(|| {
            Error::InvalidArgument(format!("{}: unknown user id {uraw:?}", path.display()))
        })?;
        let item = items.get(iraw).ok_or_else(|| {
            Error::InvalidArgument(format!("{}: unknown item id {iraw:?}", path.display()))
        })?;
        interactions.push(Interaction {
            user,
            item,
            rating: it.rating,
            timestamp: it.timestamp,
        });
    }
    InteractionDataset::from_interactions(interactions, users.len(), items.len())
}

/// Disjoint train/test partition of one dataset. Both halves share the
/// parent's index spaces and rating scale.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: InteractionDataset,
    pub test: InteractionDataset,
}

/// Column positions for [`load_tsv`]. Defaults to the MovieLens-style
/// user, item, rating, timestamp order.
#[derive(Debug, Clone, Copy)]
pub struct TsvSchema {
    pub user_col: usize,
    pub item_col: usize,
    pub rating_col: usize,
    /// When present, a missing trailing column on a line is treated as no
    /// timestamp rather than an error.
    pub timestamp_col: Option<usize>,
}

impl Default for TsvSchema {
    fn default() -> Self {
        Self {
            user_col: 0,
            item_col: 1,
            rating_col: 2,
            timestamp_col: Some(3),
        }
    }
}

/// Loads a UTF-8 TSV of interactions. Lines starting with `#` are comments;
/// blank lines are skipped. Duplicate (user, item) rows are kept as separate
/// interactions. Rating bounds are computed from the data.
pub fn load_tsv(
    path: &Path,
    schema: TsvSchema,
) -> Result<(InteractionDataset, IdMap, IdMap)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);

    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut interactions = Vec::new();

    let required = schema.user_col.max(schema.item_col).max(schema.rating_col) + 1;

    for (lineno0, line) in reader.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < required {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected at least {required} tab-separated fields, found {}", fields.len()),
            ));
        }
        let rating: f64 = fields[schema.rating_col].trim().parse().map_err(|_| {
            Error::parse(
                path,
                lineno,
                format!("non-numeric rating {:?}", fields[schema.rating_col]),
            )
        })?;
        if !rating.is_finite() {
            return Err(Error::parse(path, lineno, format!("non-finite rating {rating}")));
        }
        let timestamp = match schema.timestamp_col {
            Some(col) if col < fields.len() => {
                let raw = fields[col].trim();
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse::<i64>().map_err(|_| {
                        Error::parse(path, lineno, format!("non-numeric timestamp {raw:?}"))
                    })?)
                }
            }
            _ => None,
        };
        let user = users.intern(fields[schema.user_col].trim());
        let item = items.intern(fields[schema.item_col].trim());
        interactions.push(Interaction {
            user,
            item,
            rating,
            timestamp,
        });
    }

    if interactions.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no data lines", path.display())));
    }
    let ds = InteractionDataset::from_interactions(interactions, users.len(), items.len())?;
    Ok((ds, users, items))
}

/// Writes interactions back out as TSV, mapping indices through the id maps.
/// `load_tsv(export_tsv(..))` reproduces the interaction multiset exactly.
pub fn export_tsv(
    ds: &InteractionDataset,
    users: &IdMap,
    items: &IdMap,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for it in &ds.interactions {
        let u = users.raw(it.user).ok_or(Error::IndexOutOfRange {
            index: it.user,
            size: users.len(),
        })?;
        let i = items.raw(it.item).ok_or(Error::IndexOutOfRange {
            index: it.item,
            size: items.len(),
        })?;
        match it.timestamp {
            Some(t) => writeln!(w, "{u}\t{i}\t{}\t{t}", it.rating),
            None => writeln!(w, "{u}\t{i}\t{}", it.rating),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Splits interactions into train/test with `round(test_fraction * n)` test
/// rows. Deterministic under `seed`. Users never lose their last train
/// interaction to the test side, so any user seen in test is also seen in
/// train; users with a single interaction always land in train.
pub fn split_holdout(ds: &InteractionDataset, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "dataset must have at least 2 interactions to split".into(),
        ));
    }

    let target = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut train_count = vec![0usize; ds.num_users];
    for it in &ds.interactions {
        train_count[it.user] += 1;
    }

    let mut in_test = vec![false; n];
    let mut taken = 0;
    for &idx in &order {
        if taken == target {
            break;
        }
        let user = ds.interactions[idx].user;
        if train_count[user] > 1 {
            in_test[idx] = true;
            train_count[user] -= 1;
            taken += 1;
        }
    }

    let mut train = Vec::with_capacity(n - taken);
    let mut test = Vec::with_capacity(taken);
    for (idx, it) in ds.interactions.iter().enumerate() {
        if in_test[idx] {
            test.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }

    let make = |ints: Vec<Interaction>| InteractionDataset {
        interactions: ints,
        num_users: ds.num_users,
        num_items: ds.num_items,
        rating_min: ds.rating_min,
        rating_max: ds.rating_max,
    };
    Ok(Split {
        train: make(train),
        test: make(test),
    })
}

/// Ground-truth factors behind a synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub cluster_of_item: Vec<usize>,
}

/// Spread of item factors around their cluster center: small enough that
/// same-cluster items stay similar, large enough that they remain distinct
/// (tying them exactly together costs real accuracy).
const ITEM_DEVIATION_SD: f64 = 0.25;

/// Generates a clustered low-rank ratings dataset together with the item
/// graph that connects exactly the same-cluster item pairs.
///
/// Item factors are a shared cluster center plus a small per-item deviation;
/// user factors are independent. Ratings are `dot(u, v)` plus Gaussian noise,
/// clipped to `[1, 5]`. Factor entries are drawn uniformly from a positive
/// range chosen so raw dot products mostly land inside the rating scale.
/// Deterministic under `seed`.
pub fn gen_synthetic(
    num_users: usize,
    num_items: usize,
    d_true: usize,
    num_clusters: usize,
    ratings_per_user: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(InteractionDataset, KnowledgeGraph)> {
    let (ds, graph, _) = gen_synthetic_with_truth(
        num_users,
        num_items,
        d_true,
        num_clusters,
        ratings_per_user,
        noise_sd,
        seed,
    )?;
    Ok((ds, graph))
}

/// [`gen_synthetic`] variant that also returns the generating factors, for
/// oracle checks against the true model.
pub fn gen_synthetic_with_truth(
    num_users: usize,
    num_items: usize,
    d_true: usize,
    num_clusters: usize,
    ratings_per_user: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(InteractionDataset, KnowledgeGraph, SyntheticTruth)> {
    if num_users == 0 || num_items == 0 || d_true == 0 || num_clusters == 0 || ratings_per_user == 0
    {
        return Err(Error::InvalidArgument("all counts must be >= 1".into()));
    }
    if num_clusters > num_items {
        return Err(Error::InvalidArgument(format!(
            "num_clusters {num_clusters} > num_items {num_items}"
        )));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_sd must be >= 0, got {noise_sd}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Entry range tuned so a d_true-dimensional dot product centers near the
    // middle of the [1, 5] scale; see module tests for the resulting spread.
    let entry = Uniform::new(0.2, 1.6).expect("static bounds");

    // Scale centers so E[dot] stays put as d_true varies.
    let dim_scale = (4.0 / d_true as f64).sqrt();

    let mut centers = Vec::with_capacity(num_clusters);
    for _ in 0..num_clusters {
        let c: Vec<f64> = (0..d_true).map(|_| entry.sample(&mut rng) * dim_scale).collect();
        centers.push(c);
    }

    let cluster_of_item: Vec<usize> = (0..num_items).map(|j| j % num_clusters).collect();
    let mut item_factors = Vec::with_capacity(num_items);
    for j in 0..num_items {
        let c = &centers[cluster_of_item[j]];
        let v: Vec<f64> = c
            .iter()
            .map(|&cv| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cv + ITEM_DEVIATION_SD * z
            })
            .collect();
        item_factors.push(v);
    }

    let mut user_factors = Vec::with_capacity(num_users);
    for _ in 0..num_users {
        let u: Vec<f64> = (0..d_true).map(|_| entry.sample(&mut rng) * dim_scale).collect();
        user_factors.push(u);
    }

    let per_user = ratings_per_user.min(num_items);
    let mut interactions = Vec::with_capacity(num_users * per_user);
    let mut item_pool: Vec<usize> = (0..num_items).collect();
    for (u, uf) in user_factors.iter().enumerate() {
        item_pool.shuffle(&mut rng);
        for &j in item_pool.iter().take(per_user) {
            let dot: f64 = uf.iter().zip(&item_factors[j]).map(|(a, b)| a * b).sum();
            let z: f64 = StandardNormal.sample(&mut rng);
            let rating = (dot + noise_sd * z).clamp(1.0, 5.0);
            interactions.push(Interaction {
                user: u,
                item: j,
                rating,
                timestamp: None,
            });
        }
    }

    let mut edges = Vec::new();
    for c in 0..num_clusters {
        let members: Vec<usize> = (0..num_items).filter(|&j| cluster_of_item[j] == c).collect();
        for (a, &j) in members.iter().enumerate() {
            for &k in &members[a + 1..] {
                edges.push((j, k));
            }
        }
    }
    let graph = KnowledgeGraph::from_edges(num_items, &edges)?;

    let ds = InteractionDataset::new(interactions, num_users, num_items, 1.0, 5.0)?;
    Ok((
        ds,
        graph,
        SyntheticTruth {
            user_factors,
            item_factors,
            cluster_of_item,
        },
    ))
}
