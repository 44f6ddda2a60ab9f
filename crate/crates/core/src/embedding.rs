//! Trainable embedding tables: seeded Gaussian init, row access, inverted
//! dropout, and CSV export/import.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default init scale: small-norm rows keep initial predictions near zero.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

/// An `N x d` table of trainable row vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table_id: usize,
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingTable {
    /// Entries i.i.d. Gaussian(0, scale^2), deterministic under `seed`.
    pub fn init(table_id: usize, rows: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidArgument("table needs rows >= 1 and dim >= 1".into()));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..rows * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Ok(Self {
            table_id,
            rows,
            dim,
            values,
        })
    }

    pub fn from_rows(table_id: usize, rows_data: Vec<Vec<f64>>) -> Result<Self> {
        let rows = rows_data.len();
        if rows == 0 {
            return Err(Error::InvalidArgument("table needs rows >= 1".into()));
        }
        let dim = rows_data[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("table needs dim >= 1".into()));
        }
        let mut values = Vec::with_capacity(rows * dim);
        for (i, r) in rows_data.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {dim}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {i} has a non-finite entry")));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            table_id,
            rows,
            dim,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// The full trainable state of a two-table dot-product model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
}

impl ModelParams {
    pub fn new(users: EmbeddingTable, items: EmbeddingTable) -> Result<Self> {
        if users.dim() != items.dim() {
            return Err(Error::ShapeMismatch(format!(
                "user dim {} != item dim {} for a dot-product model",
                users.dim(),
                items.dim()
            )));
        }
        Ok(Self { users, items })
    }

    /// Seeded init of both tables. The item table uses a distinct stream
    /// derived from `seed` so the two tables are independent.
    pub fn init(
        num_users: usize,
        num_items: usize,
        dim: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let users = EmbeddingTable::init(0, num_users, dim, scale, seed)?;
        let items = EmbeddingTable::init(1, num_items, dim, scale, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Self::new(users, items)
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        dot(self.users.row(user), self.items.row(item))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverted dropout: zero each coordinate with probability `p_d`, scale
/// survivors by `1/(1-p_d)`. `p_d = 0` returns the input unchanged without
/// consuming randomness, so evaluation paths that never construct an rng
/// cannot accidentally drop coordinates.
pub fn apply_dropout<R: Rng + ?Sized>(vec: &[f64], p_d: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mask = dropout_mask(vec.len(), p_d, rng)?;
    Ok(vec.iter().zip(&mask).map(|(v, m)| v * m).collect())
}

/// Per-coordinate factors in {0, 1/(1-p_d)}. The same mask scales the
/// gradient on the backward pass. All-ones (no rng draw) when `p_d = 0`.
pub fn dropout_mask<R: Rng + ?Sized>(dim: usize, p_d: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p_d) {
        return Err(Error::InvalidArgument(format!("dropout must lie in [0, 1), got {p_d}")));
    }
    if p_d == 0.0 {
        return Ok(vec![1.0; dim]);
    }
    let keep_scale = 1.0 / (1.0 - p_d);
    Ok((0..dim)
        .map(|_| {
            if rng.random::<f64>() < p_d {
                0.0
            } else {
                keep_scale
            }
        })
        .collect())
}

/// Writes both tables as CSV with header `table,index,v_0..v_{d-1}`.
/// Table column values are `user` and `item`.
pub fn write_params_csv(params: &ModelParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let dim = params.dim();
    let header: Vec<String> = (0..dim).map(|t| format!("v_{t}")).collect();
    writeln!(w, "table,index,{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (name, table) in [("user", &params.users), ("item", &params.items)] {
        for j in 0..table.rows() {
            let vals: Vec<String> = table.row(j).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{name},{j},{}", vals.join(",")).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Reads a CSV written by [`write_params_csv`].
pub fn read_params_csv(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut users: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut items: Vec<(usize, Vec<f64>)> = Vec::new();
    for (lineno0, line) in reader.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 1 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() < 3 {
            return Err(Error::parse(path, lineno, "expected table,index,v_0.. row"));
        }
        let index: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad index {:?}", fields[1])))?;
        let mut vals = Vec::with_capacity(fields.len() - 2);
        for raw in &fields[2..] {
            vals.push(raw.parse::<f64>().map_err(|_| {
                Error::parse(path, lineno, format!("bad value {raw:?}"))
            })?);
        }
        match fields[0] {
            "user" => users.push((index, vals)),
            "item" => items.push((index, vals)),
            other => {
                return Err(Error::parse(path, lineno, format!("unknown table {other:?}")))
            }
        }
    }
    let build = |mut rows: Vec<(usize, Vec<f64>)>, table_id: usize| -> Result<EmbeddingTable> {
        rows.sort_by_key(|(i, _)| *i);
        for (expect, (got, _)) in rows.iter().enumerate() {
            if *got != expect {
                return Err(Error::InvalidArgument(format!(
                    "non-contiguous indices in {path:?}: expected {expect}, got {got}",
                    path = path.display()
                )));
            }
        }
        EmbeddingTable::from_rows(table_id, rows.into_iter().map(|(_, v)| v).collect())
    };
    ModelParams::new(build(users, 0)?, build(items, 1)?)
}
