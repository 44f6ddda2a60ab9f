//! The `sse` experiment runner.
//!
//! Subcommands: `gen`, `train`, `sweep`, `eval`, `pca`, `radsim`. Every run
//! writes its outputs plus a `config.txt` sidecar (the effective settings
//! after defaults) into `--out-dir`, and is byte-reproducible from
//! (flags, seed). Settings may also come from a flat `key=value` file via
//! `--config`; explicit flags win over the file.
//!
//! Exit codes: 0 success, 2 configuration error, 1 runtime failure.

use std::collections::HashMap;
use std::fmt::Display;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::dataset::{
    self, gen_synthetic, load_tsv, load_tsv_with_maps, split_holdout, IdMap, InteractionDataset,
    TsvSchema,
};
use crate::embedding::{read_params_csv, write_params_csv, ModelParams, DEFAULT_INIT_SCALE};
use crate::error::Error;
use crate::eval::{self, write_pca_csv};
use crate::graph::{load_edge_list, KnowledgeGraph, TransitionModel};
use crate::models::{train, write_report_csv, ModelKind, TrainConfig};
use crate::theory::{rademacher_sweep, write_radsim_csv, RadSimConfig, RadSimTransitions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "sse",
    version,
    about = "Train and probe embedding recommenders with stochastic embedding replacement"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a clustered synthetic ratings dataset and its item graph.
    Gen(GenArgs),
    /// Train an MF or BPR model with any regularizer combination.
    Train(TrainArgs),
    /// Run a grid of training configurations across seeds.
    Sweep(SweepArgs),
    /// Evaluate exported embeddings on held-out data.
    Eval(EvalArgs),
    /// Project an exported embedding table with PCA.
    Pca(PcaArgs),
    /// Sample the signed replacement-averaged loss sums over a p0 grid.
    Radsim(RadsimArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    d_true: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    ratings_per_user: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// mf or bpr.
    #[arg(long)]
    model: Option<String>,
    /// Comma-combinable: none, sse-se, sse-graph, glr, dropout.
    #[arg(long)]
    mode: Option<String>,
    /// Ratings TSV (user, item, rating[, timestamp]).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Item graph edge list (raw ids); required by sse-graph and glr modes.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Seed for the train/test split (kept separate so sweeps share splits).
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    p0_user: Option<f64>,
    #[arg(long)]
    p0_item: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    glr_beta: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Record wall-clock seconds in the report (breaks byte reproducibility).
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated mode sets to sweep, e.g. "none,sse-se" or
    /// "sse-se+dropout" (use + inside a combined mode).
    #[arg(long)]
    modes: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    p0_list: Option<String>,
    #[arg(long)]
    rho_list: Option<String>,
    #[arg(long)]
    weight_decay_list: Option<String>,
    #[arg(long)]
    dropout_list: Option<String>,
    #[arg(long)]
    glr_beta_list: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embeddings CSV written by `train`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    user_idmap: Option<PathBuf>,
    #[arg(long)]
    item_idmap: Option<PathBuf>,
    /// Evaluation TSV (held-out interactions).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training TSV; required for precision@k candidate exclusion.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// rmse, patk, or both.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// user or item.
    #[arg(long)]
    table: Option<String>,
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RadsimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    user_idmap: Option<PathBuf>,
    #[arg(long)]
    item_idmap: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// uniform, uniform-items, or graph.
    #[arg(long)]
    transitions: Option<String>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    p0_grid: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    mc_inner: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// A failed run: which exit code, and what to print on stderr.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn runtime(err: Error) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: err.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        match err {
            Error::Config(_) | Error::InvalidArgument(_) => Failure {
                code: EXIT_CONFIG,
                message: err.to_string(),
            },
            other => Failure::runtime(other),
        }
    }
}

type CliResult = Result<(), Failure>;

/// Entry point used by the binary and by tests. Returns the process exit
/// code instead of exiting, and prints errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap handles --help/--version as "errors" with success codes.
            use clap::error::ErrorKind;
            let benign = matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if benign { EXIT_OK } else { EXIT_CONFIG };
        }
    };
    let outcome = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Pca(a) => cmd_pca(a),
        Cmd::Radsim(a) => cmd_radsim(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// `key = value` settings file; `#` comments and blank lines ignored.
/// Explicit flags take precedence over file entries.
struct Resolver {
    file: HashMap<String, String>,
    effective: Vec<(String, String)>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl Resolver {
    fn new(config: Option<&Path>) -> Result<Self, Failure> {
        let mut file = HashMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            for (lineno0, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Failure::config(format!(
                        "{}:{}: expected key=value",
                        path.display(),
                        lineno0 + 1
                    ))
                })?;
                file.insert(normalize_key(key), value.trim().to_string());
            }
        }
        Ok(Self {
            file,
            effective: Vec::new(),
        })
    }

    fn record(&mut self, key: &str, value: impl Display) {
        self.effective.push((key.to_string(), value.to_string()));
    }

    fn lookup<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(Some(v));
        }
        match self.file.get(&normalize_key(key)) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Failure::config(format!("config key {key}: cannot parse {raw:?}: {e}"))
            }),
        }
    }

    fn get_or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = self.lookup(key, flag)?.unwrap_or(default);
        self.record(key, &value);
        Ok(value)
    }

    fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, Failure>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = self
            .lookup(key, flag)?
            .ok_or_else(|| Failure::config(format!("missing required setting --{key}")))?;
        self.record(key, &value);
        Ok(value)
    }

    fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
        let value: String = self.require(
            key,
            flag.map(|p| p.to_string_lossy().into_owned()),
        )?;
        Ok(PathBuf::from(value))
    }

    fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, Failure> {
        let value: Option<String> =
            self.lookup(key, flag.map(|p| p.to_string_lossy().into_owned()))?;
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value.map(PathBuf::from))
    }

    /// Writes the effective settings, sorted by key, as the sidecar.
    fn write_sidecar(&self, out_dir: &Path) -> Result<(), Failure> {
        let path = out_dir.join("config.txt");
        let file = std::fs::File::create(&path)
            .map_err(|e| Failure::runtime(Error::io(&path, e)))?;
        let mut w = BufWriter::new(file);
        let mut entries = self.effective.clone();
        entries.sort();
        for (k, v) in entries {
            writeln!(w, "{k} = {v}").map_err(|e| Failure::runtime(Error::io(&path, e)))?;
        }
        Ok(())
    }
}

fn ensure_out_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::runtime(Error::io(path, e)))
}

fn parse_list<T>(raw: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T: FromStr,
    T::Err: Display,
{
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<T>()
                .map_err(|e| Failure::config(format!("bad {what} entry {part:?}: {e}")))?,
        );
    }
    Ok(out)
}

fn parse_model(raw: &str) -> Result<ModelKind, Failure> {
    match raw {
        "mf" => Ok(ModelKind::Mf),
        "bpr" => Ok(ModelKind::Bpr),
        other => Err(Failure::config(format!(
            "unknown --model {other:?} (expected mf or bpr)"
        ))),
    }
}

/// Which regularizers a run enables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ModeSet {
    sse_se: bool,
    sse_graph: bool,
    glr: bool,
    dropout: bool,
}

impl ModeSet {
    fn parse(raw: &str) -> Result<Self, Failure> {
        let mut set = ModeSet::default();
        let mut saw_none = false;
        let mut count = 0;
        for part in raw.split([',', '+']) {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            count += 1;
            match part {
                "none" => saw_none = true,
                "sse-se" => set.sse_se = true,
                "sse-graph" => set.sse_graph = true,
                "glr" => set.glr = true,
                "dropout" => set.dropout = true,
                other => {
                    return Err(Failure::config(format!(
                        "unknown mode {other:?} (expected none, sse-se, sse-graph, glr, dropout)"
                    )))
                }
            }
        }
        if count == 0 {
            return Err(Failure::config("empty --mode".to_string()));
        }
        if saw_none && count > 1 {
            return Err(Failure::config(
                "mode none cannot be combined with other modes".to_string(),
            ));
        }
        if set.sse_se && set.sse_graph {
            return Err(Failure::config(
                "modes sse-se and sse-graph are mutually exclusive".to_string(),
            ));
        }
        Ok(set)
    }

    fn needs_graph(&self) -> bool {
        self.sse_graph || self.glr
    }
}

impl Display for ModeSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.sse_se {
            parts.push("sse-se");
        }
        if self.sse_graph {
            parts.push("sse-graph");
        }
        if self.glr {
            parts.push("glr");
        }
        if self.dropout {
            parts.push("dropout");
        }
        if parts.is_empty() {
            parts.push("none");
        }
        write!(f, "{}", parts.join("+"))
    }
}

/// Hyperparameters shared by `train` and each `sweep` cell.
#[derive(Debug, Clone)]
struct HyperParams {
    lr: f64,
    epochs: usize,
    weight_decay: f64,
    dropout: f64,
    p0_user: f64,
    p0_item: f64,
    rho: f64,
    glr_beta: f64,
    dim: usize,
    init_scale: f64,
    minibatch: usize,
    negatives: usize,
}

fn build_train_config(
    mode: ModeSet,
    hp: &HyperParams,
    ds: &InteractionDataset,
    graph: Option<&KnowledgeGraph>,
    seed: u64,
) -> Result<TrainConfig, Failure> {
    let sse_user = if mode.sse_se || mode.sse_graph {
        TransitionModel::uniform(ds.num_users, hp.p0_user)?
    } else {
        TransitionModel::identity(ds.num_users)?
    };
    let sse_item = if mode.sse_graph {
        let g = graph.ok_or_else(|| {
            Failure::config("--mode sse-graph requires --graph".to_string())
        })?;
        TransitionModel::from_graph(g.clone(), hp.p0_item, hp.rho)?
    } else if mode.sse_se {
        TransitionModel::uniform(ds.num_items, hp.p0_item)?
    } else {
        TransitionModel::identity(ds.num_items)?
    };
    let (glr_beta, glr_graph) = if mode.glr {
        let g = graph
            .ok_or_else(|| Failure::config("--mode glr requires --graph".to_string()))?;
        (hp.glr_beta, Some(g.clone()))
    } else {
        (0.0, None)
    };
    Ok(TrainConfig {
        lr: hp.lr,
        weight_decay: hp.weight_decay,
        dropout: if mode.dropout { hp.dropout } else { 0.0 },
        sse_user,
        sse_item,
        glr_beta,
        glr_graph,
        epochs: hp.epochs,
        minibatch: hp.minibatch,
        negatives_per_positive: hp.negatives,
        seed,
    })
}

fn cmd_gen(a: GenArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let users = r.get_or("users", a.users, 1000)?;
    let items = r.get_or("items", a.items, 500)?;
    let d_true = r.get_or("d-true", a.d_true, 4)?;
    let clusters = r.get_or("clusters", a.clusters, 2)?;
    let ratings_per_user = r.get_or("ratings-per-user", a.ratings_per_user, 30)?;
    let noise = r.get_or("noise", a.noise, 0.5)?;
    let seed = r.get_or("seed", a.seed, 0)?;
    let out_dir = r.require_path("out-dir", a.out_dir)?;

    ensure_out_dir(&out_dir)?;
    let (ds, graph) =
        gen_synthetic(users, items, d_true, clusters, ratings_per_user, noise, seed)?;

    let ratings_path = out_dir.join("ratings.tsv");
    let mut user_map = IdMap::new();
    for u in 0..users {
        user_map.intern(&format!("u{u}"));
    }
    let mut item_map = IdMap::new();
    for i in 0..items {
        item_map.intern(&format!("i{i}"));
    }
    dataset::export_tsv(&ds, &user_map, &item_map, &ratings_path).map_err(Failure::runtime)?;

    let graph_path = out_dir.join("item_graph.txt");
    let file = std::fs::File::create(&graph_path)
        .map_err(|e| Failure::runtime(Error::io(&graph_path, e)))?;
    let mut w = BufWriter::new(file);
    for (j, k) in graph.edges() {
        writeln!(w, "i{j} i{k}").map_err(|e| Failure::runtime(Error::io(&graph_path, e)))?;
    }
    drop(w);

    r.write_sidecar(&out_dir)?;
    println!(
        "gen: {} interactions over {users} users x {items} items -> {}",
        ds.len(),
        out_dir.display()
    );
    Ok(())
}

struct TrainPlan {
    model: ModelKind,
    mode: ModeSet,
    data: PathBuf,
    graph: Option<PathBuf>,
    test_fraction: f64,
    split_seed: u64,
    seed: u64,
    hp: HyperParams,
    timings: bool,
    out_dir: PathBuf,
}

fn plan_train(a: TrainArgs, r: &mut Resolver) -> Result<TrainPlan, Failure> {
    let model = parse_model(&r.get_or("model", a.model, "mf".to_string())?)?;
    let mode = ModeSet::parse(&r.get_or("mode", a.mode, "none".to_string())?)?;
    let data = r.require_path("data", a.data)?;
    let graph = r.optional_path("graph", a.graph)?;
    if mode.needs_graph() && graph.is_none() {
        return Err(Failure::config(format!(
            "--mode {mode} requires --graph"
        )));
    }
    let hp = HyperParams {
        lr: r.get_or("lr", a.lr, 0.01)?,
        epochs: r.get_or("epochs", a.epochs, 20)?,
        weight_decay: r.get_or("weight-decay", a.weight_decay, 0.0)?,
        dropout: r.get_or("dropout", a.dropout, 0.1)?,
        p0_user: r.get_or("p0-user", a.p0_user, 0.01)?,
        p0_item: r.get_or("p0-item", a.p0_item, 0.01)?,
        rho: r.get_or("rho", a.rho, 100.0)?,
        glr_beta: r.get_or("glr-beta", a.glr_beta, 0.05)?,
        dim: r.get_or("dim", a.dim, 16)?,
        init_scale: r.get_or("init-scale", a.init_scale, DEFAULT_INIT_SCALE)?,
        minibatch: r.get_or("minibatch", a.minibatch, 1)?,
        negatives: r.get_or("negatives", a.negatives, 1)?,
    };
    let plan = TrainPlan {
        model,
        mode,
        data,
        graph,
        test_fraction: r.get_or("test-fraction", a.test_fraction, 0.2)?,
        split_seed: r.get_or("split-seed", a.split_seed, 0)?,
        seed: r.get_or("seed", a.seed, 0)?,
        hp,
        timings: a.timings,
        out_dir: r.require_path("out-dir", a.out_dir)?,
    };
    r.record("timings", plan.timings);
    Ok(plan)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let plan = plan_train(a, &mut r)?;
    ensure_out_dir(&plan.out_dir)?;

    let (ds, users, items) = load_tsv(&plan.data, TsvSchema::default()).map_err(Failure::runtime)?;
    let graph = match &plan.graph {
        Some(path) => {
            let loaded = load_edge_list(path, &items).map_err(Failure::runtime)?;
            if loaded.self_loops_dropped > 0 {
                eprintln!(
                    "warning: dropped {} self-loop edge(s) from {}",
                    loaded.self_loops_dropped,
                    path.display()
                );
            }
            Some(loaded.graph)
        }
        None => None,
    };

    let split = split_holdout(&ds, plan.test_fraction, plan.split_seed)?;
    let cfg = build_train_config(plan.mode, &plan.hp, &ds, graph.as_ref(), plan.seed)?;
    let params = ModelParams::init(
        ds.num_users,
        ds.num_items,
        plan.hp.dim,
        plan.hp.init_scale,
        plan.seed,
    )
    .map_err(Failure::runtime)?;

    let (trained, report) = train(plan.model, &split, &cfg, params).map_err(Failure::runtime)?;

    write_report_csv(&report, &plan.out_dir.join("report.csv"), plan.timings)
        .map_err(Failure::runtime)?;
    write_params_csv(&trained, &plan.out_dir.join("embeddings.csv")).map_err(Failure::runtime)?;
    users
        .write_csv(&plan.out_dir.join("user_idmap.csv"))
        .map_err(Failure::runtime)?;
    items
        .write_csv(&plan.out_dir.join("item_idmap.csv"))
        .map_err(Failure::runtime)?;
    r.write_sidecar(&plan.out_dir)?;

    let last = report.records.last().expect("epochs >= 1");
    println!(
        "train: model={} mode={} epochs={} final_{}={:.6} train_loss={:.6}",
        match plan.model {
            ModelKind::Mf => "mf",
            ModelKind::Bpr => "bpr",
        },
        plan.mode,
        last.epoch,
        report.metric_name,
        last.metric,
        last.train_loss
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let model = parse_model(&r.get_or("model", a.model, "mf".to_string())?)?;
    let modes_raw = r.require("modes", a.modes)?;
    let mut modes = Vec::new();
    for part in modes_raw.split(',') {
        let part = part.trim();
        if !part.is_empty() {
            modes.push(ModeSet::parse(part)?);
        }
    }
    let data = r.require_path("data", a.data)?;
    let graph_path = r.optional_path("graph", a.graph)?;
    let p0_list: Vec<f64> = parse_list(&r.get_or("p0-list", a.p0_list, "0.01".to_string())?, "p0")?;
    let rho_list: Vec<f64> =
        parse_list(&r.get_or("rho-list", a.rho_list, "100".to_string())?, "rho")?;
    let wd_list: Vec<f64> = parse_list(
        &r.get_or("weight-decay-list", a.weight_decay_list, "0".to_string())?,
        "weight decay",
    )?;
    let dropout_list: Vec<f64> = parse_list(
        &r.get_or("dropout-list", a.dropout_list, "0.1".to_string())?,
        "dropout",
    )?;
    let beta_list: Vec<f64> = parse_list(
        &r.get_or("glr-beta-list", a.glr_beta_list, "0.05".to_string())?,
        "glr beta",
    )?;
    let seeds: Vec<u64> = parse_list(&r.require::<String>("seeds", a.seeds)?, "seed")?;
    let test_fraction = r.get_or("test-fraction", a.test_fraction, 0.2)?;
    let split_seed = r.get_or("split-seed", a.split_seed, 0)?;
    let lr = r.get_or("lr", a.lr, 0.01)?;
    let epochs = r.get_or("epochs", a.epochs, 20)?;
    let dim = r.get_or("dim", a.dim, 16)?;
    let init_scale = r.get_or("init-scale", a.init_scale, DEFAULT_INIT_SCALE)?;
    let minibatch = r.get_or("minibatch", a.minibatch, 1)?;
    let negatives = r.get_or("negatives", a.negatives, 1)?;
    let out_dir = r.require_path("out-dir", a.out_dir)?;

    if modes.is_empty() || seeds.is_empty() {
        return Err(Failure::config("sweep grid is empty (no modes or no seeds)".to_string()));
    }
    for lst in [&p0_list, &rho_list, &wd_list, &dropout_list, &beta_list] {
        if lst.is_empty() {
            return Err(Failure::config("sweep grid is empty (an axis has no values)".to_string()));
        }
    }
    if modes.iter().any(|m| m.needs_graph()) && graph_path.is_none() {
        return Err(Failure::config(
            "sweep includes a graph-based mode but no --graph was given".to_string(),
        ));
    }

    // Per-mode cells: only the axes a mode actually uses vary, so e.g.
    // "none" contributes one cell per weight-decay value rather than the
    // full cartesian product.
    #[derive(Clone)]
    struct Cell {
        mode: ModeSet,
        p0: f64,
        rho: f64,
        wd: f64,
        dropout: f64,
        beta: f64,
    }
    let mut cells: Vec<Cell> = Vec::new();
    for &mode in &modes {
        let p0s: &[f64] = if mode.sse_se || mode.sse_graph { &p0_list } else { &[0.0] };
        let rhos: &[f64] = if mode.sse_graph { &rho_list } else { &[1.0] };
        let drops: &[f64] = if mode.dropout { &dropout_list } else { &[0.0] };
        let betas: &[f64] = if mode.glr { &beta_list } else { &[0.0] };
        for &p0 in p0s {
            for &rho in rhos {
                for &wd in &wd_list {
                    for &dropout in drops {
                        for &beta in betas {
                            cells.push(Cell { mode, p0, rho, wd, dropout, beta });
                        }
                    }
                }
            }
        }
    }

    ensure_out_dir(&out_dir)?;
    let (ds, _, items) = load_tsv(&data, TsvSchema::default()).map_err(Failure::runtime)?;
    let graph = match &graph_path {
        Some(path) => Some(load_edge_list(path, &items).map_err(Failure::runtime)?.graph),
        None => None,
    };
    let split = split_holdout(&ds, test_fraction, split_seed)?;

    let csv_path = out_dir.join("sweep.csv");
    let file = std::fs::File::create(&csv_path)
        .map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "row_type,mode,p0,rho,weight_decay,dropout,glr_beta,seed,metric,metric_sd"
    )
    .map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;

    let metric_name = match model {
        ModelKind::Mf => "rmse",
        ModelKind::Bpr => "p@10",
    };
    for cell in &cells {
        let hp = HyperParams {
            lr,
            epochs,
            weight_decay: cell.wd,
            dropout: cell.dropout,
            p0_user: cell.p0,
            p0_item: cell.p0,
            rho: cell.rho,
            glr_beta: cell.beta,
            dim,
            init_scale,
            minibatch,
            negatives,
        };
        let mut finals = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let cfg = build_train_config(cell.mode, &hp, &ds, graph.as_ref(), seed)?;
            let params = ModelParams::init(ds.num_users, ds.num_items, dim, init_scale, seed)
                .map_err(Failure::runtime)?;
            let (_, report) = train(model, &split, &cfg, params).map_err(Failure::runtime)?;
            let m = report.records.last().expect("epochs >= 1").metric;
            finals.push(m);
            writeln!(
                w,
                "detail,{},{},{},{},{},{},{seed},{m},",
                cell.mode, cell.p0, cell.rho, cell.wd, cell.dropout, cell.beta
            )
            .map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;
        }
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let var = finals.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
            / if finals.len() > 1 { n - 1.0 } else { 1.0 };
        let sd = var.sqrt();
        writeln!(
            w,
            "aggregate,{},{},{},{},{},{},,{mean},{sd}",
            cell.mode, cell.p0, cell.rho, cell.wd, cell.dropout, cell.beta
        )
        .map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;
        println!(
            "sweep: mode={} p0={} rho={} wd={} dropout={} beta={} mean_{metric_name}={mean:.6} sd={sd:.6}",
            cell.mode, cell.p0, cell.rho, cell.wd, cell.dropout, cell.beta
        );
    }
    drop(w);
    r.write_sidecar(&out_dir)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let embeddings = r.require_path("embeddings", a.embeddings)?;
    let user_idmap = r.require_path("user-idmap", a.user_idmap)?;
    let item_idmap = r.require_path("item-idmap", a.item_idmap)?;
    let data = r.require_path("data", a.data)?;
    let train_data = r.optional_path("train-data", a.train_data)?;
    let metric = r.get_or("metric", a.metric, "rmse".to_string())?;
    let ks: Vec<usize> = parse_list(&r.get_or("ks", a.ks, "1,5,10".to_string())?, "k")?;
    let clip = !a.no_clip;
    r.record("clip", clip);
    let out_dir = r.require_path("out-dir", a.out_dir)?;

    let want_rmse = matches!(metric.as_str(), "rmse" | "both");
    let want_patk = matches!(metric.as_str(), "patk" | "both");
    if !want_rmse && !want_patk {
        return Err(Failure::config(format!(
            "unknown --metric {metric:?} (expected rmse, patk, or both)"
        )));
    }
    if want_patk && train_data.is_none() {
        return Err(Failure::config(
            "--metric patk requires --train-data for candidate exclusion".to_string(),
        ));
    }

    ensure_out_dir(&out_dir)?;
    let params = read_params_csv(&embeddings).map_err(Failure::runtime)?;
    let users = IdMap::read_csv(&user_idmap).map_err(Failure::runtime)?;
    let items = IdMap::read_csv(&item_idmap).map_err(Failure::runtime)?;
    let test =
        load_tsv_with_maps(&data, TsvSchema::default(), &users, &items).map_err(Failure::runtime)?;

    let mut report = eval::MetricReport::default();
    if want_rmse {
        report.rmse = Some(eval::rmse(&params, &test, clip).map_err(Failure::runtime)?);
    }
    if want_patk {
        let train_path = train_data.expect("validated");
        let train_ds = load_tsv_with_maps(&train_path, TsvSchema::default(), &users, &items)
            .map_err(Failure::runtime)?;
        report.precision_at =
            eval::precision_at_k(&params, &train_ds, &test, &ks).map_err(Failure::runtime)?;
    }

    let csv_path = out_dir.join("metrics.csv");
    let file = std::fs::File::create(&csv_path)
        .map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "metric,value").map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;
    if let Some(rmse) = report.rmse {
        writeln!(w, "rmse,{rmse}").map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;
        println!("eval: rmse={rmse:.6}");
    }
    let mut sorted_ks: Vec<usize> = report.precision_at.keys().copied().collect();
    sorted_ks.sort_unstable();
    for k in sorted_ks {
        let v = report.precision_at[&k];
        writeln!(w, "p@{k},{v}").map_err(|e| Failure::runtime(Error::io(&csv_path, e)))?;
        println!("eval: p@{k}={v:.6}");
    }
    drop(w);
    r.write_sidecar(&out_dir)?;
    Ok(())
}

fn cmd_pca(a: PcaArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let embeddings = r.require_path("embeddings", a.embeddings)?;
    let table = r.get_or("table", a.table, "item".to_string())?;
    let out_dim = r.get_or("out-dim", a.out_dim, 3)?;
    let out_dir = r.require_path("out-dir", a.out_dir)?;
    if table != "user" && table != "item" {
        return Err(Failure::config(format!(
            "unknown --table {table:?} (expected user or item)"
        )));
    }

    ensure_out_dir(&out_dir)?;
    let params = read_params_csv(&embeddings).map_err(Failure::runtime)?;
    let chosen = if table == "user" { &params.users } else { &params.items };
    let pca = eval::pca_project(chosen, out_dim)?;
    write_pca_csv(&table, &pca, &out_dir.join("pca.csv")).map_err(Failure::runtime)?;
    r.write_sidecar(&out_dir)?;
    let total: f64 = pca.explained_variance.iter().sum();
    println!(
        "pca: table={table} out_dim={out_dim} explained_variance={total:.6}"
    );
    Ok(())
}

fn cmd_radsim(a: RadsimArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let embeddings = r.require_path("embeddings", a.embeddings)?;
    let user_idmap = r.require_path("user-idmap", a.user_idmap)?;
    let item_idmap = r.require_path("item-idmap", a.item_idmap)?;
    let data = r.require_path("data", a.data)?;
    let transitions = r.get_or("transitions", a.transitions, "uniform".to_string())?;
    let graph_path = r.optional_path("graph", a.graph)?;
    let rho = r.get_or("rho", a.rho, 100.0)?;
    let p0_grid: Vec<f64> = parse_list(
        &r.get_or("p0-grid", a.p0_grid, "0,0.2,0.4,0.6,0.8".to_string())?,
        "p0",
    )?;
    let samples = r.get_or("samples", a.samples, 2000)?;
    let mc_inner = r.get_or("mc-inner", a.mc_inner, 200)?;
    let seed = r.get_or("seed", a.seed, 0)?;
    let out_dir = r.require_path("out-dir", a.out_dir)?;

    if transitions == "graph" && graph_path.is_none() {
        return Err(Failure::config(
            "--transitions graph requires --graph".to_string(),
        ));
    }
    if !matches!(transitions.as_str(), "uniform" | "uniform-items" | "graph") {
        return Err(Failure::config(format!(
            "unknown --transitions {transitions:?} (expected uniform, uniform-items, or graph)"
        )));
    }

    ensure_out_dir(&out_dir)?;
    let params = read_params_csv(&embeddings).map_err(Failure::runtime)?;
    let users = IdMap::read_csv(&user_idmap).map_err(Failure::runtime)?;
    let items = IdMap::read_csv(&item_idmap).map_err(Failure::runtime)?;
    let ds =
        load_tsv_with_maps(&data, TsvSchema::default(), &users, &items).map_err(Failure::runtime)?;

    let loaded_graph = match &graph_path {
        Some(path) => Some(load_edge_list(path, &items).map_err(Failure::runtime)?.graph),
        None => None,
    };
    let cfg = RadSimConfig {
        num_outer_samples: samples,
        mc_inner,
        p0_grid,
        seed,
    };
    let trans = match transitions.as_str() {
        "uniform" => RadSimTransitions::UniformBoth,
        "uniform-items" => RadSimTransitions::UniformItems,
        _ => RadSimTransitions::GraphItems {
            graph: loaded_graph.as_ref().expect("validated"),
            rho,
        },
    };
    let groups = rademacher_sweep(&params, &ds, trans, &cfg).map_err(Failure::runtime)?;
    write_radsim_csv(&groups, &out_dir.join("radsim.csv")).map_err(Failure::runtime)?;
    r.write_sidecar(&out_dir)?;
    for g in &groups {
        let mut mags: Vec<f64> = g.samples.iter().map(|s| s.abs()).collect();
        mags.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let median = mags[mags.len() / 2];
        println!("radsim: p0={} median_abs={median:.6}", g.p0);
    }
    Ok(())
}
