// scratch calibration probe, round 2
use sse_core::dataset::{gen_synthetic, split_holdout, Split};
use sse_core::embedding::ModelParams;
use sse_core::graph::TransitionModel;
use sse_core::models::{train, ModelKind, TrainConfig, TrainReport};

fn run(split: &Split, cfg: &TrainConfig, dim: usize, seed: u64) -> TrainReport {
    let ds = &split.train;
    let params = ModelParams::init(ds.num_users, ds.num_items, dim, 0.1, 1000 + seed).unwrap();
    let (_, report) = train(ModelKind::Mf, split, cfg, params).unwrap();
    report
}

fn stats(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, sd / n.sqrt())
}

fn main() {
    let seeds: Vec<u64> = (0..5).collect();
    let (ds, graph) = gen_synthetic(1000, 500, 4, 2, 30, 0.5, 42).unwrap();
    let split = split_holdout(&ds, 0.2, 7).unwrap();
    let (nu, ni) = (ds.num_users, ds.num_items);

    // --- part A: high-p0 sse-graph vs refined glr (lr 0.01, d16, 40 ep) ---
    let base = |seed: u64, lr: f64, epochs: usize| -> TrainConfig {
        let mut c = TrainConfig::plain(nu, ni, seed).unwrap();
        c.lr = lr;
        c.epochs = epochs;
        c
    };
    for p0 in [0.6, 0.7, 0.8, 0.9] {
        let vals: Vec<f64> = seeds.iter().map(|&s| {
            let mut c = base(s, 0.01, 40);
            c.sse_user = TransitionModel::uniform(nu, 0.01).unwrap();
            c.sse_item = TransitionModel::from_graph(graph.clone(), p0, 500.0).unwrap();
            run(&split, &c, 16, s).records.last().unwrap().metric
        }).collect();
        let (m, se) = stats(&vals);
        println!("A sse-graph p0={p0} rho=500: mean={m:.4} se={se:.4}");
    }
    for beta in [0.03, 0.05, 0.06] {
        let vals: Vec<f64> = seeds.iter().map(|&s| {
            let mut c = base(s, 0.01, 40);
            c.glr_beta = beta;
            c.glr_graph = Some(graph.clone());
            run(&split, &c, 16, s).records.last().unwrap().metric
        }).collect();
        let (m, se) = stats(&vals);
        println!("A glr beta={beta}: mean={m:.4} se={se:.4}");
    }

    // --- part B: composition p0 with dropout 0.1 ---
    for p0 in [0.0, 0.005, 0.01, 0.02] {
        let vals: Vec<f64> = seeds.iter().map(|&s| {
            let mut c = base(s, 0.01, 40);
            c.dropout = 0.1;
            if p0 > 0.0 {
                c.sse_user = TransitionModel::uniform(nu, p0).unwrap();
                c.sse_item = TransitionModel::uniform(ni, p0).unwrap();
            }
            run(&split, &c, 16, s).records.last().unwrap().metric
        }).collect();
        let (m, se) = stats(&vals);
        println!("B dropout+sse p0={p0}: mean={m:.4} se={se:.4}");
    }

    // --- part C: curve shapes at higher lr for early overfit onset ---
    for (lr, dim) in [(0.02, 16), (0.02, 32), (0.03, 32)] {
        for p0 in [0.0, 0.05, 0.1] {
            let mut curves: Vec<Vec<f64>> = Vec::new();
            for &s in &seeds {
                let mut c = base(s, lr, 24);
                if p0 > 0.0 {
                    c.sse_user = TransitionModel::uniform(nu, p0).unwrap();
                    c.sse_item = TransitionModel::uniform(ni, p0).unwrap();
                }
                curves.push(run(&split, &c, dim, s).records.iter().map(|r| r.metric).collect());
            }
            let mean_curve: Vec<f64> = (0..24)
                .map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / 5.0)
                .collect();
            let s: Vec<String> = mean_curve.iter().enumerate().map(|(e, v)| format!("{}:{v:.3}", e + 1)).collect();
            println!("C lr={lr} d={dim} p0={p0}: {}", s.join(" "));
        }
    }
}
