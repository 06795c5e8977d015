//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a gating criterion fails.
//!
//! Criteria 6-8 need the Cora and Citeseer files under `$VDGAE_DATA_DIR`
//! (`cora/edges.txt`, `cora/features.csv`, `citeseer/...`); without them
//! they fail. Criterion 12 looks for `power/` and `ns/` there too but never
//! gates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use vdgae_core::encoder::{encode, init_encoder_params, standard_normal, EncoderConfig, Routing};
use vdgae_core::gradcheck::{Instance, STEP};
use vdgae_core::graph::{split_edges, Graph, NodeFeatures};
use vdgae_core::heuristics::{Heuristic, Scorer};
use vdgae_core::metrics::{auc, average_precision};
use vdgae_core::mi::{total_mi_value, MiEstimator};
use vdgae_core::synth::{embedding_correlation, expected_degree, generate_sbm, tune_q, SbmSpec};
use vdgae_core::tape::gradcheck::{analytic_gradient, compare_gradients, numeric_gradient};
use vdgae_core::tape::{BoundParams, Tape, Tensor};
use vdgae_core::train::{embed, train};
use vdgae_core::{Mode, TrainConfig, Variant};

type Criterion<'a> = (u32, &'static str, bool, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["vdgae".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    vdgae_cli::run(argv)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(n, edges).unwrap()
}

fn gradient_correctness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let start = Instant::now();
    let code = cli(&["gradcheck", "--trials", "100", "--n-max", "12", "--out", out.to_str().unwrap()]);
    let elapsed = start.elapsed();
    if code != 0 {
        return outcome(false, format!("gradcheck exited with {code}"));
    }
    let report = read_json(&out.join("gradcheck.json"));
    let trials = report["trials"].as_array().map_or(0, Vec::len);
    let err = report["max_rel_err"].as_f64().unwrap_or(f64::INFINITY);

    // negative control: a sign-flipped analytic gradient must be caught
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = Instance::random(Mode::Vdgae, 12, &mut rng);
    let f = |t: &mut Tape, b: &BoundParams| inst.objective(t, b);
    let (_, mut grads) = analytic_gradient(&inst.encoder, &f).unwrap();
    let numeric = numeric_gradient(&inst.encoder, STEP, &f).unwrap();
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    let flipped = compare_gradients(&grads, &numeric).max_rel_err;

    outcome(
        trials == 100 && err < 1e-4 && elapsed < Duration::from_secs(120) && flipped > 1e-4,
        format!(
            "{trials} trials, max rel err {err:.2e} (< 1e-4), {:.1}s (< 120s), flipped-sign control err {flipped:.2e}",
            elapsed.as_secs_f64()
        ),
    )
}

fn simplex_and_norm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_simplex, mut worst_norm) = (0.0f64, 0.0f64);
    let mut guarded = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let density = rng.random_range(0.05..0.5);
        let g = random_graph(&mut rng, n, density);
        let f = rng.random_range(2..10);
        let cfg = EncoderConfig {
            channels: rng.random_range(1..6),
            dim: rng.random_range(2..8),
            iterations: rng.random_range(1..5),
            routing: true,
        };
        let mut params = init_encoder_params(f, &cfg, false, &mut rng);
        for (name, t) in params.iter_mut() {
            if name.starts_with("enc.b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let x = NodeFeatures::Dense(Arc::new(standard_normal(n, f, &mut rng)));
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let enc = encode(&mut tape, &x, &Routing::new(&g), &b, &cfg).unwrap();
        guarded += enc.guarded_rows;
        for &p in &enc.probs {
            let p = tape.value(p);
            for i in 0..p.rows() {
                worst_simplex = worst_simplex.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        for &v in enc.e.iter().chain(&enc.z) {
            let t = tape.value(v);
            for i in 0..t.rows() {
                let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                worst_norm = worst_norm.max((norm - 1.0).abs());
            }
        }
    }
    outcome(
        worst_simplex <= 1e-9 && worst_norm <= 1e-6 && guarded == 0,
        format!("50 graphs, max |sum p - 1| {worst_simplex:.1e} (<= 1e-9), max | |z| - 1 | {worst_norm:.1e} (<= 1e-6)"),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                good += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    good / pairs
}

/// Mean precision at each positive, cutting the ranking at that positive;
/// equal scores keep input order.
fn sweep_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    for k in (0..n).filter(|&k| labels[k]) {
        let cut: Vec<usize> = (0..n)
            .filter(|&j| j == k || scores[j] > scores[k] || (scores[j] == scores[k] && j < k))
            .collect();
        let hits = cut.iter().filter(|&&j| labels[j]).count() as f64;
        ap += hits / cut.len() as f64 / positives;
    }
    ap
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let (mut auc_err, mut ap_err) = (0.0f64, 0.0f64);
    for trial in 0..500 {
        let n = rng.random_range(2..80);
        let tied = trial % 4 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if tied { rng.random_range(0..6) as f64 } else { rng.random_range(-3.0..3.0) })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        auc_err = auc_err.max((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
        ap_err = ap_err.max((average_precision(&scores, &labels).unwrap() - sweep_ap(&scores, &labels)).abs());
    }
    outcome(
        auc_err <= 1e-12 && ap_err <= 1e-12,
        format!("500 vectors, max AUC err {auc_err:.1e}, max AP err {ap_err:.1e} (<= 1e-12)"),
    )
}

fn heuristic_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut katz_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(5..=50);
        let density = rng.random_range(0.05..0.4);
        let g = random_graph(&mut rng, n, density);
        if g.num_edges() == 0 {
            continue;
        }
        let a = DMatrix::<f64>::from_fn(n, n, |i, j| if g.has_edge(i, j) { 1.0 } else { 0.0 });
        let rho = a.clone().symmetric_eigenvalues().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let beta = 0.5 / rho;
        let eye = DMatrix::<f64>::identity(n, n);
        let dense = (&eye - beta * &a).try_inverse().unwrap() - &eye;
        let mut s = Scorer::new(&g, Heuristic::Katz { beta: Some(beta), max_len: 60 }).unwrap();
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    katz_err = katz_err.max((s.score(u, v) - dense[(u, v)]).abs());
                }
            }
        }
    }

    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(2..=20);
        let density = rng.random_range(0.05..0.6);
        let g = random_graph(&mut rng, n, density);
        let adj: Vec<Vec<bool>> = (0..n).map(|u| (0..n).map(|v| g.has_edge(u, v)).collect()).collect();
        let deg = |w: usize| adj[w].iter().filter(|&&b| b).count() as f64;
        for name in ["cn", "jaccard", "aa", "ra", "pa"] {
            let mut s = Scorer::new(&g, name.parse().unwrap()).unwrap();
            for u in 0..n {
                for v in 0..n {
                    if u == v {
                        continue;
                    }
                    let common: Vec<usize> = (0..n).filter(|&w| adj[u][w] && adj[v][w]).collect();
                    let union = (0..n).filter(|&w| adj[u][w] || adj[v][w]).count();
                    let want = match name {
                        "cn" => common.len() as f64,
                        "jaccard" if union == 0 => 0.0,
                        "jaccard" => common.len() as f64 / union as f64,
                        "aa" => common.iter().map(|&w| 1.0 / deg(w).ln()).sum(),
                        "ra" => common.iter().map(|&w| 1.0 / deg(w)).sum(),
                        _ => deg(u) * deg(v),
                    };
                    compared += 1;
                    if s.score(u, v) != want {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    outcome(
        katz_err <= 1e-8 && mismatches == 0,
        format!("Katz max err {katz_err:.1e} (<= 1e-8, N <= 50); local indices {mismatches} mismatches in {compared} exact comparisons"),
    )
}

fn club_gaussian() -> Outcome {
    let start = Instant::now();
    let mut estimates = BTreeMap::new();
    for (rho, seed) in [(0.0, 10u64), (0.9, 11)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(5000, 1, &mut rng);
        let e = standard_normal(5000, 1, &mut rng);
        let y = Tensor::from_fn(5000, 1, |i, j| rho * x.get(i, j) + (1.0f64 - rho * rho).sqrt() * e.get(i, j));
        let mut est = MiEstimator::new(2, 1, 0.005, &mut rng);
        est.inner_update(&[x.clone(), y.clone()], 500).unwrap();
        estimates.insert(seed, total_mi_value(&est, &[x, y], &mut rng).unwrap());
    }
    let elapsed = start.elapsed();
    let (zero, high) = (estimates[&10], estimates[&11]);
    outcome(
        zero.abs() <= 0.05 && high >= 0.5 && elapsed < Duration::from_secs(60),
        format!(
            "rho 0: {zero:.4} (in [-0.05, 0.05]); rho 0.9: {high:.4} (>= 0.5, true 0.830); {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn data_dir(name: &str) -> Result<PathBuf, String> {
    let root = std::env::var_os("VDGAE_DATA_DIR").ok_or("VDGAE_DATA_DIR is not set")?;
    let dir = PathBuf::from(root).join(name);
    if dir.join("edges.txt").exists() {
        Ok(dir)
    } else {
        Err(format!("{} not found", dir.join("edges.txt").display()))
    }
}

/// Mean test AUC and AP over five seeds with the 85/5/10 split.
fn train_dataset(dir: &Path, extra: &[&str], work: &Path) -> Result<(f64, f64, Duration), String> {
    let out = work.join(dir.file_name().unwrap()).join(extra.join("_").replace("--", ""));
    let mut args = vec![
        "train",
        "--dataset",
        dir.to_str().unwrap(),
        "--val",
        "0.05",
        "--test",
        "0.10",
        "--seeds",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let start = Instant::now();
    let code = cli(&args);
    let elapsed = start.elapsed();
    if code != 0 {
        return Err(format!("train exited with {code}"));
    }
    let m = read_json(&out.join("metrics.json"));
    let get = |k: &str| m[k]["mean"].as_f64().ok_or(format!("metrics.json has no {k}"));
    Ok((get("auc")?, get("ap")?, elapsed))
}

fn cora_reproduction(work: &Path) -> Outcome {
    let dir = match data_dir("cora") {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("dataset unavailable: {e}")),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for mode in ["dgae", "vdgae"] {
        match train_dataset(&dir, &["--mode", mode, "--channels", "5"], work) {
            Ok((a, p, t)) => {
                pass &= a >= 0.93 && p >= 0.93 && t <= Duration::from_secs(20 * 60);
                parts.push(format!("{mode} AUC {a:.4} AP {p:.4} in {:.0}s", t.as_secs_f64()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{mode}: {e}"));
            }
        }
    }
    outcome(pass, format!("{} (need >= 0.93, <= 20 min per mode)", parts.join("; ")))
}

fn citeseer_reproduction(work: &Path) -> Outcome {
    let dir = match data_dir("citeseer") {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("dataset unavailable: {e}")),
    };
    match train_dataset(&dir, &["--mode", "dgae", "--channels", "6"], work) {
        Ok((a, _, _)) => outcome(a >= 0.94, format!("mean test AUC {a:.4} (>= 0.94)")),
        Err(e) => outcome(false, e),
    }
}

fn ablation_ordering(work: &Path) -> Outcome {
    let dir = match data_dir("cora") {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("dataset unavailable: {e}")),
    };
    let mut aucs = Vec::new();
    for variant in ["full", "no_mi", "no_disent"] {
        match train_dataset(&dir, &["--mode", "dgae", "--channels", "5", "--variant", variant], work) {
            Ok((a, _, _)) => aucs.push(a),
            Err(e) => return outcome(false, format!("{variant}: {e}")),
        }
    }
    let (full, no_mi, no_disent) = (aucs[0], aucs[1], aucs[2]);
    outcome(
        full >= no_mi && no_mi >= no_disent && full - no_disent >= 0.015,
        format!("full {full:.4} >= no_mi {no_mi:.4} >= no_disent {no_disent:.4}, gap >= 1.5 points"),
    )
}

fn synthetic_disentanglement() -> Outcome {
    let start = Instant::now();
    let mut contrast: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let mut spec = SbmSpec::reference(seed);
        spec.q_between = tune_q(&spec, 18.0, 20.0).unwrap();
        let g = generate_sbm(&spec).unwrap();
        let split = split_edges(&g, 0.05, 0.10, seed).unwrap();
        for (name, variant) in [("vdgae", Variant::Full), ("no_disent", Variant::NoDisent)] {
            let cfg = TrainConfig {
                mode: Mode::Vdgae,
                channels: 5,
                dim: 8,
                seed,
                variant,
                ..TrainConfig::default()
            };
            let model = train(&split, &cfg).unwrap();
            let z = embed(&model, &split.message_graph).unwrap();
            let c = embedding_correlation(&z, 5, 8).unwrap().block_contrast.unwrap_or(f64::NAN);
            contrast.entry(name).or_default().push(c);
        }
    }
    let elapsed = start.elapsed();
    let mean = |k: &str| contrast[k].iter().sum::<f64>() / contrast[k].len() as f64;
    let (full, flat) = (mean("vdgae"), mean("no_disent"));
    outcome(
        full >= 1.5 && flat <= 1.1 && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "block contrast vdgae {full:.3} (>= 1.5) {:?}, no_disent {flat:.3} (<= 1.1) {:?}; {:.0}s (<= 900s)",
            contrast["vdgae"],
            contrast["no_disent"],
            elapsed.as_secs_f64()
        ),
    )
}

fn sbm_degree() -> Outcome {
    let mut spec = SbmSpec::reference(0);
    spec.q_between = tune_q(&spec, 18.0, 20.0).unwrap();
    let expected = expected_degree(&spec);
    let degrees: Vec<f64> = (0..20)
        .map(|seed| generate_sbm(&SbmSpec { seed, ..spec.clone() }).unwrap().average_degree())
        .collect();
    let mean = degrees.iter().sum::<f64>() / degrees.len() as f64;
    let (lo, hi) = degrees.iter().fold((f64::MAX, f64::MIN), |(a, b), &d| (a.min(d), b.max(d)));
    outcome(
        (18.0..=20.0).contains(&lo) && (18.0..=20.0).contains(&hi) && (mean - expected).abs() <= 1.5,
        format!("20 seeds, degree range [{lo:.3}, {hi:.3}] in [18, 20], mean {mean:.3} vs expected {expected:.3} (+-1.5)"),
    )
}

fn determinism(work: &Path) -> Outcome {
    let data = work.join("det_graph");
    if cli(&["synth", "--communities", "3", "--size", "30", "--p-list", "0.3", "--q", "0.02", "--seed", "5", "--out", data.to_str().unwrap()]) != 0 {
        return outcome(false, "synth failed");
    }
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = work.join(format!("det_{run}"));
        let code = cli(&[
            "train", "--dataset", data.to_str().unwrap(), "--mode", "vdgae", "--channels", "3", "--dim", "4",
            "--epochs", "15", "--seeds", "2", "--seed", "9", "--out", out.to_str().unwrap(),
        ]);
        if code != 0 {
            return outcome(false, format!("train exited with {code}"));
        }
        bytes.push((fs::read(out.join("metrics.json")).unwrap(), fs::read(out.join("seed_9/checkpoint.json")).unwrap()));
    }
    outcome(
        bytes[0].0 == bytes[1].0 && bytes[0].1 == bytes[1].1,
        format!("two runs, metrics.json {} bytes identical: {}", bytes[0].0.len(), bytes[0] == bytes[1]),
    )
}

/// Never gates.
fn featureless_and_sampled(work: &Path) -> Outcome {
    let mut parts = Vec::new();
    for (name, target) in [("power", 0.90), ("ns", 0.95)] {
        match data_dir(name) {
            Ok(dir) => match train_dataset(&dir, &["--mode", "dgae"], work) {
                Ok((a, _, _)) => parts.push(format!("{name} AUC {a:.4} (target {target})")),
                Err(e) => parts.push(format!("{name}: {e}")),
            },
            Err(e) => parts.push(format!("{name} unavailable ({e})")),
        }
    }
    let data = work.join("sampled_graph");
    let ok = cli(&["synth", "--communities", "4", "--size", "500", "--p-list", "0.01", "--q", "0.002", "--out", data.to_str().unwrap()]) == 0
        && cli(&[
            "train", "--dataset", data.to_str().unwrap(), "--sampled-recon", "true", "--dim", "16", "--epochs", "3",
            "--out", work.join("sampled_run").to_str().unwrap(),
        ]) == 0;
    parts.push(format!("sampled reconstruction on 2000 nodes: {}", if ok { "ran" } else { "failed" }));
    outcome(ok, parts.join("; "))
}

fn main() {
    // keep per-epoch logging out of the report
    if std::env::var_os("RUST_LOG").is_none() {
        std::env::set_var("RUST_LOG", "warn");
    }
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", true, Box::new(gradient_correctness)),
        (2, "simplex and unit-norm invariants", true, Box::new(simplex_and_norm)),
        (3, "metric oracles", true, Box::new(metric_oracles)),
        (4, "heuristic oracles", true, Box::new(heuristic_oracles)),
        (5, "CLUB on Gaussian pairs", true, Box::new(club_gaussian)),
        (6, "Cora reproduction", true, Box::new(|| cora_reproduction(w))),
        (7, "Citeseer reproduction", true, Box::new(|| citeseer_reproduction(w))),
        (8, "ablation ordering", true, Box::new(|| ablation_ordering(w))),
        (9, "synthetic disentanglement", true, Box::new(synthetic_disentanglement)),
        (10, "SBM degree", true, Box::new(sbm_degree)),
        (11, "determinism", true, Box::new(|| determinism(w))),
        (12, "featureless and sampled runs", false, Box::new(|| featureless_and_sampled(w))),
    ];
    let only: Option<Vec<u32>> = std::env::var("VDGAE_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, gating, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let r = check();
        let tag = match (r.pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!("{tag} [{id:>2}] {name}: {}", r.detail);
        if !r.pass && *gating {
            failed.push(*id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
