use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde_json::json;
use vdgae_core::graph::{
    attach_features, identity_features, load_edge_list_remapped, load_edge_list_with_report, split_edges,
    SplitManifest,
};
use vdgae_core::heuristics::{evaluate_heuristic, Heuristic};
use vdgae_core::metrics::{LinkMetrics, MetricSummary};
use vdgae_core::mi::diagnostics_csv;
use vdgae_core::synth::{embedding_correlation, expected_degree, generate_sbm, labels_csv, matrix_csv, tune_q, SbmSpec};
use vdgae_core::train::{embed, evaluate, evaluate_candidates, history_jsonl};
use vdgae_core::{gradcheck, train, CoreError, EdgeSplit, Graph, TrainedModel};

use crate::config::{display, DataSource, TrainJob};
use crate::manifest::Run;
use crate::UsageError;

/// Loads the graph described by `data`, attaching features (identity when
/// none are given) and labels. Remapped ids are saved as `node_map.csv`.
pub fn load_graph(data: &DataSource, run: &mut Run) -> Result<Graph> {
    let edges = data.edges_path()?;
    let graph = if data.remap {
        let (g, ids) = load_edge_list_remapped(&edges)?;
        let mut map = String::from("node,original_id\n");
        for (i, id) in ids.iter().enumerate() {
            let _ = writeln!(map, "{i},{id}");
        }
        run.write("node_map.csv", map)?;
        g
    } else {
        let (g, report) = load_edge_list_with_report(&edges)?;
        if report.duplicates_dropped > 0 {
            info!("{}: merged {} duplicate edge(s)", edges.display(), report.duplicates_dropped);
        }
        g
    };
    info!("{}: {} nodes, {} edges", edges.display(), graph.num_nodes(), graph.num_edges());
    let graph = match data.features_path() {
        Some(p) => attach_features(graph, &p)?,
        None => {
            info!("no feature file, using identity features");
            identity_features(graph)
        }
    };
    match data.labels_path() {
        Some(p) => Ok(graph.with_labels(read_labels(&p)?)?),
        None => Ok(graph),
    }
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .with_context(|| format!("{}:{}: bad label '{l}'", path.display(), i + 1))
        })
        .collect()
}

fn data_inputs(data: &DataSource, extra: &[&Option<PathBuf>]) -> Result<Vec<PathBuf>> {
    let mut v = vec![data.edges_path()?];
    v.extend(data.features_path());
    v.extend(data.labels_path());
    v.extend(extra.iter().filter_map(|p| (*p).clone()));
    Ok(v)
}

pub struct SplitOpts {
    pub data: DataSource,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn split(o: SplitOpts) -> Result<()> {
    check_fractions(o.val, o.test)?;
    let config = json!({"val": o.val, "test": o.test, "seed": o.seed, "remap": o.data.remap});
    let mut run = Run::start("split", config, &data_inputs(&o.data, &[])?, vec![o.seed], &o.out)?;
    let graph = load_graph(&o.data, &mut run)?;
    let s = split_edges(&graph, o.val, o.test, o.seed).map_err(usage_if_config)?;
    let path = run.write("split.json", SplitManifest::from_split(&s).to_json_string() + "\n")?;
    println!(
        "train {} / val {} / test {} positives -> {}",
        s.train_pos.len(),
        s.val_pos.len(),
        s.test_pos.len(),
        path.display()
    );
    run.finish()
}

fn usage_if_config(e: CoreError) -> anyhow::Error {
    match e {
        CoreError::InvalidConfig(m) => UsageError(m).into(),
        other => other.into(),
    }
}

pub fn check_fractions(val: f64, test: f64) -> Result<(), UsageError> {
    if val >= 0.0 && test >= 0.0 && val + test < 1.0 {
        Ok(())
    } else {
        Err(UsageError(format!("need 0 <= val, 0 <= test and val + test < 1, got {val} and {test}")))
    }
}

fn embedding_sidecar(model: &TrainedModel, z_rows: usize, graph: &str) -> serde_json::Value {
    json!({
        "rows": z_rows,
        "cols": model.config.channels * model.config.dim,
        "channels": model.config.channels,
        "dim": model.config.dim,
        "mode": model.config.mode,
        "seed": model.config.seed,
        "best_epoch": model.best_epoch,
        "graph": graph,
    })
}

pub fn train_cmd(job: TrainJob) -> Result<()> {
    check_fractions(job.val, job.test)?;
    let seeds = job.seed_list();
    let mut run = Run::start("train", job.resolved(), &data_inputs(&job.data, &[&job.split])?, seeds.clone(), &job.out)?;
    let graph = load_graph(&job.data, &mut run)?;
    let fixed_split = match &job.split {
        Some(p) => Some(SplitManifest::read(p)?.into_split(&graph)?),
        None => None,
    };

    let mut tests = Vec::new();
    let mut vals = Vec::new();
    let mut full = Vec::new();
    let mut best_epochs = Vec::new();
    for &seed in &seeds {
        let dir = format!("seed_{seed}");
        let split: EdgeSplit = match &fixed_split {
            Some(s) => s.clone(),
            None => {
                let s = split_edges(&graph, job.val, job.test, seed).map_err(usage_if_config)?;
                run.write(&format!("{dir}/split.json"), SplitManifest::from_split(&s).to_json_string() + "\n")?;
                s
            }
        };
        let config = vdgae_core::TrainConfig { seed, ..job.model.clone() };
        info!("seed {seed}: training {} ({}) for {} epochs", config.mode, config.variant, config.epochs);
        let model = match train(&split, &config) {
            Ok(m) => m,
            Err(CoreError::Diverged { epoch, detail, history }) => {
                run.write(&format!("{dir}/history.jsonl"), history_jsonl(&history))?;
                bail!("seed {seed}: training diverged at epoch {epoch}: {detail}");
            }
            Err(e) => return Err(e.into()),
        };
        run.write(&format!("{dir}/history.jsonl"), model.history_jsonl())?;
        run.write(&format!("{dir}/checkpoint.json"), model.to_json().to_string())?;
        if !model.mi_diagnostics.is_empty() {
            run.write(&format!("{dir}/mi_diagnostics.csv"), diagnostics_csv(&model.mi_diagnostics))?;
        }
        let z = embed(&model, &split.message_graph)?;
        run.write(&format!("{dir}/embedding.csv"), matrix_csv(&z))?;
        run.write_json(&format!("{dir}/embedding.json"), &embedding_sidecar(&model, z.rows(), "message"))?;

        let test = if split.test_pos.is_empty() {
            None
        } else {
            Some(evaluate(&model, &split.message_graph, &split.test_pos, &split.test_neg)?)
        };
        let all = match (&test, job.full_candidates) {
            (Some(_), true) => Some(evaluate_candidates(&z, &graph, &split.test_pos)?),
            _ => None,
        };
        run.write_json(
            &format!("{dir}/metrics.json"),
            &json!({"seed": seed, "best_epoch": model.best_epoch, "val": model.best_val, "test": test, "full_candidates": all}),
        )?;
        match &test {
            Some(t) => info!("seed {seed}: test auc {:.4} ap {:.4} (best epoch {})", t.auc, t.ap, model.best_epoch),
            None => warn!("seed {seed}: empty test set, nothing to report"),
        }
        tests.extend(test);
        vals.extend(model.best_val);
        full.extend(all);
        best_epochs.push(model.best_epoch);
    }

    let mut config = job.resolved();
    // where the files went is not part of what was computed
    config.as_object_mut().expect("object").remove("out");
    let summary = |runs: &[LinkMetrics]| (!runs.is_empty()).then(|| MetricSummary::from_runs(runs));
    let test = summary(&tests);
    let mut metrics = json!({
        "auc": test.as_ref().map(|s| &s.auc),
        "ap": test.as_ref().map(|s| &s.ap),
        "val": summary(&vals),
        "best_epoch": best_epochs,
        "seeds": seeds,
        "config": config,
    });
    if job.full_candidates {
        metrics["full_candidates"] = json!(summary(&full));
    }
    run.write_json("metrics.json", &metrics)?;
    if let Some(t) = &test {
        println!("test AUC {}  AP {}  ({} seed(s))", t.auc.percent(), t.ap.percent(), seeds.len());
    }
    run.finish()
}

pub struct EvalOpts {
    pub data: DataSource,
    pub checkpoint: PathBuf,
    pub split: PathBuf,
    pub set: String,
    pub full_candidates: bool,
    pub out: PathBuf,
}

fn read_checkpoint(path: &Path) -> Result<TrainedModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(TrainedModel::from_json(value)?)
}

pub fn eval(o: EvalOpts) -> Result<()> {
    if o.set != "test" && o.set != "val" {
        bail!(UsageError(format!("--set must be 'test' or 'val', got '{}'", o.set)));
    }
    let inputs = data_inputs(&o.data, &[&Some(o.checkpoint.clone()), &Some(o.split.clone())])?;
    let config = json!({"checkpoint": display(&o.checkpoint), "split": display(&o.split), "set": o.set, "full_candidates": o.full_candidates});
    let mut run = Run::start("eval", config, &inputs, vec![], &o.out)?;
    let model = read_checkpoint(&o.checkpoint)?;
    let graph = load_graph(&o.data, &mut run)?;
    let split = SplitManifest::read(&o.split)?.into_split(&graph)?;
    let (pos, neg) = match o.set.as_str() {
        "val" => (&split.val_pos, &split.val_neg),
        _ => (&split.test_pos, &split.test_neg),
    };
    let m = evaluate(&model, &split.message_graph, pos, neg)?;
    let all = if o.full_candidates {
        Some(evaluate_candidates(&embed(&model, &split.message_graph)?, &graph, pos)?)
    } else {
        None
    };
    run.write_json("metrics.json", &json!({"set": o.set, "auc": m.auc, "ap": m.ap, "full_candidates": all}))?;
    println!("{} AUC {:.4}  AP {:.4}", o.set, m.auc, m.ap);
    run.finish()
}

pub struct BaselineOpts {
    pub data: DataSource,
    pub methods: String,
    pub seeds: usize,
    pub seed: u64,
    pub val: f64,
    pub test: f64,
    pub name: Option<String>,
    pub out: PathBuf,
}

pub fn parse_methods(s: &str) -> Result<(Vec<Heuristic>, bool), UsageError> {
    if s.eq_ignore_ascii_case("all") {
        let all = Heuristic::ALL_NAMES.iter().map(|n| n.parse().expect("known name")).collect();
        return Ok((all, true));
    }
    let methods = s
        .split(',')
        .map(|m| {
            m.trim().parse::<Heuristic>().map_err(|_| {
                UsageError(format!("unknown method '{}'; expected one of {} or all", m.trim(), Heuristic::ALL_NAMES.join(", ")))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((methods, false))
}

pub fn baseline(o: BaselineOpts) -> Result<()> {
    let (methods, skip_infeasible) = parse_methods(&o.methods)?;
    check_fractions(o.val, o.test)?;
    if o.seeds == 0 {
        bail!(UsageError("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..o.seeds as u64).map(|i| o.seed + i).collect();
    let edges = o.data.edges_path()?;
    let name = o.name.clone().unwrap_or_else(|| {
        edges.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "graph".into())
    });
    let config = json!({"methods": methods, "val": o.val, "test": o.test, "dataset": name});
    let mut run = Run::start("baseline", config, &[edges], seeds.clone(), &o.out)?;
    let graph = load_graph(&o.data, &mut run)?;
    let splits = seeds
        .iter()
        .map(|&s| split_edges(&graph, o.val, o.test, s).map_err(usage_if_config))
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("dataset,method,auc,ap\n");
    let mut per_method = serde_json::Map::new();
    for method in methods {
        let runs = match splits.iter().map(|s| evaluate_heuristic(s, method)).collect::<Result<Vec<_>, _>>() {
            Ok(r) => r,
            Err(e) if skip_infeasible => {
                warn!("{}: skipped ({e})", method.name());
                let _ = writeln!(csv, "{name},{},n/a,n/a", method.name());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let s = MetricSummary::from_runs(&runs);
        let _ = writeln!(csv, "{name},{},{},{}", method.name(), s.auc.percent(), s.ap.percent());
        println!("{:<8} AUC {}  AP {}", method.name(), s.auc.percent(), s.ap.percent());
        per_method.insert(method.name().to_string(), serde_json::to_value(&s)?);
    }
    run.write("baseline.csv", csv)?;
    run.write_json("baseline.json", &json!({"dataset": name, "seeds": seeds, "methods": per_method}))?;
    run.finish()
}

pub struct SynthOpts {
    pub communities: usize,
    pub size: usize,
    pub p_list: Vec<f64>,
    pub target_degree: (f64, f64),
    pub q: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth(o: SynthOpts) -> Result<()> {
    let p_within = match o.p_list.len() {
        1 => vec![o.p_list[0]; o.communities],
        n if n == o.communities => o.p_list.clone(),
        n => bail!(UsageError(format!("{n} probabilities for {} communities", o.communities))),
    };
    let mut spec = SbmSpec {
        num_communities: o.communities,
        community_size: o.size,
        p_within,
        q_between: o.q.unwrap_or(0.0),
        seed: o.seed,
    };
    spec.validate().map_err(usage_if_config)?;
    if o.q.is_none() {
        let (lo, hi) = o.target_degree;
        spec.q_between = tune_q(&spec, lo, hi).map_err(usage_if_config)?;
    }
    let config = serde_json::to_value(&spec)?;
    let mut run = Run::start("synth", config, &[], vec![o.seed], &o.out)?;
    let graph = generate_sbm(&spec)?;
    let features = graph.features().expect("generator attaches features").to_dense();
    run.write("edges.txt", vdgae_core::graph::edge_list_text(&graph))?;
    run.write("features.csv", matrix_csv(&features))?;
    run.write("labels.csv", labels_csv(graph.labels().expect("generator attaches labels")))?;
    let expected = expected_degree(&spec);
    let degree = graph.average_degree();
    let (lo, hi) = o.target_degree;
    run.write_json(
        "synth.json",
        &json!({
            "spec": spec,
            "nodes": graph.num_nodes(),
            "edges": graph.num_edges(),
            "expected_degree": expected,
            "average_degree": degree,
            "target_degree": [lo, hi],
            "in_target": (lo..=hi).contains(&degree),
        }),
    )?;
    println!(
        "{} nodes, {} edges, q = {:.6}, average degree {:.3} (expected {:.3})",
        graph.num_nodes(),
        graph.num_edges(),
        spec.q_between,
        degree,
        expected
    );
    run.finish()
}

pub struct AnalyzeOpts {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub split: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn analyze(o: AnalyzeOpts) -> Result<()> {
    let inputs = data_inputs(&o.data, &[&Some(o.checkpoint.clone()), &o.split])?;
    let config = json!({"checkpoint": display(&o.checkpoint), "split": o.split.as_deref().map(display)});
    let mut run = Run::start("analyze", config, &inputs, vec![], &o.out)?;
    let model = read_checkpoint(&o.checkpoint)?;
    let graph = load_graph(&o.data, &mut run)?;
    let (graph, which) = match &o.split {
        Some(p) => (SplitManifest::read(p)?.into_split(&graph)?.message_graph, "message"),
        None => (graph, "full"),
    };
    let z = embed(&model, &graph)?;
    let (k, d) = (model.config.channels, model.config.dim);
    let report = embedding_correlation(&z, k, d)?;
    run.write("correlation.csv", matrix_csv(&report.corr))?;
    run.write("embedding.csv", matrix_csv(&z))?;
    run.write_json("embedding.json", &embedding_sidecar(&model, z.rows(), which))?;
    if let Some(labels) = graph.labels() {
        run.write("labels.csv", labels_csv(labels))?;
    }
    if !report.constant_columns.is_empty() {
        warn!("constant embedding columns: {:?}", report.constant_columns);
    }
    run.write_json(
        "analysis.json",
        &json!({
            "channels": k,
            "dim": d,
            "nodes": z.rows(),
            "graph": which,
            "block_contrast": report.block_contrast,
            "constant_columns": report.constant_columns,
        }),
    )?;
    match report.block_contrast {
        Some(c) => println!("block_contrast {c:.4}"),
        None => println!("block_contrast undefined (needs K >= 2, d >= 2 and non-zero cross-block correlation)"),
    }
    run.finish()
}

pub struct GradcheckOpts {
    pub trials: usize,
    pub n_max: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn gradcheck_cmd(o: GradcheckOpts) -> Result<bool> {
    if o.n_max < 3 {
        bail!(UsageError("--n-max must be at least 3".into()));
    }
    let run = match &o.out {
        Some(dir) => Some(Run::start(
            "gradcheck",
            json!({"trials": o.trials, "n_max": o.n_max}),
            &[],
            vec![o.seed],
            dir,
        )?),
        None => None,
    };
    let s = gradcheck::run(o.trials, o.n_max, o.seed)?;
    for t in &s.trials {
        info!(
            "trial {:>3} {:>5} N={:>2} K={} d={} T={}: encoder {:.2e}, van {:.2e}",
            t.trial, t.mode, t.nodes, t.channels, t.dim, t.iterations, t.encoder_rel_err, t.van_rel_err
        );
    }
    println!(
        "{} trials, max relative error {:.3e} (tolerance {:.0e}): {}",
        s.trials.len(),
        s.max_rel_err,
        s.tolerance,
        if s.passed { "PASS" } else { "FAIL" }
    );
    if let Some(mut run) = run {
        run.write_json("gradcheck.json", &s)?;
        run.finish()?;
    }
    Ok(s.passed)
}
