use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use log::{info, warn};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use enadpool::graphdata::{default_features, parse_tu_dataset};
use enadpool::mdgnn::{bfs_distances, exact_distance_masks, reachability_matrices, TopologySet};
use enadpool::model::check::micro_gradient_check;
use enadpool::model::{predictions, prepare_inputs, CheckpointMetadata, GraphInput};
use enadpool::numerics::BackwardFault;
use enadpool::train::{
    cross_validate, mean_std, train_fold, write_curves, write_summary, CrossValidation, TrainedFold,
};
use enadpool::{GraphCollection, Model, ModelConfig, PoolMode, TrainConfig};

use crate::settings::{resolve, Overrides};
use crate::{CliError, EvalArgs, GradcheckArgs, InspectArgs, SplitName, TrainArgs};

const GRADCHECK_TOL: f64 = 1e-4;

/// SHA-256 over the names and contents of every file in the dataset directory.
fn dataset_fingerprint(dir: &Path) -> Result<String, CliError> {
    let io = |e: std::io::Error| CliError::Usage(format!("cannot read {}: {e}", dir.display()));
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut hasher = Sha256::new();
    for path in files {
        let bytes = fs::read(&path).map_err(io)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hasher.update(name.as_bytes());
        hasher.update([0]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn load(dir: &Path) -> Result<GraphCollection, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(parse_tu_dataset(dir)?)
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct DatasetInfo {
    path: PathBuf,
    name: String,
    graphs: usize,
    classes: usize,
    feature_dim: usize,
    degree_cap: usize,
    fingerprint: String,
}

#[derive(Serialize)]
struct Outputs {
    curves: PathBuf,
    summary: PathBuf,
    checkpoints: Vec<PathBuf>,
}

/// Everything needed to replay a training run.
#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    created: String,
    command_line: Vec<String>,
    dataset: DatasetInfo,
    seed: u64,
    fold: Option<usize>,
    parallel_folds: usize,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    outputs: Outputs,
}

fn resolve_out_dir(requested: Option<&Path>, data: &Path) -> Result<PathBuf, CliError> {
    let dir = match requested {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()),
    };
    let absolute = std::path::absolute(&dir).map_err(io_error(&dir))?;
    let data = fs::canonicalize(data).map_err(io_error(data))?;
    if absolute.starts_with(&data) {
        return Err(CliError::Usage(format!(
            "output directory {} lies inside the dataset directory",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    Ok(dir)
}

pub fn train(args: &TrainArgs) -> Result<ExitCode, CliError> {
    let overrides = Overrides {
        mode: args.mode,
        folds: args.folds,
        seed: args.seed,
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        n_max: args.n_max,
        hops: args.hops,
    };
    let (mut model_cfg, train_cfg) = resolve(args.config.as_deref(), &overrides)?;
    if args.parallel_folds == 0 {
        return Err(CliError::Usage("--parallel-folds must be at least 1".into()));
    }
    let raw = load(&args.data)?;
    let collection = default_features(&raw, args.degree_cap)?;
    collection.validate_for_training()?;
    if model_cfg.num_classes != collection.num_classes {
        info!(
            "dataset has {} classes; using that instead of num_classes {}",
            collection.num_classes, model_cfg.num_classes
        );
        model_cfg.num_classes = collection.num_classes;
    }
    if let Some(f) = args.fold {
        if f >= train_cfg.folds {
            return Err(CliError::Usage(format!(
                "fold {f} out of range: valid folds are 0..={}",
                train_cfg.folds - 1
            )));
        }
    }
    let fingerprint = dataset_fingerprint(&args.data)?;
    let out_dir = resolve_out_dir(args.out_dir.as_deref(), &args.data)?;
    let folds: Vec<usize> = match args.fold {
        Some(f) => vec![f],
        None => (0..train_cfg.folds).collect(),
    };
    let outputs = Outputs {
        curves: out_dir.join("curves.csv"),
        summary: out_dir.join("summary.csv"),
        checkpoints: folds.iter().map(|f| out_dir.join(format!("fold{f}.ckpt"))).collect(),
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        created: chrono::Local::now().to_rfc3339(),
        command_line: std::env::args().collect(),
        dataset: DatasetInfo {
            path: args.data.clone(),
            name: collection.name.clone(),
            graphs: collection.len(),
            classes: collection.num_classes,
            feature_dim: collection.feature_dim,
            degree_cap: args.degree_cap,
            fingerprint: fingerprint.clone(),
        },
        seed: train_cfg.seed,
        fold: args.fold,
        parallel_folds: args.parallel_folds,
        model: &model_cfg,
        train: &train_cfg,
        outputs,
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(io_error(&manifest_path))?;
    info!("manifest written to {}", manifest_path.display());

    let labels = collection.labels();
    let inputs = prepare_inputs(&collection, model_cfg.n_max, model_cfg.hops, train_cfg.topology_cache_bytes)?;
    let trained: Vec<TrainedFold> = match args.fold {
        Some(f) => vec![train_fold(&inputs, &labels, f, &model_cfg, &train_cfg)?],
        None => {
            let CrossValidation { folds, .. } =
                cross_validate(&inputs, &labels, &model_cfg, &train_cfg, args.parallel_folds)?;
            folds
        }
    };
    let results: Vec<_> = trained.iter().map(|t| t.result.clone()).collect();
    write_curves(&manifest.outputs.curves, &results)?;
    write_summary(&manifest.outputs.summary, &results)?;
    for (t, path) in trained.iter().zip(&manifest.outputs.checkpoints) {
        let train_inputs: Vec<&GraphInput> = t.split.train.iter().map(|&i| &inputs[i]).collect();
        let train_labels: Vec<usize> = t.split.train.iter().map(|&i| labels[i]).collect();
        let meta = CheckpointMetadata {
            dataset: Some(collection.name.clone()),
            dataset_fingerprint: Some(fingerprint.clone()),
            fold: Some(t.result.fold),
            epoch: Some(t.result.best_epoch),
            train_accuracy: Some(t.model.accuracy(&train_inputs, &train_labels)?),
            val_accuracy: Some(t.result.best_val_acc),
            train_ids: t.split.train.clone(),
            val_ids: t.split.val.clone(),
            degree_cap: Some(args.degree_cap),
        };
        t.model.save(path, &meta)?;
    }
    let accs: Vec<f64> = results.iter().map(|r| r.best_val_acc).collect();
    let (mean, std) = mean_std(&accs);
    println!(
        "validation accuracy over {} fold(s): {mean:.4}±{std:.4} (outputs in {})",
        accs.len(),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode, CliError> {
    let modes: Vec<PoolMode> = match args.mode {
        Some(m) => vec![m],
        None => PoolMode::ALL.to_vec(),
    };
    let fault = args.fault_scale.map(BackwardFault::ScaleMatmulLhs);
    let mut all_pass = true;
    for mode in modes {
        let report = micro_gradient_check(mode, args.seed, fault)?;
        let pass = report.max_rel_error < GRADCHECK_TOL;
        all_pass &= pass;
        println!(
            "{} mode {mode}: max relative error {:.3e} over {} coordinates (tolerance {GRADCHECK_TOL:e})",
            if pass { "PASS" } else { "FAIL" },
            report.max_rel_error,
            report.coordinates
        );
    }
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

/// Renders matrices side by side, separated by `|`.
fn side_by_side(titles: &[&str], blocks: &[Vec<Vec<String>>]) -> String {
    let widths: Vec<usize> = blocks
        .iter()
        .zip(titles)
        .map(|(b, t)| {
            let cell = b.iter().flatten().map(String::len).max().unwrap_or(1);
            let cols = b.first().map_or(0, Vec::len);
            (cols * (cell + 1)).max(t.len())
        })
        .collect();
    let cell_widths: Vec<usize> = blocks
        .iter()
        .map(|b| b.iter().flatten().map(String::len).max().unwrap_or(1))
        .collect();
    let mut out = String::new();
    let header: Vec<String> = titles.iter().zip(&widths).map(|(t, w)| format!("{t:<w$}")).collect();
    let _ = writeln!(out, "{}", header.join(" | ").trim_end());
    let rows = blocks.first().map_or(0, Vec::len);
    for r in 0..rows {
        let parts: Vec<String> = blocks
            .iter()
            .zip(&widths)
            .zip(&cell_widths)
            .map(|((b, w), cw)| {
                let line: String = b[r].iter().map(|c| format!("{c:>cw$} ")).collect();
                format!("{line:<w$}")
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    }
    out
}

fn cells(m: &Array2<f64>) -> Vec<Vec<String>> {
    m.rows().into_iter().map(|r| r.iter().map(|&v| format_value(v)).collect()).collect()
}

pub fn inspect_masks(args: &InspectArgs) -> Result<ExitCode, CliError> {
    let collection = load(&args.data)?;
    let Some(graph) = collection.graphs.get(args.graph) else {
        return Err(CliError::Usage(if collection.is_empty() {
            "dataset has no graphs".to_string()
        } else {
            format!(
                "graph index {} out of range: valid indices are 0..={}",
                args.graph,
                collection.len() - 1
            )
        }));
    };
    let adjacency = graph.dense_adjacency();
    let reach = reachability_matrices(&adjacency, args.hops);
    let masks = exact_distance_masks(&reach);
    let topologies = TopologySet::from_adjacency(&adjacency, args.hops).topologies;
    let bfs = bfs_distances(&adjacency);
    println!(
        "graph {} of {}: {} nodes, {} edges, label {}",
        args.graph,
        collection.name,
        graph.node_count(),
        graph.edge_count(),
        graph.label
    );
    for h in 0..=args.hops {
        println!("\nhop {h}");
        print!(
            "{}",
            side_by_side(
                &[&format!("R_{h}"), &format!("U_{h}"), &format!("T_{h}")],
                &[cells(&reach[h]), cells(&masks[h]), cells(&topologies[h])],
            )
        );
    }
    let distances: Vec<Vec<String>> = bfs
        .iter()
        .map(|row| row.iter().map(|d| d.map_or("-".to_string(), |d| d.to_string())).collect())
        .collect();
    println!("\nBFS distances");
    print!("{}", side_by_side(&["d"], &[distances]));
    let agrees = bfs.iter().enumerate().all(|(i, row)| {
        row.iter().enumerate().all(|(j, d)| {
            masks
                .iter()
                .enumerate()
                .all(|(h, u)| (u[[i, j]] == 1.0) == (*d == Some(h)))
        })
    });
    println!("\nU_h agrees with BFS distances for h <= {}: {}", args.hops, if agrees { "yes" } else { "no" });
    Ok(if agrees { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn eval(args: &EvalArgs) -> Result<ExitCode, CliError> {
    let (model, meta) = Model::load(&args.checkpoint)?;
    let raw = load(&args.data)?;
    let cap = meta.degree_cap.unwrap_or(10);
    let collection = default_features(&raw, cap)?;
    if collection.feature_dim != model.feature_dim() {
        return Err(enadpool::Error::Config(format!(
            "checkpoint expects {} node features but the dataset provides {}",
            model.feature_dim(),
            collection.feature_dim
        ))
        .into());
    }
    let fingerprint = dataset_fingerprint(&args.data)?;
    if meta.dataset_fingerprint.as_deref().is_some_and(|f| f != fingerprint) {
        warn!("dataset fingerprint differs from the one recorded in the checkpoint");
    }
    let (name, ids) = match args.split {
        SplitName::Train => ("train", &meta.train_ids),
        SplitName::Val => ("val", &meta.val_ids),
    };
    if ids.is_empty() {
        return Err(CliError::Usage(format!("checkpoint records no {name} split")));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= collection.len()) {
        return Err(CliError::Usage(format!(
            "checkpoint refers to graph {bad} but the dataset has {}",
            collection.len()
        )));
    }
    let classes = model.config().num_classes;
    let subset = collection.subset(ids);
    let labels = subset.labels();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(enadpool::Error::Data(format!("label {l} outside the model's {classes} classes")).into());
    }
    let cfg = model.config();
    let inputs = prepare_inputs(&subset, cfg.n_max, cfg.hops, 0)?;
    let refs: Vec<&GraphInput> = inputs.iter().collect();
    let logits = model.forward_inputs(&refs)?.main;
    let predicted = predictions(&logits);
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in labels.iter().zip(&predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / labels.len() as f64;
    println!("{name} accuracy: {accuracy:.4} ({correct}/{} graphs)", labels.len());
    if let Some(logged) = match args.split {
        SplitName::Train => meta.train_accuracy,
        SplitName::Val => meta.val_accuracy,
    } {
        println!("accuracy recorded at save time: {logged:.4}");
    }
    println!("confusion (rows true class, columns predicted class):");
    for (t, row) in confusion.iter().enumerate() {
        let counts: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        println!("  {t}: {}", counts.join(" "));
    }
    if let Some(out) = &args.out {
        let mut csv = String::from("metric,value\n");
        let _ = writeln!(csv, "split,{name}");
        let _ = writeln!(csv, "graphs,{}", labels.len());
        let _ = writeln!(csv, "correct,{correct}");
        let _ = writeln!(csv, "accuracy,{accuracy}");
        for (t, row) in confusion.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                let _ = writeln!(csv, "confusion_{t}_{p},{c}");
            }
        }
        fs::write(out, csv).map_err(io_error(out))?;
    }
    Ok(ExitCode::SUCCESS)
}
