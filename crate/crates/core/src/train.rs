//! Optimization: Adam, stratified k-fold splits, early stopping and
//! cross-validation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::batch_indices;
use crate::model::{GraphInput, Model, ModelConfig, Parameter};

/// Optimization settings. Field names double as configuration-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub seed: u64,
    /// Upper bound on the summed squared node counts recorded on one tape.
    pub chunk_budget: usize,
    /// Memory allowed for cached first-layer topologies.
    pub topology_cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            folds: 10,
            seed: 0,
            chunk_budget: 1 << 20,
            topology_cache_bytes: 1 << 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.folds < 2 {
            return fail(format!("folds is {}, need at least 2", self.folds));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_SPLIT: u64 = 4;

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &[Parameter], learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Usage(format!(
                "{} parameters, {} gradients, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.dim() != g.dim() {
                return Err(Error::dim(
                    "adam step",
                    &[p.value.nrows(), p.value.ncols()],
                    &[g.nrows(), g.ncols()],
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.learning_rate, self.epsilon, self.weight_decay);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|x, &g, m, v| {
                    let g = g + wd * *x;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Train and validation graph indices of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified k-fold partition.
///
/// Indices are shuffled, stably grouped by class and dealt round-robin to the
/// folds, so every fold holds each class within one graph of its share. When
/// some class has fewer members than there are folds the split falls back to
/// an unstratified deal.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Split>> {
    if folds < 2 {
        return Err(Error::Config(format!("folds is {folds}, need at least 2")));
    }
    if folds > labels.len() {
        return Err(Error::Config(format!(
            "{folds} folds for {} graphs",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, 0)));
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c > 0 && c < folds) {
        warn!("a class has fewer than {folds} graphs; folds are not stratified");
    } else {
        order.sort_by_key(|&i| labels[i]);
    }
    let mut assigned = vec![Vec::new(); folds];
    for (pos, &i) in order.iter().enumerate() {
        assigned[pos % folds].push(i);
    }
    Ok((0..folds)
        .map(|f| {
            let mut val = assigned[f].clone();
            val.sort_unstable();
            let mut train: Vec<usize> = (0..folds).filter(|&g| g != f).flat_map(|g| assigned[g].iter().copied()).collect();
            train.sort_unstable();
            Split { train, val }
        })
        .collect())
}

/// A single shuffled split holding out `val_fraction` of the graphs, stratified by class.
pub fn holdout_split(labels: &[usize], val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let folds = (1.0 / val_fraction).round().max(2.0) as usize;
    Ok(kfold_split(labels, folds.min(labels.len()), seed)?.swap_remove(0))
}

/// Patience rule on validation accuracy: only strict improvements reset it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    /// Records the accuracy of `epoch` (1-based). Returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> bool {
        let better = self.best.is_none_or(|(_, b)| accuracy > b);
        if better {
            self.best = Some((epoch, accuracy));
        }
        better
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(e, _)| epoch - e >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub curve: Vec<EpochRecord>,
}

impl FoldResult {
    pub fn epochs_run(&self) -> usize {
        self.curve.len()
    }
}

/// A fold's result with the parameters of its best validation epoch restored.
#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub result: FoldResult,
    pub model: Model,
    pub split: Split,
}

/// Trains a fresh model on `split.train`, validating on `split.val` after
/// every epoch, and keeps the parameters of the best validation epoch.
pub fn train_on_split(
    inputs: &[GraphInput],
    labels: &[usize],
    split: &Split,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    fold: usize,
) -> Result<TrainedFold> {
    train_cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Usage("training and validation sets must be non-empty".into()));
    }
    let feature_dim = inputs
        .first()
        .map(|g| g.features.ncols())
        .ok_or_else(|| Error::Data("empty collection".into()))?;
    let seed = train_cfg.seed;
    let mut model = Model::new(model_cfg.clone(), feature_dim, derive_seed(seed, STREAM_INIT, fold as u64))?;
    let mut adam = Adam::new(model.params(), train_cfg.learning_rate, train_cfg.weight_decay);
    let mut dropout = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DROPOUT, fold as u64));
    let val_inputs: Vec<&GraphInput> = split.val.iter().map(|&i| &inputs[i]).collect();
    let val_labels: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();

    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut best_params: Vec<Array2<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    let mut curve = Vec::new();
    for epoch in 1..=train_cfg.max_epochs {
        let shuffle = derive_seed(seed, STREAM_SHUFFLE, ((fold as u64) << 32) | epoch as u64);
        let batches = batch_indices(split.train.len(), train_cfg.batch_size, Some(shuffle))?;
        let mut loss_sum = 0.0;
        for batch in batches {
            let ids: Vec<usize> = batch.iter().map(|&k| split.train[k]).collect();
            let batch_inputs: Vec<&GraphInput> = ids.iter().map(|&i| &inputs[i]).collect();
            let batch_labels: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let (loss, grads) =
                model.loss_and_gradients(&batch_inputs, &batch_labels, Some(&mut dropout), train_cfg.chunk_budget)?;
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss * ids.len() as f64;
        }
        let train_loss = loss_sum / split.train.len() as f64;
        let val_acc = model.accuracy(&val_inputs, &val_labels)?;
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        debug!("fold {fold} epoch {epoch}: loss {train_loss:.5} val {val_acc:.4}");
        if stopper.observe(epoch, val_acc) {
            for (dst, p) in best_params.iter_mut().zip(model.params()) {
                dst.assign(&p.value);
            }
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    let (best_epoch, best_val_acc) = stopper.best().expect("at least one epoch ran");
    model.set_params(&best_params)?;
    info!("fold {fold}: best val acc {best_val_acc:.4} at epoch {best_epoch}");
    Ok(TrainedFold {
        result: FoldResult {
            fold,
            best_val_acc,
            best_epoch,
            curve,
        },
        model,
        split: split.clone(),
    })
}

/// Trains fold `fold` of a `train_cfg.folds`-way stratified split.
pub fn train_fold(
    inputs: &[GraphInput],
    labels: &[usize],
    fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainedFold> {
    let splits = kfold_split(labels, train_cfg.folds, train_cfg.seed)?;
    let split = splits
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} out of range 0..{}", splits.len())))?;
    train_on_split(inputs, labels, split, model_cfg, train_cfg, fold)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    // Shifted by the first value: identical inputs give exactly zero spread.
    let n = values.len() as f64;
    let shift = values[0];
    let offset = values.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - shift - offset).powi(2)).sum::<f64>() / n;
    (shift + offset, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<TrainedFold>,
    pub mean: f64,
    pub std: f64,
}

impl CrossValidation {
    pub fn results(&self) -> Vec<FoldResult> {
        self.folds.iter().map(|f| f.result.clone()).collect()
    }
}

/// Runs every fold and summarizes the best validation accuracies.
/// `parallel` > 1 trains that many folds at once on separate threads.
pub fn cross_validate(
    inputs: &[GraphInput],
    labels: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    parallel: usize,
) -> Result<CrossValidation> {
    let splits = kfold_split(labels, train_cfg.folds, train_cfg.seed)?;
    let run = |(f, s): (usize, &Split)| train_on_split(inputs, labels, s, model_cfg, train_cfg, f);
    let folds: Vec<TrainedFold> = if parallel > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| splits.par_iter().enumerate().map(run).collect::<Result<_>>())?
    } else {
        splits.iter().enumerate().map(run).collect::<Result<_>>()?
    };
    let accs: Vec<f64> = folds.iter().map(|f| f.result.best_val_acc).collect();
    let (mean, std) = mean_std(&accs);
    Ok(CrossValidation { folds, mean, std })
}

pub const CURVE_HEADER: &str = "fold,epoch,train_loss,val_acc";
pub const SUMMARY_HEADER: &str = "fold,best_val_acc,best_epoch";

pub fn curves_csv(results: &[FoldResult]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in results {
        for e in &r.curve {
            let _ = writeln!(out, "{},{},{},{}", r.fold, e.epoch, e.train_loss, e.val_acc);
        }
    }
    out
}

pub fn summary_csv(results: &[FoldResult]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in results {
        let _ = writeln!(out, "{},{},{}", r.fold, r.best_val_acc, r.best_epoch);
    }
    out
}

pub fn write_curves(path: &Path, results: &[FoldResult]) -> Result<()> {
    fs::write(path, curves_csv(results))?;
    Ok(())
}

pub fn write_summary(path: &Path, results: &[FoldResult]) -> Result<()> {
    fs::write(path, summary_csv(results))?;
    Ok(())
}
