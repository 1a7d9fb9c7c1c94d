//! Classifier training, stratified k-fold splitting and cross-validation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Patch;
use crate::netgraph::{Mode, NetworkSpec};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy_categorical, mean_of, Sgd, Tape, Tensor};

use super::{saturation_epoch, CellClass, ConfusionMatrix};

#[derive(Debug, Clone)]
pub struct ClsTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Plateau width (percentage points) for the saturation epoch.
    pub epsilon: f64,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        ClsTrainConfig { epochs: 10, batch: 16, lr: 0.01, momentum: 0.9, epsilon: 0.5 }
    }
}

/// Validation metrics recorded after one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochEval {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Per-fold result: the validation curve plus the derived best-epoch and
/// saturation-epoch figures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub epochs: Vec<EpochEval>,
    pub best_accuracy: f64,
    /// 1-based.
    pub saturation_epoch: usize,
    pub saturation_accuracy: f64,
    pub saturation_confusion: ConfusionMatrix,
}

impl FoldReport {
    fn from_curve(fold: usize, epochs: Vec<EpochEval>, epsilon: f64) -> Result<FoldReport> {
        let curve: Vec<f64> = epochs.iter().map(|e| e.accuracy).collect();
        let sat = saturation_epoch(&curve, epsilon)?;
        let best = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(FoldReport {
            fold,
            best_accuracy: best,
            saturation_epoch: sat,
            saturation_accuracy: curve[sat - 1],
            saturation_confusion: epochs[sat - 1].confusion,
            epochs,
        })
    }
}

/// Cross-validation roll-up for one model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub method: String,
    pub mean_saturation_accuracy: f64,
    pub mean_best_accuracy: f64,
    /// Sample standard deviation (n−1) of best-epoch fold accuracies.
    pub std_best_accuracy: f64,
    /// Rounded mean of the per-fold saturation epochs, 1-based.
    pub saturation_epoch: usize,
}

fn patch_tensor<T: Scalar>(p: &Patch<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(&[3, p.size, p.size], p.data.clone())
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the network on every patch and tallies accuracy plus the
/// confusion matrix against the patch labels.
pub fn evaluate_classifier<T: Scalar>(
    net: &NetworkSpec<T>,
    patches: &[Patch<T>],
) -> Result<EpochEval> {
    if patches.is_empty() {
        return Err(Error::Contract("evaluating a classifier on zero patches".into()));
    }
    let mut confusion = ConfusionMatrix::default();
    for p in patches {
        let truth = p
            .label
            .ok_or_else(|| Error::Contract("evaluation patch carries no label".into()))?;
        let probs = net.infer(&patch_tensor(p)?)?;
        let pred = CellClass::from_index(argmax(&probs.data()))?;
        confusion.record(truth, pred);
    }
    Ok(EpochEval { accuracy: confusion.accuracy(), confusion })
}

/// Trains in place on `train`, evaluating on `val` after every epoch.
/// Only parameters at or above the network's freeze point move. With
/// `epochs == 0` the network is returned untouched and the curve is empty.
pub fn train_classifier<T: Scalar>(
    net: &mut NetworkSpec<T>,
    train: &[Patch<T>],
    val: &[Patch<T>],
    cfg: &ClsTrainConfig,
    seed: u64,
) -> Result<Vec<EpochEval>> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if cfg.lr < 0.0 {
        return Err(Error::Config("learning rate must be nonnegative".into()));
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut class_counts = [0usize; 3];
    for p in train {
        let label =
            p.label.ok_or_else(|| Error::Config("training patch carries no label".into()))?;
        class_counts[label.index()] += 1;
    }
    if let Some(missing) = CellClass::ALL.iter().find(|c| class_counts[c.index()] == 0) {
        return Err(Error::Config(format!(
            "class {missing} is absent from the training split"
        )));
    }

    let mut opt = if cfg.lr > 0.0 {
        Some(Sgd::new(T::cast_f64(cfg.lr), T::cast_f64(cfg.momentum))?)
    } else {
        None
    };
    let params = net.trainable_params();
    let decay_at = (cfg.epochs * 3).div_ceil(4);
    let mut evals = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch == decay_at && cfg.epochs > 1 {
            if let Some(opt) = opt.as_mut() {
                opt.set_lr(opt.lr() * T::cast_f64(0.1));
            }
        }
        let mut shuffle_rng = stream(seed, "cls-epoch", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            let tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let p = &train[idx];
                let probs = net.forward_on(&tape, &patch_tensor(p)?, Mode::Train)?;
                losses.push(cross_entropy_categorical(
                    &tape,
                    &probs,
                    p.label.expect("validated above").index(),
                )?);
            }
            let loss = mean_of(&tape, &losses)?;
            if let Some(opt) = opt.as_mut() {
                tape.backward(&loss)?;
                opt.step(&params)?;
            }
        }
        evals.push(evaluate_classifier(net, val)?);
    }
    Ok(evals)
}

/// Stratified k-fold split over patch indices: per class, items are
/// shuffled by `seed` and dealt round-robin. Returns k (train,
/// validation) index pairs; validation folds partition the input.
pub fn kfold_split(labels: &[CellClass], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k == 0 || k > labels.len() {
        return Err(Error::Config(format!(
            "k = {k} folds over {} items is not splittable",
            labels.len()
        )));
    }
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in CellClass::ALL {
        let mut idxs: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut rng = stream(seed, "fold-class", class.index() as u64);
        idxs.shuffle(&mut rng);
        for (pos, idx) in idxs.into_iter().enumerate() {
            fold_members[pos % k].push(idx);
        }
    }
    let mut splits = Vec::with_capacity(k);
    for f in 0..k {
        let mut val = fold_members[f].clone();
        val.sort_unstable();
        let mut tr: Vec<usize> = fold_members
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, m)| m.iter().copied())
            .collect();
        tr.sort_unstable();
        splits.push((tr, val));
    }
    Ok(splits)
}

/// Trains one fresh model per fold (built by `build` from a fold-derived
/// seed), and aggregates summary statistics: means over folds, the
/// sample std of best-epoch accuracies, and the confusion matrices at
/// each fold's saturation epoch summed over folds.
pub fn run_cross_validation<T: Scalar, F>(
    method: &str,
    build: F,
    patches: &[Patch<T>],
    k: usize,
    cfg: &ClsTrainConfig,
    seed: u64,
) -> Result<(CvSummary, ConfusionMatrix, Vec<FoldReport>)>
where
    F: Fn(u64) -> Result<NetworkSpec<T>>,
{
    if cfg.epochs == 0 {
        return Err(Error::Config("cross-validation needs at least one epoch".into()));
    }
    let labels: Vec<CellClass> = patches
        .iter()
        .map(|p| p.label.ok_or_else(|| Error::Config("unlabeled patch in CV set".into())))
        .collect::<Result<_>>()?;
    let splits = kfold_split(&labels, k, derive_seed(seed, "kfold", 0))?;
    let mut reports = Vec::with_capacity(k);
    let mut summed = ConfusionMatrix::default();
    for (fold, (tr, val)) in splits.into_iter().enumerate() {
        let fold_seed = derive_seed(seed, "fold", fold as u64);
        let mut net = build(fold_seed)?;
        let train_set: Vec<Patch<T>> = tr.iter().map(|&i| patches[i].clone()).collect();
        let val_set: Vec<Patch<T>> = val.iter().map(|&i| patches[i].clone()).collect();
        let evals = train_classifier(&mut net, &train_set, &val_set, cfg, fold_seed)?;
        let report = FoldReport::from_curve(fold, evals, cfg.epsilon)?;
        summed.add(&report.saturation_confusion);
        reports.push(report);
    }
    let n = reports.len() as f64;
    let mean_sat = reports.iter().map(|r| r.saturation_accuracy).sum::<f64>() / n;
    let mean_best = reports.iter().map(|r| r.best_accuracy).sum::<f64>() / n;
    let std_best = if reports.len() > 1 {
        let var = reports
            .iter()
            .map(|r| (r.best_accuracy - mean_best).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        var.sqrt()
    } else {
        0.0
    };
    let mean_epoch =
        reports.iter().map(|r| r.saturation_epoch as f64).sum::<f64>() / n;
    Ok((
        CvSummary {
            method: method.to_string(),
            mean_saturation_accuracy: mean_sat,
            mean_best_accuracy: mean_best,
            std_best_accuracy: std_best,
            saturation_epoch: mean_epoch.round() as usize,
        },
        summed,
        reports,
    ))
}
