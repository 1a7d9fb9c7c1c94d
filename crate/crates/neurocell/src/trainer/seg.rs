//! Segmentation training: pixelwise cross-entropy over whole scenes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{elastic_deform_pair, threshold_map, ElasticSpec, Raster};
use crate::netgraph::{Mode, NetworkSpec};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy_pixelwise, mean_of, Sgd, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Elastic augmentation of each sampled scene, if set.
    pub elastic: Option<ElasticSpec>,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 10,
            iters_per_epoch: 1000,
            batch: 1,
            lr: 0.01,
            momentum: 0.9,
            elastic: None,
        }
    }
}

fn raster_tensor<T: Scalar>(raster: &Raster<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(&[1, raster.height, raster.width], raster.data.clone())
}

/// Trains in place; returns the per-epoch mean loss curve. `lr == 0`
/// evaluates losses but never steps, leaving parameters untouched.
pub fn train_segmentation<T: Scalar>(
    net: &mut NetworkSpec<T>,
    scenes: &[(Raster<T>, Raster<T>)],
    cfg: &SegTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::Config("segmentation training needs at least one scene".into()));
    }
    if cfg.epochs == 0 || cfg.iters_per_epoch == 0 || cfg.batch == 0 {
        return Err(Error::Config("epochs, iterations and batch must be positive".into()));
    }
    if cfg.lr < 0.0 {
        return Err(Error::Config("learning rate must be nonnegative".into()));
    }
    for (i, (img, target)) in scenes.iter().enumerate() {
        if img.height != target.height || img.width != target.width {
            return Err(Error::Dimension(format!("scene {i} image/target shapes differ")));
        }
        if img.height % net.pool_factor != 0 || img.width % net.pool_factor != 0 {
            return Err(Error::Dimension(format!(
                "scene {i} is {}x{}; extents must divide the pool factor {}",
                img.height, img.width, net.pool_factor
            )));
        }
    }

    let mut opt = if cfg.lr > 0.0 {
        Some(Sgd::new(T::cast_f64(cfg.lr), T::cast_f64(cfg.momentum))?)
    } else {
        None
    };
    let params = net.trainable_params();
    let decay_at = (cfg.epochs * 3).div_ceil(4);
    let mut sample_rng = stream(seed, "seg-sample", 0);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut iter_counter = 0u64;
    for epoch in 0..cfg.epochs {
        if epoch == decay_at && cfg.epochs > 1 {
            if let Some(opt) = opt.as_mut() {
                opt.set_lr(opt.lr() * T::cast_f64(0.1));
            }
        }
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.iters_per_epoch {
            let tape = Tape::new();
            let mut losses = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let idx = sample_rng.gen_range(0..scenes.len());
                let (img, target) = &scenes[idx];
                let (img, target) = match &cfg.elastic {
                    Some(el) => {
                        let mut warp_rng = stream(seed, "seg-elastic", iter_counter);
                        elastic_deform_pair(img, target, el, &mut warp_rng)?
                    }
                    None => (img.clone(), target.clone()),
                };
                iter_counter += 1;
                let pred = net.forward_on(&tape, &raster_tensor(&img)?, Mode::Train)?;
                losses.push(cross_entropy_pixelwise(&tape, &pred, &raster_tensor(&target)?)?);
            }
            let loss = mean_of(&tape, &losses)?;
            epoch_loss += loss.item()?.to_f64_lossy();
            if let Some(opt) = opt.as_mut() {
                tape.backward(&loss)?;
                opt.step(&params)?;
            }
        }
        curve.push(epoch_loss / cfg.iters_per_epoch as f64);
    }
    Ok(curve)
}

/// Percent of pixels on which the two maps agree after binarizing both
/// at `tau`.
pub fn segmentation_accuracy<T: Scalar>(
    pred: &Raster<T>,
    target: &Raster<T>,
    tau: f64,
) -> Result<f64> {
    if pred.height != target.height || pred.width != target.width {
        return Err(Error::Dimension(format!(
            "segmentation_accuracy shapes differ: {}x{} vs {}x{}",
            pred.height, pred.width, target.height, target.width
        )));
    }
    let a = threshold_map(pred, tau)?;
    let b = threshold_map(target, tau)?;
    let agree = a.data.iter().zip(b.data.iter()).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.data.len() as f64 * 100.0)
}
