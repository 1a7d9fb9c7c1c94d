use rand::Rng;

use super::*;
use crate::imaging::{Patch, Raster};
use crate::netgraph::{build_residual_classifier, build_unet, NetworkSpec};
use crate::rng::stream;
use crate::synthdata::{generate_scene, SceneSpec};
use crate::imaging::{fuse_grayscale, normalize_channel, CH_GCAMP, CH_MCHERRY};

// ---- confusion matrix ----

fn published_matrix() -> ConfusionMatrix {
    ConfusionMatrix { counts: [[159, 4, 13], [1, 185, 3], [12, 1, 21]] }
}

#[test]
fn sensitivities_match_published_figures() {
    let m = published_matrix();
    assert!((m.sensitivity(CellClass::Excitatory) - 90.34).abs() <= 0.01);
    assert!((m.sensitivity(CellClass::Glial) - 97.88).abs() <= 0.01);
    assert!((m.sensitivity(CellClass::Inhibitory) - 61.76).abs() <= 0.01);
}

#[test]
fn overall_accuracy_matches_published_figure() {
    assert!((published_matrix().accuracy() - 91.48).abs() <= 0.01);
}

#[test]
fn matrix_identities_hold() {
    let m = published_matrix();
    assert_eq!(m.total(), 399);
    assert_eq!(m.row_sum(CellClass::Excitatory), 176);
    assert_eq!(m.row_sum(CellClass::Glial), 189);
    assert_eq!(m.row_sum(CellClass::Inhibitory), 34);
    assert_eq!(m.trace(), 159 + 185 + 21);
    assert!((m.accuracy() - m.trace() as f64 / m.total() as f64 * 100.0).abs() < 1e-12);
}

#[test]
fn specificity_by_hand() {
    let m = published_matrix();
    // excitatory column: 13 false positives among 399 − 176 negatives
    let want = (223.0 - 13.0) / 223.0 * 100.0;
    assert!((m.specificity(CellClass::Excitatory) - want).abs() < 1e-9);
}

#[test]
fn perfect_predictions_are_diagonal() {
    let truths = vec![CellClass::Excitatory, CellClass::Glial, CellClass::Inhibitory];
    let (m, sens, acc) = confusion_and_metrics(&truths, &truths).unwrap();
    assert_eq!(m.trace(), 3);
    assert_eq!(m.total(), 3);
    assert_eq!(sens, [100.0, 100.0, 100.0]);
    assert_eq!(acc, 100.0);
}

#[test]
fn confusion_rejects_bad_inputs() {
    assert!(ConfusionMatrix::from_pairs(&[], &[]).is_err());
    assert!(
        ConfusionMatrix::from_pairs(&[CellClass::Glial], &[]).is_err()
    );
}

// ---- saturation epoch ----

#[test]
fn saturation_epoch_plateau_rule() {
    assert_eq!(saturation_epoch(&[50.0, 80.0, 90.0, 90.2, 90.3], 0.5).unwrap(), 3);
}

#[test]
fn saturation_epoch_boundaries() {
    // every step is a full point; only the last epoch qualifies
    assert_eq!(saturation_epoch(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 4);
    assert_eq!(saturation_epoch(&[7.0, 7.0, 7.0], 0.5).unwrap(), 1);
    assert_eq!(saturation_epoch(&[42.0], 0.5).unwrap(), 1);
    assert!(saturation_epoch(&[], 0.5).is_err());
}

// ---- reports ----

fn sample_summary() -> CvSummary {
    CvSummary {
        method: "residual (k=0)".into(),
        mean_saturation_accuracy: 91.25,
        mean_best_accuracy: 92.5,
        std_best_accuracy: 1.125,
        saturation_epoch: 8,
    }
}

#[test]
fn report_has_header_and_three_decimals() {
    let (csv, text) = report_tables(&[sample_summary()]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("method,"));
    assert!(lines[1].contains("91.250"));
    assert!(lines[1].contains("92.500"));
    assert!(lines[1].contains("1.125"));
    assert!(text.contains("91.250"));
}

#[test]
fn report_csv_round_trips() {
    let summaries = vec![sample_summary(), CvSummary { method: "b".into(), ..sample_summary() }];
    let (csv, _) = report_tables(&summaries);
    assert_eq!(parse_report_csv(&csv).unwrap(), summaries);
}

// ---- segmentation metrics ----

#[test]
fn segmentation_accuracy_extremes() {
    let target = Raster::new(2, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(segmentation_accuracy(&target, &target, 0.5).unwrap(), 100.0);
    let inverse = Raster::new(2, 5, target.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    assert_eq!(segmentation_accuracy(&inverse, &target, 0.5).unwrap(), 0.0);
    // blank prediction vs 10% foreground
    let blank = Raster::new(2, 5, vec![0.49; 10]).unwrap();
    assert_eq!(segmentation_accuracy(&blank, &target, 0.5).unwrap(), 90.0);
    let other = Raster::<f64>::zeros(3, 3);
    assert!(segmentation_accuracy(&other, &target, 0.5).is_err());
}

// ---- k-fold ----

#[test]
fn kfold_partitions_and_stratifies() {
    let labels: Vec<CellClass> = (0..100)
        .map(|i| match i % 10 {
            0..=4 => CellClass::Excitatory,
            5..=8 => CellClass::Glial,
            _ => CellClass::Inhibitory,
        })
        .collect();
    let splits = kfold_split(&labels, 10, 5).unwrap();
    assert_eq!(splits.len(), 10);
    let mut seen = vec![false; 100];
    for (tr, val) in &splits {
        assert_eq!(val.len(), 10);
        assert_eq!(tr.len(), 90);
        for &i in val {
            assert!(!seen[i], "index {i} in two validation folds");
            seen[i] = true;
            assert!(!tr.contains(&i));
        }
        // per-fold class counts within ±1 of the global 5/4/1 proportion
        let mut counts = [0usize; 3];
        for &i in val {
            counts[labels[i].index()] += 1;
        }
        for (got, want) in counts.iter().zip([5usize, 4, 1]) {
            assert!(got.abs_diff(want) <= 1);
        }
    }
    assert!(seen.iter().all(|s| *s));
}

#[test]
fn kfold_is_seed_deterministic() {
    let labels: Vec<CellClass> =
        (0..100).map(|i| CellClass::from_index(i % 3).unwrap()).collect();
    let a = kfold_split(&labels, 10, 7).unwrap();
    let b = kfold_split(&labels, 10, 7).unwrap();
    let c = kfold_split(&labels, 10, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn kfold_rejects_oversized_k() {
    let labels = vec![CellClass::Glial; 5];
    assert!(kfold_split(&labels, 6, 0).is_err());
    assert!(kfold_split(&labels, 0, 0).is_err());
}

// ---- segmentation training ----

fn tiny_scenes(n: usize, hw: usize, seed: u64) -> Vec<(Raster<f64>, Raster<f64>)> {
    (0..n)
        .map(|i| {
            let spec = SceneSpec {
                height: hw,
                width: hw,
                n_cells: 3,
                radius_range: (3.0, 5.0),
                seed: seed + i as u64,
                ..Default::default()
            };
            let (img, truth) = generate_scene::<f64>(&spec).unwrap();
            let mut norm = crate::imaging::MultiChannelImage::new(hw, hw);
            norm.insert(CH_MCHERRY, normalize_channel(img.channel(CH_MCHERRY).unwrap()).unwrap())
                .unwrap();
            norm.insert(CH_GCAMP, normalize_channel(img.channel(CH_GCAMP).unwrap()).unwrap())
                .unwrap();
            (fuse_grayscale(&norm).unwrap(), truth.prob_map)
        })
        .collect()
}

#[test]
fn zero_lr_leaves_parameters_and_losses_flat() {
    let mut rng = stream(1, "segtest", 0);
    let mut net: NetworkSpec<f64> = build_unet(1, 4, 1, 1, &mut rng).unwrap();
    let before: Vec<Vec<f64>> =
        net.all_params().iter().map(|p| p.data().clone()).collect();
    let scenes = tiny_scenes(1, 32, 100);
    let cfg = SegTrainConfig { epochs: 3, iters_per_epoch: 4, lr: 0.0, ..Default::default() };
    let curve = train_segmentation(&mut net, &scenes, &cfg, 9).unwrap();
    let after: Vec<Vec<f64>> = net.all_params().iter().map(|p| p.data().clone()).collect();
    assert_eq!(before, after);
    assert!((curve[0] - curve[1]).abs() < 1e-12 && (curve[1] - curve[2]).abs() < 1e-12);
}

#[test]
fn segmentation_loss_improves_and_is_deterministic() {
    let scenes = tiny_scenes(4, 32, 200);
    let run = || {
        let mut rng = stream(7, "segtest", 1);
        let mut net: NetworkSpec<f64> = build_unet(1, 4, 1, 1, &mut rng).unwrap();
        let cfg = SegTrainConfig { epochs: 3, iters_per_epoch: 25, lr: 0.05, ..Default::default() };
        train_segmentation(&mut net, &scenes, &cfg, 7).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.last().unwrap() < a.first().unwrap(), "curve {a:?}");
}

#[test]
fn segmentation_rejects_empty_and_misshapen_input() {
    let mut rng = stream(1, "segtest", 2);
    let mut net: NetworkSpec<f64> = build_unet(1, 4, 1, 1, &mut rng).unwrap();
    let cfg = SegTrainConfig::default();
    assert!(train_segmentation(&mut net, &[], &cfg, 0).is_err());
    let odd = vec![(Raster::<f64>::zeros(31, 32), Raster::<f64>::zeros(31, 32))];
    assert!(train_segmentation(&mut net, &odd, &cfg, 0).is_err());
}

// ---- classifier training ----

/// Separable toy patches following the class/channel rules: a bright
/// center blob on a dark background, per channel, mimicking a cropped
/// cell. The signal lives in the spatial contrast (blob vs background),
/// which survives the per-sample normalization the networks apply.
fn separable_patches(n_per_class: usize, size: usize, seed: u64) -> Vec<Patch<f64>> {
    let mut rng = stream(seed, "patches", 0);
    let center = (size - 1) as f64 / 2.0;
    let radius = size as f64 / 3.0;
    let mut out = Vec::new();
    for class in CellClass::ALL {
        for _ in 0..n_per_class {
            let (m, g) = match class {
                CellClass::Excitatory => (0.8, 0.8),
                CellClass::Glial => (0.8, 0.1),
                CellClass::Inhibitory => (0.0, 0.8),
            };
            let mut data = Vec::with_capacity(3 * size * size);
            for amp in [m, g, (m + g) / 2.0] {
                for r in 0..size {
                    for c in 0..size {
                        let d = ((r as f64 - center).powi(2) + (c as f64 - center).powi(2))
                            .sqrt();
                        let base = if d <= radius { amp } else { 0.05 };
                        data.push((base + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0));
                    }
                }
            }
            out.push(Patch {
                size,
                data,
                centroid: (0.0, 0.0),
                source_id: "toy".into(),
                label: Some(class),
            });
        }
    }
    out
}

#[test]
fn classifier_learns_separable_data() {
    let patches = separable_patches(12, 9, 31);
    let labels: Vec<CellClass> = patches.iter().map(|p| p.label.unwrap()).collect();
    let (tr, vl) = kfold_split(&labels, 4, 31).unwrap().swap_remove(0);
    let train: Vec<Patch<f64>> = tr.iter().map(|&i| patches[i].clone()).collect();
    let val: Vec<Patch<f64>> = vl.iter().map(|&i| patches[i].clone()).collect();
    let mut rng = stream(31, "clstest", 0);
    let mut net: NetworkSpec<f64> = build_residual_classifier(&[1], 4, 3, &mut rng).unwrap();
    let cfg = ClsTrainConfig { epochs: 20, batch: 8, lr: 0.05, ..Default::default() };
    let evals = train_classifier(&mut net, &train, &val, &cfg, 77).unwrap();
    let best = evals.iter().map(|e| e.accuracy).fold(0.0, f64::max);
    assert!(best > 90.0, "best accuracy {best}");
}

#[test]
fn frozen_prefix_is_bitwise_unchanged() {
    let patches = separable_patches(4, 9, 5);
    let mut rng = stream(5, "clstest", 1);
    let mut net: NetworkSpec<f64> = build_residual_classifier(&[1], 4, 3, &mut rng).unwrap();
    let k = net.head_index;
    net.set_freeze_point(k).unwrap();
    let frozen_before: Vec<Vec<f64>> = net
        .nodes
        .iter()
        .filter(|n| n.index < k)
        .flat_map(|n| n.params.iter().map(|p| p.data().clone()))
        .collect();
    let cfg = ClsTrainConfig { epochs: 2, batch: 4, lr: 0.05, ..Default::default() };
    train_classifier(&mut net, &patches, &patches, &cfg, 3).unwrap();
    let frozen_after: Vec<Vec<f64>> = net
        .nodes
        .iter()
        .filter(|n| n.index < k)
        .flat_map(|n| n.params.iter().map(|p| p.data().clone()))
        .collect();
    assert_eq!(frozen_before, frozen_after);
}

#[test]
fn zero_epochs_is_identity() {
    let patches = separable_patches(2, 9, 6);
    let mut rng = stream(6, "clstest", 2);
    let mut net: NetworkSpec<f64> = build_residual_classifier(&[1], 4, 3, &mut rng).unwrap();
    let before: Vec<Vec<f64>> = net.all_params().iter().map(|p| p.data().clone()).collect();
    let cfg = ClsTrainConfig { epochs: 0, ..Default::default() };
    let evals = train_classifier(&mut net, &patches, &patches, &cfg, 0).unwrap();
    assert!(evals.is_empty());
    let after: Vec<Vec<f64>> = net.all_params().iter().map(|p| p.data().clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn missing_class_in_training_split_rejected() {
    let patches: Vec<Patch<f64>> = separable_patches(2, 9, 8)
        .into_iter()
        .filter(|p| p.label != Some(CellClass::Inhibitory))
        .collect();
    let mut rng = stream(8, "clstest", 3);
    let mut net: NetworkSpec<f64> = build_residual_classifier(&[1], 4, 3, &mut rng).unwrap();
    let err =
        train_classifier(&mut net, &patches, &patches, &ClsTrainConfig::default(), 0).unwrap_err();
    assert!(err.to_string().contains("Inhibitory"));
}

// ---- cross-validation ----

#[test]
fn cross_validation_aggregates_and_is_deterministic() {
    let patches = separable_patches(10, 9, 44);
    let cfg = ClsTrainConfig { epochs: 3, batch: 8, lr: 0.05, ..Default::default() };
    let run = || {
        run_cross_validation(
            "residual (k=0)",
            |seed| {
                let mut rng = stream(seed, "model", 0);
                build_residual_classifier::<f64>(&[1], 4, 3, &mut rng)
            },
            &patches,
            5,
            &cfg,
            99,
        )
        .unwrap()
    };
    let (summary, confusion, reports) = run();
    assert_eq!(reports.len(), 5);
    assert_eq!(confusion.total(), patches.len());
    assert!(summary.mean_best_accuracy >= summary.mean_saturation_accuracy - 1e-9);
    assert!((0.0..=100.0).contains(&summary.mean_saturation_accuracy));
    assert!(summary.std_best_accuracy >= 0.0);
    for r in &reports {
        assert!(r.best_accuracy >= r.saturation_accuracy - 1e-9);
        assert_eq!(r.epochs.len(), cfg.epochs);
        assert!(r.saturation_epoch >= 1 && r.saturation_epoch <= cfg.epochs);
    }
    let (summary2, confusion2, _) = run();
    assert_eq!(summary, summary2);
    assert_eq!(confusion, confusion2);
}
