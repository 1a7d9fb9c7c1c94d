//! Implementations of the pipeline subcommands. Everything runs in f32;
//! all randomness derives from the configured seed, namespaced by stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{
    amplify_patches, compose_rgb, connected_components, discover_scene_pairs, extract_patch,
    filter_components_by_size, fuse_grayscale, load_patch_png, load_raster_png, normalize_channel,
    read_manifest, resample_bilinear, save_patch_png, save_raster_png16, threshold_map,
    tiled_inference, write_manifest, ManifestEntry, MultiChannelImage, Patch, Raster, ScenePair,
    CH_GCAMP, CH_MCHERRY,
};
use crate::netgraph::{
    build_inception_classifier, build_residual_classifier, build_unet, load_weights, save_weights,
    NetworkSpec,
};
use crate::rng::{derive_seed, stream};
use crate::synthdata::{generate_scene, SceneSpec};
use crate::tensor::Tensor;
use crate::trainer::{
    report_tables, run_cross_validation, train_classifier, train_segmentation, CellClass,
    ClsTrainConfig, SegTrainConfig,
};

use super::config::PipelineConfig;

type S = f32;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("missing input: {}", path.display())));
    }
    Ok(())
}

fn scenes_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.data_dir.join("scenes")
}

fn truth_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.data_dir.join("truth")
}

fn prob_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.data_dir.join("prob")
}

fn truth_path(cfg: &PipelineConfig, scene_id: &str) -> PathBuf {
    truth_dir(cfg).join(format!("{scene_id}_truth.png"))
}

fn prob_path(cfg: &PipelineConfig, scene_id: &str) -> PathBuf {
    prob_dir(cfg).join(format!("{scene_id}_prob.png"))
}

fn segmenter_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.model_dir.join("segmenter.ncw")
}

fn classifier_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.model_dir.join("classifier.ncw")
}

/// Loads one scene pair and normalizes both channels.
fn load_normalized(pair: &ScenePair) -> Result<MultiChannelImage<S>> {
    let m: Raster<S> = load_raster_png(&pair.mcherry)?;
    let g: Raster<S> = load_raster_png(&pair.gcamp)?;
    let mut img = MultiChannelImage::new(m.height, m.width);
    img.insert(CH_MCHERRY, normalize_channel(&m)?)?;
    img.insert(CH_GCAMP, normalize_channel(&g)?)?;
    Ok(img)
}

fn pairs_or_fail(cfg: &PipelineConfig) -> Result<Vec<ScenePair>> {
    let dir = scenes_dir(cfg);
    require_file(&dir)?;
    let pairs = discover_scene_pairs(&dir)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("no scene pairs found in {}", dir.display())));
    }
    Ok(pairs)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `synth`: writes scene channel PNGs, ground-truth maps, a cell table,
/// and a labeled patch set extracted at the true centroids.
pub fn synth(cfg: &PipelineConfig) -> Result<()> {
    ensure_dir(&scenes_dir(cfg))?;
    ensure_dir(&truth_dir(cfg))?;
    let patches_dir = cfg.data_dir.join("patches");
    ensure_dir(&patches_dir)?;

    let mut cells_tsv = String::from("scene\trow\tcol\tradius\tclass\n");
    let mut entries = Vec::new();
    let mut patch_idx = 0usize;
    for i in 0..cfg.n_scenes {
        let scene_id = format!("scene_{i:04}");
        let spec = SceneSpec {
            seed: derive_seed(cfg.seed, "scene", i as u64),
            ..cfg.scene_spec()
        };
        let (img, truth) = generate_scene::<S>(&spec)?;
        save_raster_png16(img.channel(CH_MCHERRY)?, &scenes_dir(cfg).join(format!("{scene_id}_mCherry.png")))?;
        save_raster_png16(img.channel(CH_GCAMP)?, &scenes_dir(cfg).join(format!("{scene_id}_GCaMP.png")))?;
        save_raster_png16(&truth.prob_map, &truth_path(cfg, &scene_id))?;
        for cell in &truth.cells {
            cells_tsv.push_str(&format!(
                "{scene_id}\t{}\t{}\t{}\t{}\n",
                cell.center.0, cell.center.1, cell.radius, cell.class
            ));
        }

        let mut norm = MultiChannelImage::new(img.height, img.width);
        norm.insert(CH_MCHERRY, normalize_channel(img.channel(CH_MCHERRY)?)?)?;
        norm.insert(CH_GCAMP, normalize_channel(img.channel(CH_GCAMP)?)?)?;
        let rgb = compose_rgb(&norm)?;
        for cell in &truth.cells {
            let mut patch = extract_patch(&rgb, cell.center, cfg.patch_size)?;
            patch = resample_bilinear(&patch, cfg.target_size)?;
            patch.source_id = scene_id.clone();
            patch.label = Some(cell.class);
            let path = patches_dir.join(format!("patch_{patch_idx:05}.png"));
            save_patch_png(&patch, &path)?;
            entries.push(ManifestEntry {
                path,
                scene_id: scene_id.clone(),
                centroid: cell.center,
                label: Some(cell.class),
            });
            patch_idx += 1;
        }
    }
    fs::write(truth_dir(cfg).join("cells.tsv"), cells_tsv)?;
    write_manifest(&entries, &patches_dir.join("manifest.tsv"))?;
    println!(
        "synth: wrote {} scenes and {} labeled patches under {}",
        cfg.n_scenes,
        entries.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn load_training_scenes(cfg: &PipelineConfig) -> Result<Vec<(Raster<S>, Raster<S>)>> {
    let pairs = pairs_or_fail(cfg)?;
    let mut scenes = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let tpath = truth_path(cfg, &pair.scene_id);
        require_file(&tpath)?;
        let img = load_normalized(pair)?;
        scenes.push((fuse_grayscale(&img)?, load_raster_png(&tpath)?));
    }
    Ok(scenes)
}

#[derive(Serialize)]
struct SegReport<'a> {
    seed: u64,
    config_hash: &'a str,
    epoch_mean_loss: &'a [f64],
}

/// `train-seg`: fits the U-Net on all (scene, truth) pairs on disk.
pub fn train_seg(cfg: &PipelineConfig) -> Result<()> {
    let scenes = load_training_scenes(cfg)?;
    let mut rng = stream(cfg.seed, "unet-init", 0);
    let mut net: NetworkSpec<S> = build_unet(cfg.unet_depth, cfg.unet_base, 1, 1, &mut rng)?;
    let train_cfg = SegTrainConfig {
        epochs: cfg.epochs,
        iters_per_epoch: cfg.iters_per_epoch,
        batch: 1,
        lr: cfg.lr,
        momentum: cfg.momentum,
        elastic: cfg.elastic_spec(),
    };
    let curve = train_segmentation(&mut net, &scenes, &train_cfg, derive_seed(cfg.seed, "train-seg", 0))?;
    ensure_dir(&cfg.model_dir)?;
    save_weights(&net, &segmenter_path(cfg))?;
    ensure_dir(&cfg.report_dir)?;
    let hash = cfg.hash();
    write_json(
        &cfg.report_dir.join("train_seg.json"),
        &SegReport { seed: cfg.seed, config_hash: &hash, epoch_mean_loss: &curve },
    )?;
    println!(
        "train-seg: {} scenes, final mean loss {:.6}, weights at {}",
        scenes.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        segmenter_path(cfg).display()
    );
    Ok(())
}

fn load_segmenter(cfg: &PipelineConfig) -> Result<NetworkSpec<S>> {
    let path = segmenter_path(cfg);
    require_file(&path)?;
    load_weights(&path)
}

/// `segment`: writes a probability-map PNG per scene pair.
pub fn segment(cfg: &PipelineConfig) -> Result<()> {
    let net = load_segmenter(cfg)?;
    let pairs = pairs_or_fail(cfg)?;
    ensure_dir(&prob_dir(cfg))?;
    let overlap = net.receptive_radius();
    for pair in &pairs {
        let fused = fuse_grayscale(&load_normalized(pair)?)?;
        let prob = tiled_inference(&net, &fused, cfg.tile, overlap)?;
        save_raster_png16(&prob, &prob_path(cfg, &pair.scene_id))?;
    }
    println!("segment: wrote {} probability maps to {}", pairs.len(), prob_dir(cfg).display());
    Ok(())
}

/// `extract`: thresholds probability maps, finds components, and crops
/// one patch per surviving component.
pub fn extract(cfg: &PipelineConfig) -> Result<()> {
    let pairs = pairs_or_fail(cfg)?;
    let out_dir = cfg.data_dir.join("patches_pred");
    ensure_dir(&out_dir)?;
    let mut entries = Vec::new();
    let mut patch_idx = 0usize;
    for pair in &pairs {
        let ppath = prob_path(cfg, &pair.scene_id);
        require_file(&ppath)?;
        let prob: Raster<S> = load_raster_png(&ppath)?;
        let (map, comps) = connected_components(&threshold_map(&prob, cfg.tau)?);
        let (_, comps) = filter_components_by_size(&map, &comps, cfg.min_component_size);
        let rgb = compose_rgb(&load_normalized(pair)?)?;
        for comp in &comps {
            let mut patch = extract_patch(&rgb, comp.centroid, cfg.patch_size)?;
            patch = resample_bilinear(&patch, cfg.target_size)?;
            patch.source_id = pair.scene_id.clone();
            let path = out_dir.join(format!("patch_{patch_idx:05}.png"));
            save_patch_png(&patch, &path)?;
            entries.push(ManifestEntry {
                path,
                scene_id: pair.scene_id.clone(),
                centroid: comp.centroid,
                label: None,
            });
            patch_idx += 1;
        }
    }
    write_manifest(&entries, &out_dir.join("manifest.tsv"))?;
    println!("extract: wrote {} patches to {}", entries.len(), out_dir.display());
    Ok(())
}

fn build_classifier(cfg: &PipelineConfig, seed: u64) -> Result<NetworkSpec<S>> {
    let mut rng = stream(seed, "cls-init", 0);
    let mut net = match cfg.family.as_str() {
        "residual" => build_residual_classifier(&cfg.blocks_per_stage, cfg.cls_base, 3, &mut rng)?,
        "inception" => build_inception_classifier(cfg.inception_blocks, cfg.cls_base, 3, &mut rng)?,
        other => return Err(Error::Config(format!("unknown classifier family {other:?}"))),
    };
    let legal = net.legal_freeze_points();
    let k = *legal.get(cfg.freeze_ordinal).ok_or_else(|| {
        Error::Config(format!(
            "freeze_ordinal {} out of range; the network has {} legal freeze points",
            cfg.freeze_ordinal,
            legal.len()
        ))
    })?;
    net.set_freeze_point(k)?;
    Ok(net)
}

fn load_labeled_patches(cfg: &PipelineConfig) -> Result<Vec<Patch<S>>> {
    let manifest = cfg.data_dir.join("patches").join("manifest.tsv");
    require_file(&manifest)?;
    let mut patches = Vec::new();
    for entry in read_manifest(&manifest)? {
        require_file(&entry.path)?;
        let mut p: Patch<S> = load_patch_png(&entry.path)?;
        p.centroid = entry.centroid;
        p.source_id = entry.scene_id;
        p.label = entry.label;
        patches.push(p);
    }
    Ok(patches)
}

fn cls_train_config(cfg: &PipelineConfig) -> ClsTrainConfig {
    ClsTrainConfig {
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        momentum: cfg.momentum,
        epsilon: cfg.epsilon,
    }
}

#[derive(Serialize)]
struct ClsReport<'a> {
    seed: u64,
    config_hash: &'a str,
    val_accuracy: Vec<f64>,
}

/// `train-cls`: trains one classifier on the labeled patch set (10% as a
/// fixed validation split) and saves its weights.
pub fn train_cls(cfg: &PipelineConfig) -> Result<()> {
    let mut patches = load_labeled_patches(cfg)?;
    if cfg.amplify > 1 {
        patches = amplify_patches(&patches, &cfg.augment_spec(), derive_seed(cfg.seed, "amplify", 0))?;
    }
    let labels: Vec<CellClass> = patches.iter().map(|p| p.label.expect("labeled")).collect();
    let splits = crate::trainer::kfold_split(&labels, cfg.k_folds.max(2), derive_seed(cfg.seed, "val-split", 0))?;
    let (tr_idx, val_idx) = &splits[0];
    let train_set: Vec<Patch<S>> = tr_idx.iter().map(|&i| patches[i].clone()).collect();
    let val_set: Vec<Patch<S>> = val_idx.iter().map(|&i| patches[i].clone()).collect();

    let mut net = build_classifier(cfg, derive_seed(cfg.seed, "cls-model", 0))?;
    let evals = train_classifier(
        &mut net,
        &train_set,
        &val_set,
        &cls_train_config(cfg),
        derive_seed(cfg.seed, "train-cls", 0),
    )?;
    ensure_dir(&cfg.model_dir)?;
    save_weights(&net, &classifier_path(cfg))?;
    ensure_dir(&cfg.report_dir)?;
    let hash = cfg.hash();
    write_json(
        &cfg.report_dir.join("train_cls.json"),
        &ClsReport {
            seed: cfg.seed,
            config_hash: &hash,
            val_accuracy: evals.iter().map(|e| e.accuracy).collect(),
        },
    )?;
    println!(
        "train-cls: {} training patches, final val accuracy {:.2}%, weights at {}",
        train_set.len(),
        evals.last().map(|e| e.accuracy).unwrap_or(f64::NAN),
        classifier_path(cfg).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    seed: u64,
    config_hash: &'a str,
    summary: &'a crate::trainer::CvSummary,
    confusion: &'a crate::trainer::ConfusionMatrix,
    sensitivities: [f64; 3],
    specificities: [f64; 3],
    folds: &'a [crate::trainer::FoldReport],
}

/// `evaluate`: k-fold cross-validation over the labeled patch set, with
/// table-style CSV/text reports and per-fold JSON.
pub fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let patches = load_labeled_patches(cfg)?;
    let method = format!("{} (freeze {})", cfg.family, cfg.freeze_ordinal);
    let (summary, confusion, folds) = run_cross_validation(
        &method,
        |seed| build_classifier(cfg, seed),
        &patches,
        cfg.k_folds,
        &cls_train_config(cfg),
        derive_seed(cfg.seed, "evaluate", 0),
    )?;
    ensure_dir(&cfg.report_dir)?;
    let (csv, mut text) = report_tables(std::slice::from_ref(&summary));
    let hash = cfg.hash();
    text.push_str(&format!("\nseed: {}\nconfig: {hash}\n", cfg.seed));
    text.push_str("\nConfusion matrix (rows = truth, columns = predicted):\n");
    text.push_str("                Excitatory     Glial  Inhibitory  Sens.(%)\n");
    let sens = [
        confusion.sensitivity(CellClass::Excitatory),
        confusion.sensitivity(CellClass::Glial),
        confusion.sensitivity(CellClass::Inhibitory),
    ];
    let spec = [
        confusion.specificity(CellClass::Excitatory),
        confusion.specificity(CellClass::Glial),
        confusion.specificity(CellClass::Inhibitory),
    ];
    for class in CellClass::ALL {
        let row = confusion.counts[class.index()];
        text.push_str(&format!(
            "{:<12} {:>13} {:>9} {:>11} {:>9.2}\n",
            class.name(),
            row[0],
            row[1],
            row[2],
            sens[class.index()]
        ));
    }
    text.push_str(&format!("Overall accuracy: {:.2}%\n", confusion.accuracy()));
    fs::write(cfg.report_dir.join("evaluate.csv"), &csv)?;
    fs::write(cfg.report_dir.join("evaluate.txt"), &text)?;
    write_json(
        &cfg.report_dir.join("evaluate.json"),
        &EvalReport {
            seed: cfg.seed,
            config_hash: &hash,
            summary: &summary,
            confusion: &confusion,
            sensitivities: sens,
            specificities: spec,
            folds: &folds,
        },
    )?;
    println!("{text}");
    Ok(())
}

/// `classify`: full pipeline on every scene pair; one record per
/// detected cell.
pub fn classify(cfg: &PipelineConfig) -> Result<()> {
    let seg = load_segmenter(cfg)?;
    let cls_path = classifier_path(cfg);
    require_file(&cls_path)?;
    let cls: NetworkSpec<S> = load_weights(&cls_path)?;
    let pairs = pairs_or_fail(cfg)?;
    ensure_dir(&cfg.report_dir)?;
    let overlap = seg.receptive_radius();
    let hash = cfg.hash();
    for pair in &pairs {
        let img = load_normalized(pair)?;
        let fused = fuse_grayscale(&img)?;
        let prob = tiled_inference(&seg, &fused, cfg.tile, overlap)?;
        let (map, comps) = connected_components(&threshold_map(&prob, cfg.tau)?);
        let (_, comps) = filter_components_by_size(&map, &comps, cfg.min_component_size);
        let rgb = compose_rgb(&img)?;
        let mut tsv = format!("# seed {} config {hash}\n", cfg.seed);
        tsv.push_str("row\tcol\tpixels\tp_excitatory\tp_glial\tp_inhibitory\tclass\n");
        for comp in &comps {
            let patch = resample_bilinear(
                &extract_patch(&rgb, comp.centroid, cfg.patch_size)?,
                cfg.target_size,
            )?;
            let probs = cls.infer(&Tensor::from_vec(&[3, patch.size, patch.size], patch.data.clone())?)?;
            let p = probs.data().clone();
            let mut best = 0;
            for i in 1..p.len() {
                if p[i] > p[best] {
                    best = i;
                }
            }
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                comp.centroid.0,
                comp.centroid.1,
                comp.pixel_count,
                p[0],
                p[1],
                p[2],
                CellClass::from_index(best)?
            ));
        }
        fs::write(cfg.report_dir.join(format!("classify_{}.tsv", pair.scene_id)), &tsv)?;
        println!("classify: {} -> {} cells", pair.scene_id, comps.len());
    }
    Ok(())
}

/// `gradcheck`: finite-difference verification of every op; nonzero exit
/// if any op exceeds its tolerance.
pub fn gradcheck(cfg: &PipelineConfig) -> Result<()> {
    let checks = super::gradcheck::run_suite(cfg.seed)?;
    let mut ok = true;
    for c in &checks {
        let verdict = if c.max_rel_error <= c.tolerance { "ok" } else { "FAIL" };
        if c.max_rel_error > c.tolerance {
            ok = false;
        }
        println!("{:<26} max rel err {:>12.3e}  (tol {:.0e})  {}", c.name, c.max_rel_error, c.tolerance, verdict);
    }
    if !ok {
        return Err(Error::Contract("gradient check failed for at least one op".into()));
    }
    Ok(())
}
