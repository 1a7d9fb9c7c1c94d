//! Deterministic synthetic two-channel scenes with exact ground truth,
//! used for end-to-end verification of the pipeline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{
    compose_rgb, connected_components, extract_patch, normalize_channel, threshold_map,
    LabelMap, MultiChannelImage, Patch, Raster, CH_GCAMP, CH_MCHERRY,
};
use crate::rng::{derive_seed, sample_normal, stream};
use crate::scalar::Scalar;
use crate::trainer::CellClass;

/// Generation parameters for one scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_cells: usize,
    /// Probability of each class, indexed by `CellClass`.
    pub class_mix: [f64; 3],
    /// Cell radius range in pixels, sampled uniformly.
    pub radius_range: (f64, f64),
    pub bright_range: (f64, f64),
    pub dim_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            n_cells: 8,
            class_mix: [0.45, 0.45, 0.10],
            radius_range: (4.0, 8.0),
            bright_range: (0.7, 0.9),
            dim_range: (0.05, 0.2),
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.class_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!(
                "class mix {:?} must be nonnegative and sum to 1",
                self.class_mix
            )));
        }
        let (r0, r1) = self.radius_range;
        if !(2.0 <= r0 && r0 <= r1) {
            return Err(Error::Config(format!(
                "radius range ({r0}, {r1}) must satisfy 2 <= min <= max"
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        let dim = self.height.min(self.width) as f64;
        if self.n_cells > 0 && 2.0 * (r1 + CELL_MARGIN) >= dim {
            return Err(Error::Config(format!(
                "max radius {r1} cannot fit a {}x{} scene",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// One placed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTruth {
    pub center: (f64, f64),
    pub radius: f64,
    pub class: CellClass,
}

/// Exact labels for a generated scene.
#[derive(Debug, Clone)]
pub struct GroundTruth<T: Scalar> {
    pub cells: Vec<CellTruth>,
    /// 1.0 inside every cell disk, 0.0 outside.
    pub prob_map: Raster<T>,
    pub label_map: LabelMap,
}

/// Border margin and inter-cell gap, in pixels.
const CELL_MARGIN: f64 = 2.0;

fn place_cells(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<CellTruth>> {
    let mut cells: Vec<CellTruth> = Vec::with_capacity(spec.n_cells);
    let mut attempts = 0;
    let cap = 10 * spec.n_cells;
    while cells.len() < spec.n_cells {
        if attempts >= cap {
            return Err(Error::Generation(format!(
                "placed only {} of {} cells after {cap} attempts; \
                 reduce n_cells or the radius range",
                cells.len(),
                spec.n_cells
            )));
        }
        attempts += 1;
        let radius = if spec.radius_range.0 == spec.radius_range.1 {
            spec.radius_range.0
        } else {
            rng.gen_range(spec.radius_range.0..spec.radius_range.1)
        };
        let pad = radius + CELL_MARGIN;
        let cy = rng.gen_range(pad..spec.height as f64 - pad);
        let cx = rng.gen_range(pad..spec.width as f64 - pad);
        let clear = cells.iter().all(|c| {
            let d = ((cy - c.center.0).powi(2) + (cx - c.center.1).powi(2)).sqrt();
            d >= radius + c.radius + CELL_MARGIN
        });
        if !clear {
            continue;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class = CellClass::Inhibitory;
        for c in CellClass::ALL {
            acc += spec.class_mix[c.index()];
            if u < acc {
                class = c;
                break;
            }
        }
        cells.push(CellTruth { center: (cy, cx), radius, class });
    }
    Ok(cells)
}

/// Radial profile: flat core, cosine taper over the outer 30% of the
/// radius, zero outside.
fn taper(d: f64, radius: f64) -> f64 {
    let core = 0.7 * radius;
    if d <= core {
        1.0
    } else if d < radius {
        0.5 * (1.0 + (std::f64::consts::PI * (d - core) / (radius - core)).cos())
    } else {
        0.0
    }
}

/// Per-class channel amplitudes: excitatory cells are bright in both
/// channels, glial cells bright in mCherry and dim in GCaMP, inhibitory
/// cells absent in mCherry and bright in GCaMP.
fn amplitudes(spec: &SceneSpec, class: CellClass, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut draw = |range: (f64, f64)| -> f64 {
        if range.0 == range.1 { range.0 } else { rng.gen_range(range.0..range.1) }
    };
    match class {
        CellClass::Excitatory => {
            let m = draw(spec.bright_range);
            let g = draw(spec.bright_range);
            (m, g)
        }
        CellClass::Glial => {
            let m = draw(spec.bright_range);
            let g = draw(spec.dim_range);
            (m, g)
        }
        CellClass::Inhibitory => (0.0, draw(spec.bright_range)),
    }
}

/// Renders one scene and its exact ground truth. Bitwise deterministic
/// given the spec (including its seed).
pub fn generate_scene<T: Scalar>(
    spec: &SceneSpec,
) -> Result<(MultiChannelImage<T>, GroundTruth<T>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut place_rng = stream(spec.seed, "place", 0);
    let mut level_rng = stream(spec.seed, "levels", 0);
    let mut noise_rng = stream(spec.seed, "noise", 0);

    let cells = place_cells(spec, &mut place_rng)?;

    let mut mcherry = vec![0.0f64; h * w];
    let mut gcamp = vec![0.0f64; h * w];
    let mut prob = Raster::<T>::zeros(h, w);
    for cell in &cells {
        let (amp_m, amp_g) = amplitudes(spec, cell.class, &mut level_rng);
        let (cy, cx) = cell.center;
        let r0 = (cy - cell.radius).floor().max(0.0) as usize;
        let r1 = ((cy + cell.radius).ceil() as usize).min(h - 1);
        let c0 = (cx - cell.radius).floor().max(0.0) as usize;
        let c1 = ((cx + cell.radius).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                if d > cell.radius {
                    continue;
                }
                let t = taper(d, cell.radius);
                mcherry[r * w + c] += amp_m * t;
                gcamp[r * w + c] += amp_g * t;
                prob.set(r, c, T::one());
            }
        }
    }

    for v in mcherry.iter_mut().chain(gcamp.iter_mut()) {
        *v = (*v + spec.noise_std * sample_normal(&mut noise_rng)).clamp(0.0, 1.0);
    }

    let mut img = MultiChannelImage::new(h, w);
    img.insert(CH_MCHERRY, Raster::new(h, w, mcherry.iter().map(|v| T::cast_f64(*v)).collect())?)?;
    img.insert(CH_GCAMP, Raster::new(h, w, gcamp.iter().map(|v| T::cast_f64(*v)).collect())?)?;

    let (label_map, comps) = connected_components(&threshold_map(&prob, 0.5)?);
    debug_assert_eq!(comps.len(), cells.len());
    Ok((img, GroundTruth { cells, prob_map: prob, label_map }))
}

/// Generates `n_scenes` scenes (seeds derived per scene) and extracts one
/// labeled RGB patch per cell at the true centroid, bypassing the
/// segmenter. Patch `source_id`s name the originating scene.
pub fn generate_patch_dataset<T: Scalar>(
    spec: &SceneSpec,
    n_scenes: usize,
    patch_size: usize,
) -> Result<Vec<Patch<T>>> {
    spec.validate()?;
    let mut patches = Vec::new();
    for i in 0..n_scenes {
        let scene_spec =
            SceneSpec { seed: derive_seed(spec.seed, "scene", i as u64), ..spec.clone() };
        let (img, truth) = generate_scene::<T>(&scene_spec)?;
        let mut norm = MultiChannelImage::new(img.height, img.width);
        norm.insert(CH_MCHERRY, normalize_channel(img.channel(CH_MCHERRY)?)?)?;
        norm.insert(CH_GCAMP, normalize_channel(img.channel(CH_GCAMP)?)?)?;
        let rgb = compose_rgb(&norm)?;
        for cell in &truth.cells {
            let mut p = extract_patch(&rgb, cell.center, patch_size)?;
            p.source_id = format!("scene_{i:04}");
            p.label = Some(cell.class);
            patches.push(p);
        }
    }
    Ok(patches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let spec = SceneSpec { seed: 42, ..Default::default() };
        let (a, ta) = generate_scene::<f64>(&spec).unwrap();
        let (b, tb) = generate_scene::<f64>(&spec).unwrap();
        assert_eq!(a.channel(CH_MCHERRY).unwrap().data, b.channel(CH_MCHERRY).unwrap().data);
        assert_eq!(a.channel(CH_GCAMP).unwrap().data, b.channel(CH_GCAMP).unwrap().data);
        assert_eq!(ta.cells, tb.cells);
        assert_eq!(ta.prob_map.data, tb.prob_map.data);
    }

    #[test]
    fn distinct_seeds_differ() {
        let (a, _) = generate_scene::<f64>(&SceneSpec { seed: 1, ..Default::default() }).unwrap();
        let (b, _) = generate_scene::<f64>(&SceneSpec { seed: 2, ..Default::default() }).unwrap();
        assert_ne!(a.channel(CH_MCHERRY).unwrap().data, b.channel(CH_MCHERRY).unwrap().data);
    }

    #[test]
    fn zero_cells_is_pure_noise() {
        let spec = SceneSpec { n_cells: 0, seed: 3, ..Default::default() };
        let (img, truth) = generate_scene::<f64>(&spec).unwrap();
        assert!(truth.cells.is_empty());
        assert!(truth.prob_map.data.iter().all(|v| *v == 0.0));
        assert_eq!(truth.label_map.count, 0);
        let m = img.channel(CH_MCHERRY).unwrap();
        assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.data.iter().any(|v| *v > 0.0)); // noise present
    }

    #[test]
    fn ground_truth_components_match_cell_count() {
        for seed in 0..20 {
            let spec = SceneSpec { seed, ..Default::default() };
            let (_, truth) = generate_scene::<f64>(&spec).unwrap();
            for tau in [0.1, 0.5, 0.9] {
                let (map, _) = connected_components(&threshold_map(&truth.prob_map, tau).unwrap());
                assert_eq!(map.count, spec.n_cells, "seed {seed} tau {tau}");
            }
            assert_eq!(truth.label_map.count, spec.n_cells);
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let (img, _) = generate_scene::<f64>(&SceneSpec { seed: 9, ..Default::default() }).unwrap();
        for name in [CH_MCHERRY, CH_GCAMP] {
            assert!(img.channel(name).unwrap().data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn disk_means(img: &MultiChannelImage<f64>, cell: &CellTruth) -> (f64, f64) {
        let m = img.channel(CH_MCHERRY).unwrap();
        let g = img.channel(CH_GCAMP).unwrap();
        let (mut sm, mut sg, mut n) = (0.0, 0.0, 0.0);
        for r in 0..img.height {
            for c in 0..img.width {
                let d = ((r as f64 - cell.center.0).powi(2) + (c as f64 - cell.center.1).powi(2))
                    .sqrt();
                if d <= cell.radius {
                    sm += m.get(r, c);
                    sg += g.get(r, c);
                    n += 1.0;
                }
            }
        }
        (sm / n, sg / n)
    }

    #[test]
    fn channel_statistics_separate_the_classes() {
        // threshold classifier on (mean mCherry, mean GCaMP) inside the
        // true disks must get >= 99% of cells right at noise std 0.03
        let mut total = 0;
        let mut correct = 0;
        let mut inh_mcherry: Vec<f64> = Vec::new();
        let mut exc_mcherry: Vec<f64> = Vec::new();
        for seed in 0..50 {
            let spec = SceneSpec { seed: 1000 + seed, ..Default::default() };
            let (img, truth) = generate_scene::<f64>(&spec).unwrap();
            for cell in &truth.cells {
                let (m, g) = disk_means(&img, cell);
                let pred = if m < 0.25 {
                    CellClass::Inhibitory
                } else if g < 0.25 {
                    CellClass::Glial
                } else {
                    CellClass::Excitatory
                };
                total += 1;
                if pred == cell.class {
                    correct += 1;
                }
                match cell.class {
                    CellClass::Inhibitory => inh_mcherry.push(m),
                    CellClass::Excitatory => exc_mcherry.push(m),
                    CellClass::Glial => {}
                }
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99, "{correct}/{total}");
        // every inhibitory disk is dimmer in mCherry than every excitatory one
        let inh_max = inh_mcherry.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exc_min = exc_mcherry.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(inh_max < exc_min, "inh max {inh_max} vs exc min {exc_min}");
    }

    #[test]
    fn infeasible_placement_reports_generation_error() {
        let spec = SceneSpec {
            height: 40,
            width: 40,
            n_cells: 50,
            radius_range: (8.0, 8.0),
            seed: 4,
            ..Default::default()
        };
        match generate_scene::<f64>(&spec) {
            Err(Error::Generation(msg)) => assert!(msg.contains("reduce")),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn patch_dataset_counts_and_labels() {
        let spec = SceneSpec { n_cells: 5, seed: 6, ..Default::default() };
        let patches = generate_patch_dataset::<f64>(&spec, 10, 33).unwrap();
        assert_eq!(patches.len(), 50);
        assert!(patches.iter().all(|p| p.label.is_some()));
        assert!(patches.iter().all(|p| p.data.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(patches[0].source_id, "scene_0000");
        assert_eq!(patches[49].source_id, "scene_0009");
    }

    #[test]
    fn label_distribution_follows_class_mix() {
        let spec = SceneSpec { n_cells: 10, seed: 8, ..Default::default() };
        let patches = generate_patch_dataset::<f64>(&spec, 100, 17).unwrap();
        assert_eq!(patches.len(), 1000);
        let mut counts = [0usize; 3];
        for p in &patches {
            counts[p.label.unwrap().index()] += 1;
        }
        for (c, mix) in counts.iter().zip(spec.class_mix.iter()) {
            let frac = *c as f64 / 1000.0;
            assert!((frac - mix).abs() <= 0.05, "class fraction {frac} vs mix {mix}");
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = SceneSpec::default();
        s.class_mix = [0.5, 0.5, 0.5];
        assert!(s.validate().is_err());
        s = SceneSpec::default();
        s.radius_range = (1.0, 5.0);
        assert!(s.validate().is_err());
        s = SceneSpec::default();
        s.noise_std = -0.1;
        assert!(s.validate().is_err());
    }
}
