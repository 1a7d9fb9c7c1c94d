//! Disk formats: 16-bit grayscale PNG rasters, 8-bit RGB patch PNGs,
//! scene-pair discovery, and the tab-separated patch manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trainer::CellClass;

use super::patch::Patch;
use super::Raster;

const PNG16_MAX: f64 = 65535.0;

/// Writes a raster as 16-bit grayscale PNG; values are clamped to [0, 1]
/// and scaled to the full u16 range.
pub fn save_raster_png16<T: Scalar>(raster: &Raster<T>, path: &Path) -> Result<()> {
    let pixels: Vec<u16> = raster
        .data
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * PNG16_MAX).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(raster.width as u32, raster.height as u32, pixels)
            .ok_or_else(|| Error::Contract("raster buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Loads a grayscale PNG into [0, 1]; both 8- and 16-bit depths are
/// accepted (8-bit is scaled by 1/255).
pub fn load_raster_png<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| T::cast_f64(v as f64 / PNG16_MAX))
        .collect();
    Raster::new(h, w, data)
}

/// Writes a 3-channel patch as 8-bit RGB PNG, clamped to [0, 1].
pub fn save_patch_png<T: Scalar>(patch: &Patch<T>, path: &Path) -> Result<()> {
    let n = patch.size;
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(n as u32, n as u32);
    for r in 0..n {
        for c in 0..n {
            let px = |ch: usize| (patch.get(ch, r, c).to_f64_lossy().clamp(0.0, 1.0) * 255.0)
                .round() as u8;
            buf.put_pixel(c as u32, r as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Loads an 8-bit RGB PNG back into a patch (values scaled by 1/255).
pub fn load_patch_png<T: Scalar>(path: &Path) -> Result<Patch<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::Format(format!("patch {} is {w}x{h}, not square", path.display())));
    }
    let raw = img.into_raw();
    let mut data = vec![T::zero(); 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                data[(ch * h + r) * w + c] =
                    T::cast_f64(raw[(r * w + c) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    Ok(Patch { size: h, data, centroid: (0.0, 0.0), source_id: String::new(), label: None })
}

/// Writes a binary mask as 8-bit grayscale PNG (0 or 255).
pub fn save_mask_png(mask: &super::BinaryRaster, path: &Path) -> Result<()> {
    let pixels: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: GrayImage = ImageBuffer::from_raw(mask.width as u32, mask.height as u32, pixels)
        .ok_or_else(|| Error::Contract("mask buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// A two-channel acquisition found on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenePair {
    pub scene_id: String,
    pub mcherry: PathBuf,
    pub gcamp: PathBuf,
}

/// Scans `dir` for `<scene>_mCherry.png` / `<scene>_GCaMP.png` pairs,
/// sorted by scene id. Unpaired halves are an error.
pub fn discover_scene_pairs(dir: &Path) -> Result<Vec<ScenePair>> {
    let mut mcherry: Vec<(String, PathBuf)> = Vec::new();
    let mut gcamp: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(id) = name.strip_suffix("_mCherry.png") {
            mcherry.push((id.to_string(), path.clone()));
        } else if let Some(id) = name.strip_suffix("_GCaMP.png") {
            gcamp.push((id.to_string(), path.clone()));
        }
    }
    mcherry.sort();
    gcamp.sort();
    let mut pairs = Vec::new();
    let mut gi = gcamp.into_iter().peekable();
    for (id, mc) in mcherry {
        match gi.peek() {
            Some((gid, _)) if *gid == id => {
                let (_, gc) = gi.next().unwrap();
                pairs.push(ScenePair { scene_id: id, mcherry: mc, gcamp: gc });
            }
            _ => {
                return Err(Error::Format(format!(
                    "scene {id:?} has an mCherry channel but no GCaMP channel in {}",
                    dir.display()
                )))
            }
        }
    }
    if let Some((id, _)) = gi.next() {
        return Err(Error::Format(format!(
            "scene {id:?} has a GCaMP channel but no mCherry channel in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// One line of the patch manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub scene_id: String,
    pub centroid: (f64, f64),
    pub label: Option<CellClass>,
}

const MANIFEST_HEADER: &str = "path\tscene\tcentroid_row\tcentroid_col\tlabel";

/// Writes the tab-separated patch manifest; unlabeled patches get an
/// empty label field.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{MANIFEST_HEADER}")?;
    for e in entries {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            e.path.display(),
            e.scene_id,
            e.centroid.0,
            e.centroid.1,
            e.label.map(|l| l.name()).unwrap_or("")
        )?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::Format(format!(
                "{} is not a patch manifest (bad header)",
                path.display()
            )))
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!(
                "{} line {}: expected 5 tab-separated fields, got {}",
                path.display(),
                i + 2,
                cols.len()
            )));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Format(format!("{} line {}: bad {what} {s:?}", path.display(), i + 2))
            })
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(cols[0]),
            scene_id: cols[1].to_string(),
            centroid: (parse_f64(cols[2], "centroid row")?, parse_f64(cols[3], "centroid col")?),
            label: if cols[4].is_empty() { None } else { Some(CellClass::parse(cols[4])?) },
        });
    }
    Ok(entries)
}
