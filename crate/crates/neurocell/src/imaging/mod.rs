//! Classical raster processing: channel normalization and fusion, RGB
//! composition, thresholding, 8-connected components, patch extraction,
//! resampling, affine and elastic augmentation, overlap-tile inference.

mod components;
mod io;
mod patch;
mod tile;

pub use components::{connected_components, filter_components_by_size, Component, LabelMap};
pub use io::{
    discover_scene_pairs, load_patch_png, load_raster_png, read_manifest, save_mask_png,
    save_patch_png, save_raster_png16, write_manifest, ManifestEntry, ScenePair,
};
pub use patch::{
    amplify_patches, augment_affine, elastic_deform, elastic_deform_pair, extract_patch,
    resample_bilinear, rotate_scale, AugmentSpec, ElasticSpec, Patch,
};
pub use tile::tiled_inference;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major 2-D raster of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T: Scalar> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Raster { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Raster { height, width, data: vec![T::zero(); height * width] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }
}

/// Per-pixel cell-presence probabilities; values lie in [0,1].
pub type ProbabilityMap<T> = Raster<T>;

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

/// Named channel planes sharing one geometry. The pipeline requires at
/// least "mCherry" and "GCaMP".
#[derive(Debug, Clone)]
pub struct MultiChannelImage<T: Scalar> {
    pub height: usize,
    pub width: usize,
    channels: Vec<(String, Raster<T>)>,
}

pub const CH_MCHERRY: &str = "mCherry";
pub const CH_GCAMP: &str = "GCaMP";

impl<T: Scalar> MultiChannelImage<T> {
    pub fn new(height: usize, width: usize) -> Self {
        MultiChannelImage { height, width, channels: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, plane: Raster<T>) -> Result<()> {
        if plane.height != self.height || plane.width != self.width {
            return Err(Error::Dimension(format!(
                "channel {name} is {}x{}, image is {}x{}",
                plane.height, plane.width, self.height, self.width
            )));
        }
        match self.channels.iter_mut().find(|(n, _)| n == name) {
            Some((_, p)) => *p = plane,
            None => self.channels.push((name.to_string(), plane)),
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Result<&Raster<T>> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Contract(format!("missing channel {name}")))
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|(n, _)| n.as_str())
    }
}

/// Planar 3-channel image, channel-major (R, G, B), each plane h×w.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T: Scalar> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        RgbImage { height, width, data: vec![T::zero(); 3 * height * width] }
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> T {
        self.data[(ch * self.height + r) * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: T) {
        self.data[(ch * self.height + r) * self.width + c] = v;
    }
}

/// Clips to the [p1, p99] percentiles then rescales to [0,1]. A plane
/// that is constant after clipping comes back all zeros.
pub fn normalize_channel<T: Scalar>(plane: &Raster<T>) -> Result<Raster<T>> {
    if plane.data.is_empty() {
        return Err(Error::Dimension("normalize_channel on empty plane".into()));
    }
    let mut sorted: Vec<f64> = plane.data.iter().map(|v| v.to_f64_lossy()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let pct = |p: f64| -> f64 {
        let rank = p / 100.0 * (sorted.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let t = rank - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    };
    let lo = pct(1.0);
    let hi = pct(99.0);
    if hi <= lo {
        return Ok(Raster::zeros(plane.height, plane.width));
    }
    let scale = 1.0 / (hi - lo);
    let data = plane
        .data
        .iter()
        .map(|v| {
            let x = v.to_f64_lossy().clamp(lo, hi);
            T::cast_f64((x - lo) * scale)
        })
        .collect();
    Raster::new(plane.height, plane.width, data)
}

/// Pixel-wise mean of the normalized mCherry and GCaMP planes.
pub fn fuse_grayscale<T: Scalar>(img: &MultiChannelImage<T>) -> Result<Raster<T>> {
    let r = img.channel(CH_MCHERRY)?;
    let g = img.channel(CH_GCAMP)?;
    let half = T::cast_f64(0.5);
    let data = r
        .data
        .iter()
        .zip(g.data.iter())
        .map(|(a, b)| (*a + *b) * half)
        .collect();
    Raster::new(img.height, img.width, data)
}

/// R = mCherry, G = GCaMP, B = (R+G)/2.
pub fn compose_rgb<T: Scalar>(img: &MultiChannelImage<T>) -> Result<RgbImage<T>> {
    let r = img.channel(CH_MCHERRY)?;
    let g = img.channel(CH_GCAMP)?;
    let half = T::cast_f64(0.5);
    let mut data = Vec::with_capacity(3 * img.height * img.width);
    data.extend_from_slice(&r.data);
    data.extend_from_slice(&g.data);
    data.extend(r.data.iter().zip(g.data.iter()).map(|(a, b)| (*a + *b) * half));
    Ok(RgbImage { height: img.height, width: img.width, data })
}

/// Foreground iff p > tau (strictly).
pub fn threshold_map<T: Scalar>(prob: &ProbabilityMap<T>, tau: f64) -> Result<BinaryRaster> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("threshold tau {tau} outside [0,1]")));
    }
    let t = T::cast_f64(tau);
    Ok(BinaryRaster {
        height: prob.height,
        width: prob.width,
        data: prob.data.iter().map(|v| *v > t).collect(),
    })
}
