//! Patch extraction, bilinear resampling and augmentation. Border fill is
//! mirror reflection about the border pixel everywhere.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{sample_normal, stream};
use crate::scalar::Scalar;
use crate::trainer::CellClass;

use super::{Raster, RgbImage};

/// A 3-channel crop centered on a component centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T: Scalar> {
    pub size: usize,
    /// 3 × size × size values, channel-major.
    pub data: Vec<T>,
    pub centroid: (f64, f64),
    pub source_id: String,
    pub label: Option<CellClass>,
}

impl<T: Scalar> Patch<T> {
    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> T {
        self.data[(ch * self.size + r) * self.size + c]
    }
}

/// Affine augmentation ranges, in degrees / scale factors, plus the
/// dataset amplification factor.
#[derive(Debug, Clone, Copy)]
pub struct AugmentSpec {
    pub angle_range: (f64, f64),
    pub scale_range: (f64, f64),
    pub factor: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { angle_range: (-30.0, 30.0), scale_range: (0.9, 1.1), factor: 2 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.angle_range;
        if !(a0 <= a1 && a0 > -180.0 && a1 <= 180.0) {
            return Err(Error::Config(format!("angle_range ({a0}, {a1}) outside (-180, 180]")));
        }
        let (s0, s1) = self.scale_range;
        if !(s0 <= s1 && s0 > 0.0) {
            return Err(Error::Config(format!("scale_range ({s0}, {s1}) must be positive")));
        }
        if self.factor < 1 {
            return Err(Error::Config("amplification factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mirror reflection about the border pixel (the border itself is not
/// duplicated); handles coordinates arbitrarily far outside.
#[inline]
pub(crate) fn mirror_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Rounds half away from zero; the deterministic crop anchor rule.
#[inline]
fn round_half_away(x: f64) -> isize {
    x.round() as isize
}

/// Crops a `size`×`size` patch (odd size) centered at the rounded
/// centroid; out-of-bounds pixels are mirror-filled.
pub fn extract_patch<T: Scalar>(
    image: &RgbImage<T>,
    centroid: (f64, f64),
    size: usize,
) -> Result<Patch<T>> {
    if size % 2 == 0 {
        return Err(Error::Config(format!("patch size {size} must be odd")));
    }
    let half = (size / 2) as isize;
    let cr = round_half_away(centroid.0);
    let cc = round_half_away(centroid.1);
    let mut data = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        for dr in -half..=half {
            let r = mirror_index(cr + dr, image.height);
            for dc in -half..=half {
                let c = mirror_index(cc + dc, image.width);
                data.push(image.get(ch, r, c));
            }
        }
    }
    Ok(Patch { size, data, centroid, source_id: String::new(), label: None })
}

#[inline]
fn bilinear_plane<T: Scalar>(plane: &[T], h: usize, w: usize, r: f64, c: f64) -> T {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let (r0i, c0i) = (r0 as isize, c0 as isize);
    let idx = |ri: isize, ci: isize| -> T {
        plane[mirror_index(ri, h) * w + mirror_index(ci, w)]
    };
    let v00 = idx(r0i, c0i).to_f64_lossy();
    let v01 = idx(r0i, c0i + 1).to_f64_lossy();
    let v10 = idx(r0i + 1, c0i).to_f64_lossy();
    let v11 = idx(r0i + 1, c0i + 1).to_f64_lossy();
    let top = v00 * (1.0 - fc) + v01 * fc;
    let bot = v10 * (1.0 - fc) + v11 * fc;
    T::cast_f64(top * (1.0 - fr) + bot * fr)
}

/// Bilinear resampling on the corner-aligned grid. `target == size` is a
/// bitwise identity shortcut.
pub fn resample_bilinear<T: Scalar>(patch: &Patch<T>, target: usize) -> Result<Patch<T>> {
    if target == 0 {
        return Err(Error::Config("resample target must be >= 1".into()));
    }
    if target == patch.size {
        return Ok(patch.clone());
    }
    let n = patch.size;
    let step = if target > 1 { (n - 1) as f64 / (target - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(3 * target * target);
    for ch in 0..3 {
        let plane = &patch.data[ch * n * n..(ch + 1) * n * n];
        for r in 0..target {
            let sr = r as f64 * step;
            for c in 0..target {
                data.push(bilinear_plane(plane, n, n, sr, c as f64 * step));
            }
        }
    }
    Ok(Patch {
        size: target,
        data,
        centroid: patch.centroid,
        source_id: patch.source_id.clone(),
        label: patch.label,
    })
}

/// Rotation by `angle_deg` and scaling by `scale` about the patch center,
/// bilinear sampling with mirror fill. Angle 0 + scale 1 short-circuits to
/// a bitwise identity.
pub fn rotate_scale<T: Scalar>(patch: &Patch<T>, angle_deg: f64, scale: f64) -> Patch<T> {
    if angle_deg == 0.0 && scale == 1.0 {
        return patch.clone();
    }
    let n = patch.size;
    let center = (n as f64 - 1.0) / 2.0;
    let theta = angle_deg.to_radians();
    // inverse map: rotate by -theta and divide by scale
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let inv_s = 1.0 / scale;
    let mut data = Vec::with_capacity(3 * n * n);
    for ch in 0..3 {
        let plane = &patch.data[ch * n * n..(ch + 1) * n * n];
        for r in 0..n {
            let dr = r as f64 - center;
            for c in 0..n {
                let dc = c as f64 - center;
                let sr = center + (cos_t * dr + sin_t * dc) * inv_s;
                let sc = center + (-sin_t * dr + cos_t * dc) * inv_s;
                data.push(bilinear_plane(plane, n, n, sr, sc));
            }
        }
    }
    Patch {
        size: n,
        data,
        centroid: patch.centroid,
        source_id: patch.source_id.clone(),
        label: patch.label,
    }
}

/// One random affine draw: angle ~ U(angle_range), scale ~ U(scale_range).
pub fn augment_affine<T: Scalar>(
    patch: &Patch<T>,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Patch<T>> {
    spec.validate()?;
    let angle = if spec.angle_range.0 == spec.angle_range.1 {
        spec.angle_range.0
    } else {
        rng.gen_range(spec.angle_range.0..spec.angle_range.1)
    };
    let scale = if spec.scale_range.0 == spec.scale_range.1 {
        spec.scale_range.0
    } else {
        rng.gen_range(spec.scale_range.0..spec.scale_range.1)
    };
    Ok(rotate_scale(patch, angle, scale))
}

/// Dataset-level amplification: appends `factor − 1` augmented copies per
/// patch. The first N outputs are the untouched originals. Augmentation
/// RNG streams are keyed per patch index, so parallel and serial
/// amplification would produce identical datasets.
pub fn amplify_patches<T: Scalar>(
    patches: &[Patch<T>],
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Vec<Patch<T>>> {
    spec.validate()?;
    let mut out = patches.to_vec();
    for copy in 1..spec.factor {
        for (i, p) in patches.iter().enumerate() {
            let mut rng = stream(seed, "augment", (copy * patches.len() + i) as u64);
            out.push(augment_affine(p, spec, &mut rng)?);
        }
    }
    Ok(out)
}

/// Elastic deformation parameters: coarse grid spacing, Gaussian smoothing
/// std, and displacement scale.
#[derive(Debug, Clone, Copy)]
pub struct ElasticSpec {
    pub grid_spacing: usize,
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for ElasticSpec {
    fn default() -> Self {
        ElasticSpec { grid_spacing: 16, sigma: 4.0, alpha: 2.0 }
    }
}

impl ElasticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_spacing < 2 {
            return Err(Error::Config("elastic grid_spacing must be >= 2".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("elastic sigma must be > 0".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("elastic alpha must be >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

fn smooth_separable(field: &mut Vec<f64>, h: usize, w: usize, kernel: &[f64]) {
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let cc = mirror_index(c as isize + i as isize - radius as isize, w);
                acc += field[r * w + cc] * kv;
            }
            tmp[r * w + c] = acc;
        }
    }
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let rr = mirror_index(r as isize + i as isize - radius as isize, h);
                acc += tmp[rr * w + c] * kv;
            }
            field[r * w + c] = acc;
        }
    }
}

/// Builds the dense displacement field: unit-normal draws per coarse grid
/// node, bilinearly upsampled, Gaussian-smoothed (std `sigma`) and scaled
/// by `alpha`.
fn elastic_field(
    h: usize,
    w: usize,
    spec: &ElasticSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let gh = h.div_ceil(spec.grid_spacing) + 1;
    let gw = w.div_ceil(spec.grid_spacing) + 1;
    let mut coarse_y = Vec::with_capacity(gh * gw);
    let mut coarse_x = Vec::with_capacity(gh * gw);
    for _ in 0..gh * gw {
        coarse_y.push(sample_normal(rng));
        coarse_x.push(sample_normal(rng));
    }
    let upsample = |coarse: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; h * w];
        for r in 0..h {
            let gr = r as f64 / spec.grid_spacing as f64;
            let (r0, fr) = (gr.floor() as usize, gr.fract());
            let r1 = (r0 + 1).min(gh - 1);
            for c in 0..w {
                let gc = c as f64 / spec.grid_spacing as f64;
                let (c0, fc) = (gc.floor() as usize, gc.fract());
                let c1 = (c0 + 1).min(gw - 1);
                let top = coarse[r0 * gw + c0] * (1.0 - fc) + coarse[r0 * gw + c1] * fc;
                let bot = coarse[r1 * gw + c0] * (1.0 - fc) + coarse[r1 * gw + c1] * fc;
                full[r * w + c] = top * (1.0 - fr) + bot * fr;
            }
        }
        full
    };
    let mut dy = upsample(&coarse_y);
    let mut dx = upsample(&coarse_x);
    let kernel = gaussian_kernel(spec.sigma);
    smooth_separable(&mut dy, h, w, &kernel);
    smooth_separable(&mut dx, h, w, &kernel);
    // alpha is the peak displacement in pixels: rescale the smoothed
    // field to unit maximum magnitude first
    let peak = dy
        .iter()
        .zip(dx.iter())
        .map(|(y, x)| (y * y + x * x).sqrt())
        .fold(0.0f64, f64::max);
    let gain = if peak > 0.0 { spec.alpha / peak } else { 0.0 };
    for v in dy.iter_mut().chain(dx.iter_mut()) {
        *v *= gain;
    }
    (dy, dx)
}

fn warp_plane<T: Scalar>(plane: &[T], h: usize, w: usize, dy: &[f64], dx: &[f64]) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            out.push(bilinear_plane(plane, h, w, r as f64 + dy[i], c as f64 + dx[i]));
        }
    }
    out
}

/// Random elastic warp of a single raster. `alpha == 0` is a bitwise
/// identity (the RNG stream is still advanced identically).
pub fn elastic_deform<T: Scalar>(
    image: &Raster<T>,
    spec: &ElasticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Raster<T>> {
    spec.validate()?;
    let (dy, dx) = elastic_field(image.height, image.width, spec, rng);
    if spec.alpha == 0.0 {
        return Ok(image.clone());
    }
    Raster::new(
        image.height,
        image.width,
        warp_plane(&image.data, image.height, image.width, &dy, &dx),
    )
}

/// Applies one shared displacement field to an (image, target) pair, the
/// augmentation step of segmentation training.
pub fn elastic_deform_pair<T: Scalar>(
    image: &Raster<T>,
    target: &Raster<T>,
    spec: &ElasticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Raster<T>, Raster<T>)> {
    spec.validate()?;
    if image.height != target.height || image.width != target.width {
        return Err(Error::Dimension(format!(
            "elastic pair geometry mismatch: {}x{} vs {}x{}",
            image.height, image.width, target.height, target.width
        )));
    }
    let (dy, dx) = elastic_field(image.height, image.width, spec, rng);
    if spec.alpha == 0.0 {
        return Ok((image.clone(), target.clone()));
    }
    let (h, w) = (image.height, image.width);
    Ok((
        Raster::new(h, w, warp_plane(&image.data, h, w, &dy, &dx))?,
        Raster::new(h, w, warp_plane(&target.data, h, w, &dy, &dx))?,
    ))
}
