//! Overlap-tile inference: runs a fully convolutional network over large
//! rasters in fixed-size windows with enough context overlap that the
//! stitched result equals whole-image inference.

use crate::error::{Error, Result};
use crate::netgraph::NetworkSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{ProbabilityMap, Raster};

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Runs `net` on `raster` tile by tile and stitches the central regions.
/// `tile` is the output tile edge, `overlap` the context margin read on
/// each side. Windows are clamped at the raster border (never padded),
/// which matches the zero padding the network itself applies there, so
/// the output is identical to single-pass inference.
pub fn tiled_inference<T: Scalar>(
    net: &NetworkSpec<T>,
    raster: &Raster<T>,
    tile: usize,
    overlap: usize,
) -> Result<ProbabilityMap<T>> {
    let (h, w) = (raster.height, raster.width);
    let pf = net.pool_factor.max(1);
    if tile == 0 || tile % pf != 0 {
        return Err(Error::Config(format!(
            "tile size {tile} must be a positive multiple of the pool factor {pf}"
        )));
    }
    if h % pf != 0 || w % pf != 0 {
        return Err(Error::Dimension(format!(
            "raster {h}x{w} extents must divide the pool factor {pf}"
        )));
    }
    let radius = net.receptive_radius();
    if overlap < radius {
        return Err(Error::Config(format!(
            "overlap {overlap} is below the receptive radius {radius}; \
             increase it to at least {}",
            round_up(radius, pf)
        )));
    }
    let margin = round_up(overlap, pf);

    let mut out = Raster::zeros(h, w);
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + tile).min(h);
        let wr0 = r0.saturating_sub(margin);
        let wr1 = (r1 + margin).min(h);
        let mut c0 = 0;
        while c0 < w {
            let c1 = (c0 + tile).min(w);
            let wc0 = c0.saturating_sub(margin);
            let wc1 = (c1 + margin).min(w);
            let (wh, ww) = (wr1 - wr0, wc1 - wc0);
            let mut window = Vec::with_capacity(wh * ww);
            for r in wr0..wr1 {
                window.extend_from_slice(&raster.data[r * w + wc0..r * w + wc1]);
            }
            let x = Tensor::from_vec(&[1, wh, ww], window)?;
            let y = net.infer(&x)?;
            if y.shape() != [1, wh, ww] {
                return Err(Error::Contract(format!(
                    "tiled inference needs a single-channel same-size output, got {:?}",
                    y.shape()
                )));
            }
            let data = y.data();
            for r in r0..r1 {
                let src = (r - wr0) * ww + (c0 - wc0);
                let dst = r * w + c0;
                out.data[dst..dst + (c1 - c0)].copy_from_slice(&data[src..src + (c1 - c0)]);
            }
            c0 = c1;
        }
        r0 = r1;
    }
    Ok(out)
}
