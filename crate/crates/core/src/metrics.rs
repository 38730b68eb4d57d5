//! Similarity loss (normalized cross correlation) and segmentation metrics
//! (Dice overlap, symmetric surface distances) plus mask warping.

use crate::error::{Error, Result};
use crate::resampler::{warp, Image2D};
use crate::tensor::Tensor;
use crate::transformer::DisplacementField;

/// Per-pixel variance below this threshold marks an image as constant for
/// NCC purposes (standard deviation under 1e-10 on unit-scale intensities).
const VARIANCE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy)]
pub struct NccOutcome {
    pub value: f64,
    /// True when either image was (numerically) constant; the value is then
    /// defined as 0 so a blank sample cannot abort a training batch.
    pub degenerate: bool,
}

pub(crate) struct NccStats {
    pub a_mean: f64,
    pub b_mean: f64,
    pub saa: f64,
    pub sbb: f64,
    pub sab: f64,
    pub degenerate: bool,
}

impl NccStats {
    pub fn value(&self) -> f64 {
        if self.degenerate {
            0.0
        } else {
            self.sab / (self.saa * self.sbb).sqrt()
        }
    }
}

pub(crate) fn ncc_stats(a: &[f64], b: &[f64]) -> NccStats {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let a_mean = a.iter().sum::<f64>() / n;
    let b_mean = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let da = x - a_mean;
        let db = y - b_mean;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    let degenerate = saa < VARIANCE_FLOOR * n || sbb < VARIANCE_FLOOR * n;
    NccStats { a_mean, b_mean, saa, sbb, sab, degenerate }
}

/// Normalized cross correlation over all pixels of a pair, in [-1, 1].
/// Constant images yield value 0 with the degenerate flag set.
pub fn ncc(a: &Image2D, b: &Image2D) -> Result<NccOutcome> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::Shape(format!(
            "ncc needs equal dims, got {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let stats = ncc_stats(a.pixels(), b.pixels());
    Ok(NccOutcome { value: stats.value(), degenerate: stats.degenerate })
}

/// Binary annotation mask.
#[derive(Debug, Clone)]
pub struct LabelMask {
    h: usize,
    w: usize,
    mask: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != h * w {
            return Err(Error::Shape(format!(
                "mask {h}x{w} needs {} entries, got {}",
                h * w,
                mask.len()
            )));
        }
        if let Some(bad) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask values must be 0 or 1, got {bad}")));
        }
        Ok(LabelMask { h, w, mask })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                mask.push(u8::from(f(y, x)));
            }
        }
        LabelMask { h, w, mask }
    }

    /// Threshold a real-valued image at 0.5.
    pub fn from_image(img: &Image2D) -> Self {
        LabelMask::from_fn(img.h(), img.w(), |y, x| img.at(y, x) >= 0.5)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.w + x] == 1
    }

    pub fn values(&self) -> &[u8] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

/// Dice overlap 2|a n b| / (|a| + |b|); 1.0 when both masks are empty.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!(
            "dice needs equal dims, got {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&x, &y) in a.mask.iter().zip(&b.mask) {
        inter += u64::from(x & y);
        total += u64::from(x) + u64::from(y);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mask pixels with at least one zero 4-neighbor; the image border counts as
/// outside. Returned in row-major order.
pub(crate) fn boundary_pixels(m: &LabelMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(y, x) {
                continue;
            }
            let exposed = y == 0
                || x == 0
                || y == m.h - 1
                || x == m.w - 1
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if exposed {
                out.push((y, x));
            }
        }
    }
    out
}

/// Symmetric surface distances between two mask contours: the directed
/// nearest-boundary distances of both masks are pooled into one multiset;
/// MAD is its mean and sd95 its 95th percentile (nearest-rank). Distances
/// are Euclidean center-to-center, scaled by `pixel_size`.
pub fn surface_distances(a: &LabelMask, b: &LabelMask, pixel_size: f64) -> Result<(f64, f64)> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!(
            "surface distances need equal dims, got {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::Data("surface distances are undefined for an empty mask".into()));
    }
    let mut pooled = Vec::with_capacity(ba.len() + bb.len());
    directed_distances(&ba, &bb, pixel_size, &mut pooled);
    directed_distances(&bb, &ba, pixel_size, &mut pooled);
    let mad = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let mut sorted = pooled;
    sorted.sort_by(f64::total_cmp);
    // Nearest-rank 95th percentile: the ceil(0.95 n)-th order statistic.
    let rank = (19 * sorted.len()).div_ceil(20);
    let sd95 = sorted[rank - 1];
    Ok((mad, sd95))
}

fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], pixel_size: f64, out: &mut Vec<f64>) {
    for &(py, px) in from {
        let mut best = u64::MAX;
        for &(qy, qx) in to {
            let dy = py as i64 - qy as i64;
            let dx = px as i64 - qx as i64;
            let d2 = (dy * dy + dx * dx) as u64;
            if d2 < best {
                best = d2;
            }
        }
        out.push((best as f64).sqrt() * pixel_size);
    }
}

/// Warp a mask by treating it as a real-valued image, then threshold at 0.5.
pub fn warp_mask(mask: &LabelMask, dvf: &DisplacementField) -> Result<LabelMask> {
    if dvf.h() != mask.h || dvf.w() != mask.w {
        return Err(Error::Shape(format!(
            "displacement field {}x{} does not match mask {}x{}",
            dvf.h(),
            dvf.w(),
            mask.h,
            mask.w
        )));
    }
    let img = Image2D::new(mask.h, mask.w, mask.mask.iter().map(|&v| f64::from(v)).collect())?;
    let warped = warp(&img, dvf)?;
    Ok(LabelMask::from_image(&warped))
}

/// Registration quality for one evaluated pair, mirroring the metrics table:
/// overlap and surface distances of the warped annotation plus similarity
/// before and after registration.
#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub dice: f64,
    pub mad: f64,
    pub sd95: f64,
    pub ncc_before: f64,
    pub ncc_after: f64,
}

/// Gradient of -ncc(fixed, warped) with respect to each warped pixel; zero
/// (with the flag) when either image is constant. The same adjoint drives the
/// training tape; this standalone form also serves the finite-difference tests.
pub fn ncc_loss_gradient(fixed: &Image2D, warped: &Image2D) -> Result<(f64, Tensor, bool)> {
    if fixed.h() != warped.h() || fixed.w() != warped.w() {
        return Err(Error::Shape(format!(
            "ncc loss needs equal dims, got {}x{} vs {}x{}",
            fixed.h(),
            fixed.w(),
            warped.h(),
            warped.w()
        )));
    }
    let a = fixed.pixels();
    let b = warped.pixels();
    let stats = ncc_stats(a, b);
    let (h, w) = (fixed.h(), fixed.w());
    if stats.degenerate {
        return Ok((0.0, Tensor::zeros(vec![h, w]), true));
    }
    let denom = (stats.saa * stats.sbb).sqrt();
    let ratio = stats.sab / stats.sbb;
    let mut grad = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        // d ncc / d b_i = ((a_i - am) - (Sab/Sbb)(b_i - bm)) / sqrt(Saa Sbb)
        grad.push(-((x - stats.a_mean) - ratio * (y - stats.b_mean)) / denom);
    }
    Ok((-stats.value(), Tensor::new(vec![h, w], grad)?, false))
}
