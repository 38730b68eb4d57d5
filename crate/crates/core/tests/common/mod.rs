//! Helpers shared by the integration tests: fixture loading and independent
//! brute-force oracles for the spline interpolator and the overlap metrics.
//! Oracle code deliberately avoids the library's own kernels; weights come
//! straight from the textbook polynomials and distances from exhaustive
//! scans.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dirnet_core::data_io::{load_idx_images, load_idx_labels};
use dirnet_core::metrics::LabelMask;
use dirnet_core::resampler::Image2D;
use dirnet_core::transformer::{ControlGrid, SplineOrder};

#[allow(dead_code)]
pub fn digits_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/digits")
}

/// All fixture images of one digit class, capped.
#[allow(dead_code)]
pub fn digit_class_pool(digit: u8, cap: usize) -> Vec<Image2D> {
    let dir = digits_dir();
    let images = load_idx_images(&dir.join("train-images-idx3-ubyte")).expect("fixture images");
    let labels = load_idx_labels(&dir.join("train-labels-idx1-ubyte")).expect("fixture labels");
    images
        .into_iter()
        .zip(labels)
        .filter(|&(_, l)| l == digit)
        .map(|(im, _)| im)
        .take(cap)
        .collect()
}

fn cubic_weights(u: f64) -> [f64; 4] {
    let b0 = (1.0 - u).powi(3) / 6.0;
    let b1 = (3.0 * u.powi(3) - 6.0 * u.powi(2) + 4.0) / 6.0;
    let b2 = (-3.0 * u.powi(3) + 3.0 * u.powi(2) + 3.0 * u + 1.0) / 6.0;
    let b3 = u.powi(3) / 6.0;
    [b0, b1, b2, b3]
}

fn quadratic_weights(u: f64) -> [f64; 3] {
    let b0 = (1.0 - u).powi(2) / 2.0;
    let b1 = (-2.0 * u.powi(2) + 2.0 * u + 1.0) / 2.0;
    let b2 = u.powi(2) / 2.0;
    [b0, b1, b2]
}

/// Naive double-sum spline interpolation of a control grid, returned as
/// [2, h, w] flattened. Support placement follows the documented contract
/// (cubic anchored at floor(t), quadratic at the nearest control point,
/// indices clamped at the borders); everything else is the plain formula.
#[allow(dead_code)]
pub fn dvf_oracle(grid: &ControlGrid, h: usize, w: usize, order: SplineOrder) -> Vec<f64> {
    let gh = grid.gh();
    let gw = grid.gw();
    let disp = grid.disp().data();
    let clamp = |i: isize, g: usize| i.clamp(0, g as isize - 1) as usize;
    let stencil = |t: f64, g: usize| -> Vec<(usize, f64)> {
        match order {
            SplineOrder::Cubic => {
                let i = t.floor();
                let wts = cubic_weights(t - i);
                (0..4)
                    .map(|l| (clamp(i as isize - 1 + l as isize, g), wts[l]))
                    .collect()
            }
            SplineOrder::Quadratic => {
                let mut base = (t + 0.5).floor();
                let mut u = t - base + 0.5;
                if u < 0.0 {
                    base -= 1.0;
                    u += 1.0;
                } else if u >= 1.0 {
                    base += 1.0;
                    u -= 1.0;
                }
                let wts = quadratic_weights(u);
                (0..3)
                    .map(|l| (clamp(base as isize - 1 + l as isize, g), wts[l]))
                    .collect()
            }
        }
    };
    let mut out = vec![0.0; 2 * h * w];
    for ch in 0..2 {
        for py in 0..h {
            let sy = stencil(py as f64 / grid.spacing_y(), gh);
            for px in 0..w {
                let sx = stencil(px as f64 / grid.spacing_x(), gw);
                let mut acc = 0.0;
                for &(iy, wy) in &sy {
                    for &(ix, wx) in &sx {
                        acc += wy * wx * disp[ch * gh * gw + iy * gw + ix];
                    }
                }
                out[ch * h * w + py * w + px] = acc;
            }
        }
    }
    out
}

#[allow(dead_code)]
pub fn dice_oracle(a: &LabelMask, b: &LabelMask) -> f64 {
    let mut inter = 0u64;
    let mut total = 0u64;
    for y in 0..a.h() {
        for x in 0..a.w() {
            inter += u64::from(a.get(y, x) && b.get(y, x));
            total += u64::from(a.get(y, x)) + u64::from(b.get(y, x));
        }
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn oracle_boundary(m: &LabelMask) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < m.h() && (x as usize) < m.w() && m.get(y as usize, x as usize)
    };
    let mut out = Vec::new();
    for y in 0..m.h() as isize {
        for x in 0..m.w() as isize {
            if inside(y, x)
                && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1))
            {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Exhaustive symmetric surface distances: pooled directed nearest-neighbor
/// distances of both boundaries, mean plus nearest-rank 95th percentile.
/// The percentile comes from a selection scan rather than a sort.
#[allow(dead_code)]
pub fn surface_oracle(a: &LabelMask, b: &LabelMask, pixel_size: f64) -> (f64, f64) {
    let ba = oracle_boundary(a);
    let bb = oracle_boundary(b);
    assert!(!ba.is_empty() && !bb.is_empty(), "oracle needs non-empty boundaries");
    let nearest = |p: (usize, usize), set: &[(usize, usize)]| -> f64 {
        set.iter()
            .map(|q| {
                let dy = p.0 as f64 - q.0 as f64;
                let dx = p.1 as f64 - q.1 as f64;
                ((dy * dy + dx * dx).sqrt()) * pixel_size
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut pooled: Vec<f64> = ba.iter().map(|&p| nearest(p, &bb)).collect();
    pooled.extend(bb.iter().map(|&p| nearest(p, &ba)));
    let mad = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let rank = (pooled.len() * 19 + 19) / 20;
    let sd95 = pooled
        .iter()
        .copied()
        .filter(|&v| pooled.iter().filter(|&&u| u <= v).count() >= rank)
        .fold(f64::INFINITY, f64::min);
    (mad, sd95)
}

/// Random mask with at least one set pixel.
#[allow(dead_code)]
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
    loop {
        let fill = rng.random_range(0.2..0.8);
        let cells: Vec<bool> = (0..h * w).map(|_| rng.random_bool(fill)).collect();
        let m = LabelMask::from_fn(h, w, |y, x| cells[y * w + x]);
        if cells.iter().any(|&c| c) {
            return m;
        }
    }
}

/// Seeded RNG shorthand for the tests.
#[allow(dead_code)]
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
