//! Differentiable backward warping: each output pixel samples the moving
//! image bilinearly at its displaced position p + d(p).
//!
//! Sample coordinates are clamped to the image rectangle (edge replication),
//! which keeps the loss finite at borders. The displacement gradient is the
//! analytic derivative of bilinear sampling; it is zero where the raw sample
//! coordinate fell outside the image (the clamp absorbs the perturbation),
//! and uses the right-sided cell at exact integer coordinates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::DisplacementField;

/// Single-channel 2D intensity grid. Intensities are finite; file ingestion
/// normalizes them to [0, 1], though intermediates may exceed that range.
#[derive(Debug, Clone)]
pub struct Image2D {
    h: usize,
    w: usize,
    pixels: Tensor,
}

impl Image2D {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::Shape(format!(
                "image {h}x{w} needs {} pixels, got {}",
                h * w,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image contains non-finite intensity {bad}")));
        }
        Ok(Image2D { h, w, pixels: Tensor::new(vec![h, w], pixels)? })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                pixels.push(f(y, x));
            }
        }
        Image2D::new(h, w, pixels)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f64] {
        self.pixels.data()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels.data()[y * self.w + x]
    }
}

/// Everything the forward sample and both adjoints need at one pixel.
pub(crate) struct SampleInfo {
    pub value: f64,
    /// d(value)/d(sample y), already zeroed if the raw y coordinate was
    /// out of bounds.
    pub d_dsy: f64,
    pub d_dsx: f64,
    /// The four source pixels and their bilinear weights.
    pub corners: [(usize, f64); 4],
}

/// Bilinear sample of a row-major h x w channel at (sy, sx), clamped to the
/// image rectangle.
pub(crate) fn sample_info(data: &[f64], h: usize, w: usize, sy_raw: f64, sx_raw: f64) -> SampleInfo {
    let max_y = (h - 1) as f64;
    let max_x = (w - 1) as f64;
    let oob_y = !(sy_raw >= 0.0 && sy_raw <= max_y);
    let oob_x = !(sx_raw >= 0.0 && sx_raw <= max_x);
    let sy = sy_raw.clamp(0.0, max_y);
    let sx = sx_raw.clamp(0.0, max_x);
    let y0 = (sy.floor() as usize).min(h - 1);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let v00 = data[y0 * w + x0];
    let v01 = data[y0 * w + x1];
    let v10 = data[y1 * w + x0];
    let v11 = data[y1 * w + x1];
    let top = v00 + fx * (v01 - v00);
    let bottom = v10 + fx * (v11 - v10);
    let value = top + fy * (bottom - top);
    let d_dsy = if oob_y { 0.0 } else { bottom - top };
    let d_dsx = if oob_x { 0.0 } else { (1.0 - fy) * (v01 - v00) + fy * (v11 - v10) };
    let w00 = (1.0 - fy) * (1.0 - fx);
    let w01 = (1.0 - fy) * fx;
    let w10 = fy * (1.0 - fx);
    let w11 = fy * fx;
    SampleInfo {
        value,
        d_dsy,
        d_dsx,
        corners: [
            (y0 * w + x0, w00),
            (y0 * w + x1, w01),
            (y1 * w + x0, w10),
            (y1 * w + x1, w11),
        ],
    }
}

/// Value-only bilinear sample, used where no derivatives are needed.
pub(crate) fn sample_channel(data: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    sample_info(data, h, w, sy, sx).value
}

/// Backward-warp `moving` by `dvf`: out(p) = sample(moving, p + d(p)).
pub fn warp(moving: &Image2D, dvf: &DisplacementField) -> Result<Image2D> {
    if dvf.h() != moving.h || dvf.w() != moving.w {
        return Err(Error::Shape(format!(
            "displacement field {}x{} does not match image {}x{}",
            dvf.h(),
            dvf.w(),
            moving.h,
            moving.w
        )));
    }
    let (h, w) = (moving.h, moving.w);
    let data = moving.pixels();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + dvf.at(0, y, x);
            let sx = x as f64 + dvf.at(1, y, x);
            out.push(sample_channel(data, h, w, sy, sx));
        }
    }
    Image2D::new(h, w, out)
}

/// Adjoint of `warp` with respect to the displacement field: per pixel, the
/// upstream gradient times the analytic bilinear derivative.
pub fn warp_gradient(upstream: &Tensor, moving: &Image2D, dvf: &DisplacementField) -> Result<Tensor> {
    let (h, w) = (moving.h, moving.w);
    if upstream.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "upstream gradient must be [{h}, {w}], got {:?}",
            upstream.shape()
        )));
    }
    if dvf.h() != h || dvf.w() != w {
        return Err(Error::Shape(format!(
            "displacement field {}x{} does not match image {}x{}",
            dvf.h(),
            dvf.w(),
            h,
            w
        )));
    }
    let data = moving.pixels();
    let up = upstream.data();
    let mut grad = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + dvf.at(0, y, x);
            let sx = x as f64 + dvf.at(1, y, x);
            let s = sample_info(data, h, w, sy, sx);
            let g = up[y * w + x];
            grad[y * w + x] = g * s.d_dsy;
            grad[h * w + y * w + x] = g * s.d_dsx;
        }
    }
    Tensor::new(vec![2, h, w], grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_dvf(h: usize, w: usize, dy: f64, dx: f64) -> DisplacementField {
        let mut d = vec![dy; h * w];
        d.extend(std::iter::repeat(dx).take(h * w));
        DisplacementField::new(h, w, Tensor::new(vec![2, h, w], d).unwrap()).unwrap()
    }

    fn smooth_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image2D {
        let (a, b, c) = (
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..3.0),
        );
        Image2D::from_fn(h, w, |y, x| {
            (0.5 + 0.4 * (a * y as f64 / h as f64 + c).sin() * (b * x as f64 / w as f64 + c).cos())
                .clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn zero_dvf_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image2D::from_fn(9, 7, |y, x| rng.random_range(0.0..1.0) + (y * x) as f64 * 0.001).unwrap();
        let out = warp(&img, &DisplacementField::zeros(9, 7)).unwrap();
        assert_eq!(img.pixels(), out.pixels());
    }

    #[test]
    fn unit_shift_on_vertical_ramp() {
        let h = 6;
        let img = Image2D::from_fn(h, 4, |y, _| y as f64 / (h - 1) as f64).unwrap();
        let out = warp(&img, &const_dvf(h, 4, 1.0, 0.0)).unwrap();
        for y in 0..h - 1 {
            for x in 0..4 {
                assert_eq!(out.at(y, x), img.at(y + 1, x));
            }
        }
        for x in 0..4 {
            assert_eq!(out.at(h - 1, x), img.at(h - 1, x));
        }
    }

    #[test]
    fn half_pixel_shift_interpolates_midpoint() {
        let img = Image2D::new(1, 2, vec![0.0, 1.0]).unwrap();
        let out = warp(&img, &const_dvf(1, 2, 0.0, 0.5)).unwrap();
        assert_eq!(out.pixels(), &[0.5, 1.0]);
    }

    #[test]
    fn integer_shift_composition_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = smooth_image(&mut rng, 10, 10);
        let once = warp(&warp(&img, &const_dvf(10, 10, 1.0, 0.0)).unwrap(), &const_dvf(10, 10, 2.0, 0.0)).unwrap();
        let direct = warp(&img, &const_dvf(10, 10, 3.0, 0.0)).unwrap();
        for y in 0..6 {
            for x in 0..10 {
                assert!((once.at(y, x) - direct.at(y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let img = Image2D::new(2, 2, vec![0.0; 4]).unwrap();
        let dvf = DisplacementField::zeros(3, 2);
        assert!(matches!(warp(&img, &dvf), Err(Error::Shape(_))));
        let up = Tensor::zeros(vec![3, 3]);
        assert!(matches!(
            warp_gradient(&up, &img, &DisplacementField::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = smooth_image(&mut rng, 5, 5);
        let g = warp_gradient(&Tensor::zeros(vec![5, 5]), &img, &const_dvf(5, 5, 0.3, -0.2)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_gives_zero_gradient() {
        let img = Image2D::new(4, 4, vec![0.6; 16]).unwrap();
        let up = Tensor::full(vec![4, 4], 1.0);
        let g = warp_gradient(&up, &img, &const_dvf(4, 4, 0.4, 0.3)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_off_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let (h, w) = (7, 8);
            let img = smooth_image(&mut rng, h, w);
            // Fractional parts stay in [0.3, 0.45] or [0.55, 0.7]; samples stay
            // strictly inside the image so neither the clamp nor the lattice
            // kink is within reach of the probe.
            let mut d = vec![0.0; 2 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mag = 0.3 + 0.15 * rng.random_range(0.0..1.0);
                    let dy = if y == 0 {
                        mag
                    } else if y == h - 1 {
                        -mag
                    } else if rng.random_range(0.0..1.0) < 0.5 {
                        mag
                    } else {
                        -mag
                    };
                    let mag = 0.3 + 0.15 * rng.random_range(0.0..1.0);
                    let dx = if x == 0 {
                        mag
                    } else if x == w - 1 {
                        -mag
                    } else if rng.random_range(0.0..1.0) < 0.5 {
                        mag
                    } else {
                        -mag
                    };
                    d[y * w + x] = dy;
                    d[h * w + y * w + x] = dx;
                }
            }
            let dvf = DisplacementField::new(h, w, Tensor::new(vec![2, h, w], d.clone()).unwrap()).unwrap();
            let up: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream = Tensor::new(vec![h, w], up.clone()).unwrap();
            let analytic = warp_gradient(&upstream, &img, &dvf).unwrap();
            let loss = |dd: &[f64]| -> f64 {
                let f = DisplacementField::new(h, w, Tensor::new(vec![2, h, w], dd.to_vec()).unwrap()).unwrap();
                warp(&img, &f)
                    .unwrap()
                    .pixels()
                    .iter()
                    .zip(&up)
                    .map(|(&a, &b)| a * b)
                    .sum()
            };
            let step = 1e-4;
            for i in 0..2 * h * w {
                let mut dp = d.clone();
                dp[i] += step;
                let mut dm = d.clone();
                dm[i] -= step;
                let fd = (loss(&dp) - loss(&dm)) / (2.0 * step);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "entry {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn output_within_neighbor_bounds(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = smooth_image(&mut rng, 6, 6);
            let d: Vec<f64> = (0..72).map(|_| rng.random_range(-2.5..2.5)).collect();
            let dvf = DisplacementField::new(6, 6, Tensor::new(vec![2, 6, 6], d).unwrap()).unwrap();
            let out = warp(&img, &dvf).unwrap();
            let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in out.pixels() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
