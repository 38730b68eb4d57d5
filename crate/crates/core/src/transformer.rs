//! B-spline interpolation from a coarse control-point grid to a dense
//! per-pixel displacement field, plus its adjoint and a numeric field
//! inverter.
//!
//! Channel convention everywhere: channel 0 is the row (y) displacement,
//! channel 1 the column (x) displacement, both in pixels. Control point
//! (i, j) sits at pixel (i * spacing_y, j * spacing_x); boundary stencils
//! clamp indices into the grid (edge replication), which preserves constant
//! fields and keeps the parameter count equal to the regressor output.

use crate::error::{Error, Result};
use crate::resampler;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplineOrder {
    Cubic,
    Quadratic,
}

/// Coarse 2-vector displacement field at control points.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    gh: usize,
    gw: usize,
    spacing_y: f64,
    spacing_x: f64,
    disp: Tensor,
}

impl ControlGrid {
    pub fn new(gh: usize, gw: usize, spacing_y: f64, spacing_x: f64, disp: Tensor) -> Result<Self> {
        if gh < 2 || gw < 2 {
            return Err(Error::Config(format!(
                "control grid must be at least 2x2, got {gh}x{gw}"
            )));
        }
        if !(spacing_y > 0.0 && spacing_y.is_finite() && spacing_x > 0.0 && spacing_x.is_finite()) {
            return Err(Error::Config(format!(
                "control grid spacing must be positive and finite, got ({spacing_y}, {spacing_x})"
            )));
        }
        if disp.shape() != [2, gh, gw] {
            return Err(Error::Shape(format!(
                "control grid displacements must be [2, {gh}, {gw}], got {:?}",
                disp.shape()
            )));
        }
        Ok(ControlGrid { gh, gw, spacing_y, spacing_x, disp })
    }

    pub fn zeros(gh: usize, gw: usize, spacing_y: f64, spacing_x: f64) -> Result<Self> {
        ControlGrid::new(gh, gw, spacing_y, spacing_x, Tensor::zeros(vec![2, gh, gw]))
    }

    pub fn gh(&self) -> usize {
        self.gh
    }

    pub fn gw(&self) -> usize {
        self.gw
    }

    pub fn spacing_y(&self) -> f64 {
        self.spacing_y
    }

    pub fn spacing_x(&self) -> f64 {
        self.spacing_x
    }

    pub fn disp(&self) -> &Tensor {
        &self.disp
    }

    pub fn disp_mut(&mut self) -> &mut Tensor {
        &mut self.disp
    }
}

/// Dense per-pixel 2-vector displacement field; all-zero means identity.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    h: usize,
    w: usize,
    d: Tensor,
}

impl DisplacementField {
    pub fn new(h: usize, w: usize, d: Tensor) -> Result<Self> {
        if d.shape() != [2, h, w] {
            return Err(Error::Shape(format!(
                "displacement field must be [2, {h}, {w}], got {:?}",
                d.shape()
            )));
        }
        if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "displacement field contains non-finite value {bad}"
            )));
        }
        Ok(DisplacementField { h, w, d })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        DisplacementField { h, w, d: Tensor::zeros(vec![2, h, w]) }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> &Tensor {
        &self.d
    }

    /// Displacement component `ch` (0 = y, 1 = x) at pixel (y, x).
    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.d.data()[(ch * self.h + y) * self.w + x]
    }
}

/// Uniform cubic B-spline weights for fractional offset u in [0, 1).
///
/// B0 = (1-u)^3/6, B1 = (3u^3-6u^2+4)/6, B3 = u^3/6; B2 is computed as the
/// residual 1 - B0 - B1 - B3, which equals (-3u^3+3u^2+3u+1)/6 algebraically
/// and makes the partition of unity exact in floating point.
pub fn basis_cubic(u: f64) -> Result<[f64; 4]> {
    check_unit(u)?;
    let v = 1.0 - u;
    let b0 = v * v * v / 6.0;
    let b1 = (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0;
    let b3 = u * u * u / 6.0;
    let b2 = 1.0 - b0 - b1 - b3;
    Ok([b0, b1, b2, b3])
}

/// Uniform quadratic B-spline weights for fractional offset u in [0, 1).
///
/// B0 = (1-u)^2/2, B2 = u^2/2; B1 is the residual (exact partition of unity),
/// equal to (-2u^2+2u+1)/2 algebraically.
pub fn basis_quadratic(u: f64) -> Result<[f64; 3]> {
    check_unit(u)?;
    let v = 1.0 - u;
    let b0 = v * v / 2.0;
    let b2 = u * u / 2.0;
    let b1 = 1.0 - b0 - b2;
    Ok([b0, b1, b2])
}

fn check_unit(u: f64) -> Result<()> {
    if !(u >= 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("basis offset must lie in [0, 1), got {u}")));
    }
    Ok(())
}

/// One-dimensional stencil for target coordinate t (in control-grid units):
/// clamped control indices and their weights. `len` is 4 for cubic, 3 for
/// quadratic.
pub(crate) struct Stencil {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
    pub len: usize,
}

pub(crate) fn stencil_1d(t: f64, g: usize, order: SplineOrder) -> Stencil {
    debug_assert!(t >= 0.0 && t.is_finite());
    match order {
        SplineOrder::Cubic => {
            let i = t.floor();
            let u = t - i; // exact for t >= 0, and in [0, 1)
            let wt = basis_cubic(u).expect("cubic offset in range by construction");
            let i = i as isize;
            let mut idx = [0usize; 4];
            for (l, slot) in idx.iter_mut().enumerate() {
                *slot = (i - 1 + l as isize).clamp(0, g as isize - 1) as usize;
            }
            Stencil { idx, wt, len: 4 }
        }
        SplineOrder::Quadratic => {
            // Support straddles the nearest control point: base = floor(t + 0.5),
            // indices {base-1, base, base+1}, u = t - base + 0.5.
            let mut base = (t + 0.5).floor();
            let mut u = t - base + 0.5;
            // (t + 0.5) can round up across an integer; renormalize so u stays
            // in [0, 1).
            if u < 0.0 {
                base -= 1.0;
                u += 1.0;
            } else if u >= 1.0 {
                base += 1.0;
                u -= 1.0;
            }
            let w3 = basis_quadratic(u).expect("quadratic offset in range by construction");
            let base = base as isize;
            let mut idx = [0usize; 4];
            for (l, slot) in idx.iter_mut().enumerate().take(3) {
                *slot = (base - 1 + l as isize).clamp(0, g as isize - 1) as usize;
            }
            Stencil { idx, wt: [w3[0], w3[1], w3[2], 0.0], len: 3 }
        }
    }
}

/// Dense interpolation kernel for one sample: `disp` is [2, gh, gw] flattened,
/// `out` is [2, h, w] flattened. Accumulation uses the difference form
/// phi00 + sum w * (phi - phi00), which reproduces constant grids exactly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dvf_kernel_fwd(
    disp: &[f64],
    gh: usize,
    gw: usize,
    spacing_y: f64,
    spacing_x: f64,
    h: usize,
    w: usize,
    order: SplineOrder,
    out: &mut [f64],
) {
    let rows: Vec<Stencil> = (0..h).map(|py| stencil_1d(py as f64 / spacing_y, gh, order)).collect();
    let cols: Vec<Stencil> = (0..w).map(|px| stencil_1d(px as f64 / spacing_x, gw, order)).collect();
    for ch in 0..2 {
        let plane = &disp[ch * gh * gw..(ch + 1) * gh * gw];
        let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (py, ry) in rows.iter().enumerate() {
            for (px, rx) in cols.iter().enumerate() {
                let phi00 = plane[ry.idx[0] * gw + rx.idx[0]];
                let mut acc = phi00;
                for l in 0..ry.len {
                    let row = ry.idx[l] * gw;
                    let wy = ry.wt[l];
                    for m in 0..rx.len {
                        if l == 0 && m == 0 {
                            continue;
                        }
                        acc += wy * rx.wt[m] * (plane[row + rx.idx[m]] - phi00);
                    }
                }
                oplane[py * w + px] = acc;
            }
        }
    }
}

/// Adjoint of `dvf_kernel_fwd`: scatters `upstream` [2, h, w] into
/// `d_grid` [2, gh, gw], the exact transpose of the forward accumulation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dvf_kernel_bwd(
    upstream: &[f64],
    gh: usize,
    gw: usize,
    spacing_y: f64,
    spacing_x: f64,
    h: usize,
    w: usize,
    order: SplineOrder,
    d_grid: &mut [f64],
) {
    let rows: Vec<Stencil> = (0..h).map(|py| stencil_1d(py as f64 / spacing_y, gh, order)).collect();
    let cols: Vec<Stencil> = (0..w).map(|px| stencil_1d(px as f64 / spacing_x, gw, order)).collect();
    for ch in 0..2 {
        let uplane = &upstream[ch * h * w..(ch + 1) * h * w];
        let gplane = &mut d_grid[ch * gh * gw..(ch + 1) * gh * gw];
        for (py, ry) in rows.iter().enumerate() {
            for (px, rx) in cols.iter().enumerate() {
                let up = uplane[py * w + px];
                if up == 0.0 {
                    continue;
                }
                let i00 = ry.idx[0] * gw + rx.idx[0];
                gplane[i00] += up;
                for l in 0..ry.len {
                    let row = ry.idx[l] * gw;
                    let wy = ry.wt[l];
                    for m in 0..rx.len {
                        if l == 0 && m == 0 {
                            continue;
                        }
                        let t = up * (wy * rx.wt[m]);
                        gplane[row + rx.idx[m]] += t;
                        gplane[i00] -= t;
                    }
                }
            }
        }
    }
}

/// Interpolate a control grid to a dense displacement field over an h x w
/// pixel lattice.
pub fn grid_to_dvf(grid: &ControlGrid, h: usize, w: usize, order: SplineOrder) -> Result<DisplacementField> {
    if h == 0 || w == 0 {
        return Err(Error::Usage(format!("target dims must be positive, got {h}x{w}")));
    }
    let mut out = vec![0.0; 2 * h * w];
    dvf_kernel_fwd(
        grid.disp.data(),
        grid.gh,
        grid.gw,
        grid.spacing_y,
        grid.spacing_x,
        h,
        w,
        order,
        &mut out,
    );
    DisplacementField::new(h, w, Tensor::new(vec![2, h, w], out)?)
}

/// Adjoint of `grid_to_dvf`: accumulate an upstream [2, h, w] gradient into
/// control-grid space [2, gh, gw].
pub fn dvf_gradient_wrt_grid(upstream: &Tensor, grid: &ControlGrid, order: SplineOrder) -> Result<Tensor> {
    let shape = upstream.shape();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::Shape(format!(
            "upstream gradient must be [2, h, w], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut d_grid = vec![0.0; 2 * grid.gh * grid.gw];
    dvf_kernel_bwd(
        upstream.data(),
        grid.gh,
        grid.gw,
        grid.spacing_y,
        grid.spacing_x,
        h,
        w,
        order,
        &mut d_grid,
    );
    Tensor::new(vec![2, grid.gh, grid.gw], d_grid)
}

/// Numerically invert a displacement field by fixed-point iteration:
/// seek g with g(x) = -d(x + g(x)), sampling d bilinearly with edge clamping.
/// Converges for the smooth, moderate fields used here; errors out if the
/// largest per-pixel update still exceeds `tol` pixels after `max_iters`.
pub fn invert_dvf(dvf: &DisplacementField, tol: f64, max_iters: usize) -> Result<DisplacementField> {
    let (h, w) = (dvf.h, dvf.w);
    let dy = &dvf.d.data()[0..h * w];
    let dx = &dvf.d.data()[h * w..2 * h * w];
    let mut gy = vec![0.0; h * w];
    let mut gx = vec![0.0; h * w];
    for _ in 0..max_iters {
        let mut max_delta: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sy = y as f64 + gy[i];
                let sx = x as f64 + gx[i];
                let ny = -resampler::sample_channel(dy, h, w, sy, sx);
                let nx = -resampler::sample_channel(dx, h, w, sy, sx);
                max_delta = max_delta.max((ny - gy[i]).abs()).max((nx - gx[i]).abs());
                gy[i] = ny;
                gx[i] = nx;
            }
        }
        if max_delta < tol {
            let mut d = gy;
            d.extend_from_slice(&gx);
            return DisplacementField::new(h, w, Tensor::new(vec![2, h, w], d)?);
        }
    }
    Err(Error::Domain(format!(
        "displacement field inversion did not converge to {tol} px in {max_iters} iterations"
    )))
}
