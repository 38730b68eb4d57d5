//! Finite-difference verification of every gradient path.
//!
//! Each op gets a randomized check: record the op on a tape, scalarize its
//! output with a fixed random weight vector, backpropagate, then compare the
//! analytic gradient of every input element against central differences of
//! the scalar. The end-to-end check does the same for the full pipeline on a
//! 16x16 pair, probing every trainable parameter. Inputs are drawn to stay
//! clear of the genuinely non-differentiable points (bilinear sampling at
//! integer coordinates, max-pool ties); ELU is C1 so it needs no clearance.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dirnet::{run_forward, Model, NetConfig, Preset};
use crate::error::{Error, Result};
use crate::tape::{BnMode, DownsampleKind, Tape, ValueId};
use crate::tensor::Tensor;
use crate::transformer::SplineOrder;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Per-op relative error tolerance.
pub const OP_TOL: f64 = 1e-5;
/// End-to-end relative error tolerance.
pub const E2E_TOL: f64 = 1e-4;
/// Seeds per check.
pub const SEEDS_PER_CHECK: u64 = 20;

/// Relative error denominators saturate at these floors so that noise-level
/// gradients (for example a conv bias whose effect batch norm cancels
/// exactly) are compared absolutely instead of amplifying rounding error.
const OP_REL_FLOOR: f64 = 1e-6;
const E2E_REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckRecord {
    pub op: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn rel_err(a: f64, fd: f64, floor: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(floor)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Compare analytic gradients of `build`'s scalar output against central
/// differences for every element of every tensor flagged in `check`.
fn run_check(
    op: &str,
    seed: u64,
    tol: f64,
    floor: f64,
    tensors: &[Tensor],
    check: &[bool],
    build: impl Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
) -> Result<CheckRecord> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = tensors
        .iter()
        .zip(check)
        .map(|(t, &c)| tape.leaf(t.clone(), c))
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let mut max_rel: f64 = 0.0;
    for (ti, &checked) in check.iter().enumerate() {
        if !checked {
            continue;
        }
        let numel = tensors[ti].numel();
        let analytic: Vec<f64> = match tape.grad(ids[ti]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        };
        for j in 0..numel {
            let mut probe: Vec<Tensor> = tensors.to_vec();
            probe[ti].data_mut()[j] += FD_STEP;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&probe)?;
            let fd = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[j], fd, floor));
        }
    }
    Ok(CheckRecord { op: op.to_string(), seed, max_rel_err: max_rel, tol, pass: max_rel <= tol })
}

/// Scalarize a tape value with a fixed random weight vector so that every
/// output element influences the check.
fn scalarize(tape: &mut Tape, id: ValueId, rng: &mut ChaCha8Rng) -> Result<ValueId> {
    let n = tape.value(id).numel();
    let w = rand_vec(rng, n, -1.0, 1.0);
    tape.dot_const(id, w)
}

fn conv2d_suite(base_seed: u64, stride: usize) -> Result<Vec<CheckRecord>> {
    let name = if stride == 1 { "conv2d_s1" } else { "conv2d_s2" };
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
        let (h, w) = if stride == 1 { (6, 7) } else { (7, 7) };
        let tensors = vec![
            Tensor::new(vec![1, 2, h, w], rand_vec(&mut rng, 2 * h * w, -1.0, 1.0))?,
            Tensor::new(vec![3, 2, 3, 3], rand_vec(&mut rng, 54, -0.7, 0.7))?,
            Tensor::new(vec![3], rand_vec(&mut rng, 3, -0.5, 0.5))?,
        ];
        let wrng = rng.clone();
        out.push(run_check(name, seed, OP_TOL, OP_REL_FLOOR, &tensors, &[true, true, true], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], stride)?;
            scalarize(t, y, &mut wrng.clone())
        })?);
    }
    Ok(out)
}

fn conv1x1_suite(base_seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1c0de);
        let tensors = vec![
            Tensor::new(vec![1, 3, 5, 6], rand_vec(&mut rng, 90, -1.0, 1.0))?,
            Tensor::new(vec![2, 3, 1, 1], rand_vec(&mut rng, 6, -0.8, 0.8))?,
            Tensor::new(vec![2], rand_vec(&mut rng, 2, -0.5, 0.5))?,
        ];
        let wrng = rng.clone();
        out.push(run_check("conv1x1", seed, OP_TOL, OP_REL_FLOOR, &tensors, &[true, true, true], |t, ids| {
            let y = t.conv1x1(ids[0], ids[1], ids[2])?;
            scalarize(t, y, &mut wrng.clone())
        })?);
    }
    Ok(out)
}

fn downsample_suite(base_seed: u64, kind: DownsampleKind) -> Result<Vec<CheckRecord>> {
    let name = match kind {
        DownsampleKind::AveragePool => "downsample_avg",
        DownsampleKind::MaxPool => "downsample_max",
        DownsampleKind::StridedConv => "downsample_strided",
    };
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2c0de);
        let input = match kind {
            // Max pooling is checked on inputs with pairwise-distinct values
            // (gap 0.01, far above the probe step) so no argmax flips.
            DownsampleKind::MaxPool => {
                let n = 2 * 5 * 7;
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                Tensor::new(vec![1, 2, 5, 7], perm.iter().map(|&p| p as f64 * 0.01).collect())?
            }
            _ => Tensor::new(vec![1, 2, 5, 7], rand_vec(&mut rng, 70, -1.0, 1.0))?,
        };
        let mut tensors = vec![input];
        let mut check = vec![true];
        if kind == DownsampleKind::StridedConv {
            tensors.push(Tensor::new(vec![2, 2, 3, 3], rand_vec(&mut rng, 36, -0.7, 0.7))?);
            tensors.push(Tensor::new(vec![2], rand_vec(&mut rng, 2, -0.5, 0.5))?);
            check.extend([true, true]);
        }
        let wrng = rng.clone();
        out.push(run_check(name, seed, OP_TOL, OP_REL_FLOOR, &tensors, &check, |t, ids| {
            let kernel = (ids.len() == 3).then(|| (ids[1], ids[2]));
            let y = t.downsample2x(ids[0], kind, kernel)?;
            scalarize(t, y, &mut wrng.clone())
        })?);
    }
    Ok(out)
}

fn batch_norm_suite(base_seed: u64, mode: BnMode) -> Result<Vec<CheckRecord>> {
    let name = match mode {
        BnMode::Train => "batch_norm_train",
        BnMode::Infer => "batch_norm_infer",
    };
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c0de);
        let tensors = vec![
            Tensor::new(vec![2, 2, 3, 4], rand_vec(&mut rng, 48, -2.0, 2.0))?,
            Tensor::new(vec![2], rand_vec(&mut rng, 2, 0.5, 1.5))?,
            Tensor::new(vec![2], rand_vec(&mut rng, 2, -0.5, 0.5))?,
        ];
        let rm = rand_vec(&mut rng, 2, -0.3, 0.3);
        let rv = rand_vec(&mut rng, 2, 0.5, 2.0);
        let wrng = rng.clone();
        out.push(run_check(name, seed, OP_TOL, OP_REL_FLOOR, &tensors, &[true, true, true], |t, ids| {
            let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], &rm, &rv, mode, false)?;
            scalarize(t, y, &mut wrng.clone())
        })?);
    }
    Ok(out)
}

fn elu_suite(base_seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c0de);
        let data: Vec<f64> = (0..24)
            .map(|_| {
                let mag = rng.random_range(0.1..2.0);
                if rng.random_range(0.0..1.0) < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect();
        let tensors = vec![Tensor::new(vec![24], data)?];
        let wrng = rng.clone();
        out.push(run_check("elu", seed, OP_TOL, OP_REL_FLOOR, &tensors, &[true], |t, ids| {
            let y = t.elu(ids[0])?;
            scalarize(t, y, &mut wrng.clone())
        })?);
    }
    Ok(out)
}

fn grid_to_dvf_suite(base_seed: u64, order: SplineOrder) -> Result<Vec<CheckRecord>> {
    let name = match order {
        SplineOrder::Cubic => "grid_to_dvf_cubic",
        SplineOrder::Quadratic => "grid_to_dvf_quadratic",
    };
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c0de);
        let tensors = vec![Tensor::new(vec![1, 2, 3, 4], rand_vec(&mut rng, 24, -2.0, 2.0))?];
        let (h, w) = (7, 8);
        let (sy, sx) = (7.0 / 3.0, 2.0);
        let wrng = rng.clone();
        out.push(run_check(name, seed, OP_TOL, OP_REL_FLOOR, &tensors, &[true], |t, ids| {
            let y = t.grid_to_dvf(ids[0], h, w, sy, sx, order)?;
            scalarize(t, y, &mut wrng.clone())
        })?);
    }
    Ok(out)
}

/// Displacements that land every sample strictly inside the image with its
/// fractional part in [0.3, 0.45] or [0.55, 0.7]: far from the bilinear
/// kinks at integer coordinates and from the clamped border.
fn safe_dvf(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut d = vec![0.0; 2 * h * w];
    let frac = |rng: &mut ChaCha8Rng| -> f64 {
        if rng.random_range(0.0..1.0) < 0.5 {
            rng.random_range(0.3..0.45)
        } else {
            rng.random_range(0.55..0.7)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let ty = rng.random_range(0..h - 1) as f64 + frac(rng);
            let tx = rng.random_range(0..w - 1) as f64 + frac(rng);
            d[y * w + x] = ty - y as f64;
            d[h * w + y * w + x] = tx - x as f64;
        }
    }
    d
}

fn warp_suite(base_seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c0de);
        let (h, w) = (6, 6);
        let tensors = vec![
            Tensor::new(vec![1, 1, h, w], rand_vec(&mut rng, h * w, 0.0, 1.0))?,
            Tensor::new(vec![1, 2, h, w], safe_dvf(&mut rng, h, w))?,
        ];
        let wrng = rng.clone();
        out.push(run_check("warp", seed, OP_TOL, OP_REL_FLOOR, &tensors, &[true, true], |t, ids| {
            let y = t.warp(ids[0], ids[1])?;
            scalarize(t, y, &mut wrng.clone())
        })?);
    }
    Ok(out)
}

fn ncc_loss_suite(base_seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for s in 0..SEEDS_PER_CHECK {
        let seed = base_seed + s;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7c0de);
        let tensors = vec![
            Tensor::new(vec![2, 1, 4, 5], rand_vec(&mut rng, 40, 0.0, 1.0))?,
            Tensor::new(vec![2, 1, 4, 5], rand_vec(&mut rng, 40, 0.0, 1.0))?,
        ];
        out.push(run_check("ncc_loss", seed, OP_TOL, OP_REL_FLOOR, &tensors, &[true, true], |t, ids| {
            t.ncc_loss(ids[0], ids[1])
        })?);
    }
    Ok(out)
}

/// True when every sample coordinate keeps a margin from the bilinear kinks:
/// at least `margin` away from every integer (which covers the borders 0 and
/// dim-1), unless it is far outside the image where sampling is constant.
fn coords_clear(dvf: &[f64], h: usize, w: usize, margin: f64) -> bool {
    let clear = |s: f64, max: f64| -> bool {
        if s < -margin || s > max + margin {
            return true;
        }
        (s - s.round()).abs() > margin
    };
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + dvf[y * w + x];
            let sx = x as f64 + dvf[h * w + y * w + x];
            if !clear(sy, (h - 1) as f64) || !clear(sx, (w - 1) as f64) {
                return false;
            }
        }
    }
    true
}

/// Full-pipeline check on a 16x16 pair: every trainable parameter of a
/// jittered small net against central differences of the loss.
fn end_to_end_check(seed: u64) -> Result<CheckRecord> {
    let cfg = NetConfig { kernels_per_layer: 4, ..NetConfig::from_preset(Preset::MnistDefault) };
    let dim = 16;
    for attempt in 0..50u64 {
        let s = seed.wrapping_mul(1009).wrapping_add(attempt);
        let mut model = Model::build(&cfg, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e3779b97f4a7c15);
        // The output layer ships zero-initialized (identity warp), which
        // would park every sample exactly on the integer lattice; jitter it
        // so the checked point is differentiable.
        for name in ["out.weight", "out.bias"] {
            let entry = model.params.get_mut(name).expect("output layer exists");
            for v in entry.value.data_mut() {
                *v = rng.random_range(-0.4..0.4);
            }
        }
        let fixed = Tensor::new(vec![1, 1, dim, dim], rand_vec(&mut rng, dim * dim, 0.0, 1.0))?;
        let moving = Tensor::new(vec![1, 1, dim, dim], rand_vec(&mut rng, dim * dim, 0.0, 1.0))?;
        let mut tape = Tape::new();
        let pass = run_forward(&mut tape, &cfg, &model.params, &fixed, &moving, BnMode::Train, true)?;
        if !coords_clear(tape.value(pass.dvf).data(), dim, dim, 1e-3) {
            continue;
        }
        tape.backward(pass.loss)?;
        let grads: Vec<(String, Vec<f64>)> = pass
            .param_ids
            .iter()
            .map(|(name, id)| {
                let numel = model.params.get(name).expect("planned").value.numel();
                (name.clone(), tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]))
            })
            .collect();
        let eval = |params_name: &str, j: usize, delta: f64| -> Result<f64> {
            let mut probe = model.params.clone();
            probe.get_mut(params_name).expect("planned").value.data_mut()[j] += delta;
            let mut t2 = Tape::new();
            let fp = run_forward(&mut t2, &cfg, &probe, &fixed, &moving, BnMode::Train, false)?;
            Ok(t2.value(fp.loss).item())
        };
        let mut max_rel: f64 = 0.0;
        for (name, g) in &grads {
            for (j, &a) in g.iter().enumerate() {
                let fd = (eval(name, j, FD_STEP)? - eval(name, j, -FD_STEP)?) / (2.0 * FD_STEP);
                max_rel = max_rel.max(rel_err(a, fd, E2E_REL_FLOOR));
            }
        }
        return Ok(CheckRecord {
            op: "end_to_end".into(),
            seed,
            max_rel_err: max_rel,
            tol: E2E_TOL,
            pass: max_rel <= E2E_TOL,
        });
    }
    Err(Error::Domain(
        "no sampling-kink-free configuration found for the end-to-end check".into(),
    ))
}

fn end_to_end_suite(base_seed: u64) -> Result<Vec<CheckRecord>> {
    (0..SEEDS_PER_CHECK).map(|s| end_to_end_check(base_seed + s)).collect()
}

/// Run every op suite plus the end-to-end check.
pub fn run_full_suite(base_seed: u64) -> Result<Vec<CheckRecord>> {
    let mut records = Vec::new();
    records.extend(conv2d_suite(base_seed, 1)?);
    records.extend(conv2d_suite(base_seed, 2)?);
    records.extend(conv1x1_suite(base_seed)?);
    records.extend(downsample_suite(base_seed, DownsampleKind::AveragePool)?);
    records.extend(downsample_suite(base_seed, DownsampleKind::MaxPool)?);
    records.extend(downsample_suite(base_seed, DownsampleKind::StridedConv)?);
    records.extend(batch_norm_suite(base_seed, BnMode::Train)?);
    records.extend(batch_norm_suite(base_seed, BnMode::Infer)?);
    records.extend(elu_suite(base_seed)?);
    records.extend(grid_to_dvf_suite(base_seed, SplineOrder::Cubic)?);
    records.extend(grid_to_dvf_suite(base_seed, SplineOrder::Quadratic)?);
    records.extend(warp_suite(base_seed)?);
    records.extend(ncc_loss_suite(base_seed)?);
    records.extend(end_to_end_suite(base_seed)?);
    Ok(records)
}

pub fn all_pass(records: &[CheckRecord]) -> bool {
    !records.is_empty() && records.iter().all(|r| r.pass)
}

pub fn write_report_csv<W: Write>(mut sink: W, records: &[CheckRecord]) -> Result<()> {
    writeln!(sink, "op,seed,max_rel_err,tol,pass")?;
    for r in records {
        writeln!(sink, "{},{},{:e},{:e},{}", r.op, r.seed, r.max_rel_err, r.tol, r.pass)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_all(records: &[CheckRecord]) {
        assert!(!records.is_empty());
        for r in records {
            assert!(
                r.pass,
                "{} seed {} failed: max rel err {:e} > {:e}",
                r.op, r.seed, r.max_rel_err, r.tol
            );
        }
    }

    #[test]
    fn conv_suites_pass() {
        assert_all(&conv2d_suite(100, 1).unwrap());
        assert_all(&conv2d_suite(100, 2).unwrap());
        assert_all(&conv1x1_suite(100).unwrap());
    }

    #[test]
    fn downsample_suites_pass() {
        assert_all(&downsample_suite(200, DownsampleKind::AveragePool).unwrap());
        assert_all(&downsample_suite(200, DownsampleKind::MaxPool).unwrap());
        assert_all(&downsample_suite(200, DownsampleKind::StridedConv).unwrap());
    }

    #[test]
    fn normalization_and_activation_suites_pass() {
        assert_all(&batch_norm_suite(300, BnMode::Train).unwrap());
        assert_all(&batch_norm_suite(300, BnMode::Infer).unwrap());
        assert_all(&elu_suite(300).unwrap());
    }

    #[test]
    fn geometry_suites_pass() {
        assert_all(&grid_to_dvf_suite(400, SplineOrder::Cubic).unwrap());
        assert_all(&grid_to_dvf_suite(400, SplineOrder::Quadratic).unwrap());
        assert_all(&warp_suite(400).unwrap());
        assert_all(&ncc_loss_suite(400).unwrap());
    }

    #[test]
    fn end_to_end_single_seed_passes() {
        let rec = end_to_end_check(42).unwrap();
        assert!(rec.pass, "max rel err {:e}", rec.max_rel_err);
    }

    #[test]
    fn csv_report_has_expected_shape() {
        let records = vec![CheckRecord {
            op: "warp".into(),
            seed: 3,
            max_rel_err: 2.5e-7,
            tol: 1e-5,
            pass: true,
        }];
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("op,seed,max_rel_err,tol,pass"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("warp,3,2.5e-7,"));
        assert!(row.ends_with(",true"));
        assert!(all_pass(&records));
        assert!(!all_pass(&[]));
    }
}
