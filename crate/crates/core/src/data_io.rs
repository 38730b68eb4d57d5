//! File formats and dataset plumbing.
//!
//! Readers and writers for:
//! - IDX image/label files (big-endian headers, byte pixels mapped to [0,1]),
//! - binary PGM (P5) images, maxval 255,
//! - displacement fields: magic `DVF0`, little-endian u32 height and width,
//!   then the row (y) displacement channel followed by the column (x)
//!   channel, row-major 64-bit little-endian floats,
//! - model checkpoints: magic `DIRN`, little-endian u32 version 1, a config
//!   block (preset, kernels per layer, downsampling count, spline order,
//!   downsample kind, extra-conv flag), then a u32 tensor count and per
//!   tensor a u16 name length, the name bytes, a u8 rank, u32 dims, and the
//!   64-bit little-endian payload,
//! - CSV outputs for learning curves and evaluation metrics.
//!
//! Also provides synthetic registration pairs (random control grids warped
//! through the pipeline's own spline transformer, so ground truth lies in
//! the model family) and procedural ring images standing in for anatomy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dirnet::{param_specs, Model, NetConfig, Preset};
use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::optim::{ModelParams, ParamEntry};
use crate::resampler::{warp, Image2D};
use crate::tape::DownsampleKind;
use crate::tensor::Tensor;
use crate::transformer::{grid_to_dvf, ControlGrid, DisplacementField, SplineOrder};

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
const DVF_MAGIC: &[u8; 4] = b"DVF0";
const CKPT_MAGIC: &[u8; 4] = b"DIRN";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DatasetMnist {
    pub images: Vec<Image2D>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub fixed: Image2D,
    pub moving: Image2D,
    pub truth_dvf: DisplacementField,
    pub truth_grid: ControlGrid,
}

fn fill(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_be_bytes(b))
}

fn read_u32_le(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16_le(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    fill(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    fill(r, &mut b, what)?;
    Ok(b[0])
}

fn read_f64_vec(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    fill(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn write_f64_vec(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parse an IDX image file (magic 2051): count x rows x cols unsigned bytes,
/// each pixel mapped to [0, 1] by dividing by 255.
pub fn load_idx_images(path: &Path) -> Result<Vec<Image2D>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic: expected {IDX_IMAGES_MAGIC}, found {magic}"
        )));
    }
    let count = read_u32_be(&mut r, "image count")? as usize;
    let rows = read_u32_be(&mut r, "image rows")? as usize;
    let cols = read_u32_be(&mut r, "image cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("image dims must be positive, found {rows}x{cols}")));
    }
    let mut bytes = vec![0u8; count * rows * cols];
    fill(&mut r, &mut bytes, "image payload")?;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let plane = &bytes[i * rows * cols..(i + 1) * rows * cols];
        images.push(Image2D::new(rows, cols, plane.iter().map(|&b| b as f64 / 255.0).collect())?);
    }
    Ok(images)
}

/// Parse an IDX label file (magic 2049): count unsigned bytes, each 0 to 9.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic: expected {IDX_LABELS_MAGIC}, found {magic}"
        )));
    }
    let count = read_u32_be(&mut r, "label count")? as usize;
    let mut bytes = vec![0u8; count];
    fill(&mut r, &mut bytes, "label payload")?;
    if let Some(bad) = bytes.iter().find(|&&b| b > 9) {
        return Err(Error::Data(format!("digit label out of range: {bad}")));
    }
    Ok(bytes)
}

/// Load a paired image/label IDX set from two paths.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<DatasetMnist> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(DatasetMnist { images, labels })
}

/// Write a binary PGM (P5, maxval 255). Intensities are clamped to [0, 1]
/// and rounded to bytes.
pub fn save_pgm(path: &Path, image: &Image2D) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", image.w(), image.h())?;
    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PGM (P5). Tolerates comments and arbitrary whitespace in
/// the header; requires maxval 255. Bytes map back to [0, 1].
pub fn load_pgm(path: &Path) -> Result<Image2D> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 2 || bytes[0..2] != *b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2;
    let mut next_int = |what: &str| -> Result<usize> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("missing {what} in image header")));
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad {what} in image header")))
    };
    let w = next_int("width")?;
    let h = next_int("height")?;
    let maxval = next_int("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval} (expected 255)")));
    }
    pos += 1;
    if bytes.len() < pos + h * w {
        return Err(Error::Format(format!(
            "truncated pixel data: need {} bytes, have {}",
            h * w,
            bytes.len().saturating_sub(pos)
        )));
    }
    let pixels: Vec<f64> = bytes[pos..pos + h * w].iter().map(|&b| b as f64 / 255.0).collect();
    Image2D::new(h, w, pixels)
}

pub fn save_dvf(path: &Path, dvf: &DisplacementField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DVF_MAGIC)?;
    w.write_all(&(dvf.h() as u32).to_le_bytes())?;
    w.write_all(&(dvf.w() as u32).to_le_bytes())?;
    write_f64_vec(&mut w, dvf.d().data())?;
    Ok(())
}

pub fn load_dvf(path: &Path) -> Result<DisplacementField> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    fill(&mut r, &mut magic, "field magic")?;
    if &magic != DVF_MAGIC {
        return Err(Error::Format(format!(
            "displacement file magic: expected {DVF_MAGIC:?}, found {magic:?}"
        )));
    }
    let h = read_u32_le(&mut r, "field height")? as usize;
    let w = read_u32_le(&mut r, "field width")? as usize;
    let data = read_f64_vec(&mut r, 2 * h * w, "field payload")?;
    DisplacementField::new(h, w, Tensor::new(vec![2, h, w], data)?)
}

fn preset_code(p: Preset) -> u8 {
    match p {
        Preset::MnistDefault => 0,
        Preset::Baseline4x => 1,
        Preset::A1MaxPool => 2,
        Preset::A2StridedConv => 3,
        Preset::B1Quadratic => 4,
        Preset::C1WideReceptive => 5,
    }
}

fn preset_from_code(c: u8) -> Result<Preset> {
    Ok(match c {
        0 => Preset::MnistDefault,
        1 => Preset::Baseline4x,
        2 => Preset::A1MaxPool,
        3 => Preset::A2StridedConv,
        4 => Preset::B1Quadratic,
        5 => Preset::C1WideReceptive,
        other => return Err(Error::Format(format!("unknown preset code {other}"))),
    })
}

fn order_code(o: SplineOrder) -> u8 {
    match o {
        SplineOrder::Cubic => 0,
        SplineOrder::Quadratic => 1,
    }
}

fn kind_code(k: DownsampleKind) -> u8 {
    match k {
        DownsampleKind::AveragePool => 0,
        DownsampleKind::MaxPool => 1,
        DownsampleKind::StridedConv => 2,
    }
}

/// Save every named parameter tensor (trainable weights plus running batch
/// statistics). Optimizer moments are not persisted; a reloaded model starts
/// training with fresh Adam state.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let cfg = &model.cfg;
    w.write_all(&[preset_code(cfg.preset)])?;
    w.write_all(&(cfg.kernels_per_layer as u32).to_le_bytes())?;
    w.write_all(&(cfg.num_downsamplings as u32).to_le_bytes())?;
    w.write_all(&[order_code(cfg.spline_order), kind_code(cfg.downsample_kind), u8::from(cfg.extra_c1_convs)])?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for entry in model.params.iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[entry.value.shape().len() as u8])?;
        for &d in entry.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        write_f64_vec(&mut w, entry.value.data())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    fill(&mut r, &mut magic, "checkpoint magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "checkpoint magic: expected {CKPT_MAGIC:?}, found {magic:?}"
        )));
    }
    let version = read_u32_le(&mut r, "checkpoint version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version: expected {CKPT_VERSION}, found {version}"
        )));
    }
    let preset = preset_from_code(read_u8(&mut r, "preset")?)?;
    let kernels = read_u32_le(&mut r, "kernel count")? as usize;
    let downs = read_u32_le(&mut r, "downsampling count")? as usize;
    let order = match read_u8(&mut r, "spline order")? {
        0 => SplineOrder::Cubic,
        1 => SplineOrder::Quadratic,
        other => return Err(Error::Format(format!("unknown spline order code {other}"))),
    };
    let kind = match read_u8(&mut r, "downsample kind")? {
        0 => DownsampleKind::AveragePool,
        1 => DownsampleKind::MaxPool,
        2 => DownsampleKind::StridedConv,
        other => return Err(Error::Format(format!("unknown downsample kind code {other}"))),
    };
    let extra = match read_u8(&mut r, "extra conv flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad extra conv flag {other}"))),
    };
    let cfg = NetConfig {
        preset,
        kernels_per_layer: kernels,
        num_downsamplings: downs,
        spline_order: order,
        downsample_kind: kind,
        extra_c1_convs: extra,
    };
    cfg.validate()?;
    let count = read_u32_le(&mut r, "tensor count")? as usize;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16_le(&mut r, "tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        fill(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u8(&mut r, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32_le(&mut r, "tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f64_vec(&mut r, numel, &format!("tensor {name:?} payload"))?;
        loaded.push((name, Tensor::new(shape, data)?));
    }
    // Validate against the architecture: exact name set, matching shapes,
    // trainability rederived from the layer plan.
    let specs = param_specs(&cfg);
    if loaded.len() != specs.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, architecture defines {}",
            loaded.len(),
            specs.len()
        )));
    }
    let mut params = ModelParams::new();
    for (name, shape, trainable) in specs {
        let (_, tensor) = loaded
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {name:?} has shape {:?}, architecture expects {shape:?}",
                tensor.shape()
            )));
        }
        params.push(ParamEntry::new(&name, tensor.clone(), trainable))?;
    }
    Ok(Model { cfg, params })
}

/// Deform `base` by a random control grid: grid displacements drawn uniform
/// in [-max_disp, max_disp], interpolated with cubic splines at the given
/// spacing, then backward-warped. The result is a registration problem whose
/// ground truth lies exactly in the model family.
pub fn make_synthetic_pair(
    base: &Image2D,
    max_disp: f64,
    spacing: f64,
    seed: u64,
) -> Result<SyntheticPair> {
    if max_disp < 0.0 {
        return Err(Error::Usage(format!("max_disp must be non-negative, got {max_disp}")));
    }
    if !(spacing > 0.0) {
        return Err(Error::Usage(format!("spacing must be positive, got {spacing}")));
    }
    let h = base.h();
    let w = base.w();
    let gh = ((h as f64 / spacing).ceil() as usize).max(2);
    let gw = ((w as f64 / spacing).ceil() as usize).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disp: Vec<f64> = (0..2 * gh * gw)
        .map(|_| {
            if max_disp == 0.0 {
                0.0
            } else {
                rng.random_range(-max_disp..max_disp)
            }
        })
        .collect();
    let truth_grid = ControlGrid::new(gh, gw, spacing, spacing, Tensor::new(vec![2, gh, gw], disp)?)?;
    let truth_dvf = grid_to_dvf(&truth_grid, h, w, SplineOrder::Cubic)?;
    let moving = warp(base, &truth_dvf)?;
    Ok(SyntheticPair { fixed: base.clone(), moving, truth_dvf, truth_grid })
}

/// Soft-edged annulus image: intensity `fg` between the radii, `bg` outside,
/// with a ~1.5 pixel smooth transition so intensity gradients exist.
pub fn ring_image(h: usize, w: usize, cy: f64, cx: f64, r_inner: f64, r_outer: f64, fg: f64, bg: f64) -> Result<Image2D> {
    let soft = 1.5;
    let edge = |d: f64| -> f64 {
        // 0 below -soft/2, 1 above +soft/2, smooth in between.
        let t = ((d / soft) + 0.5).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };
    Image2D::from_fn(h, w, |y, x| {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        let inside = edge(d - r_inner) * edge(r_outer - d);
        bg + (fg - bg) * inside
    })
}

/// Hard annulus mask over the same geometry as `ring_image`.
pub fn ring_mask(h: usize, w: usize, cy: f64, cx: f64, r_inner: f64, r_outer: f64) -> LabelMask {
    LabelMask::from_fn(h, w, |y, x| {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        d >= r_inner && d <= r_outer
    })
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub pair_id: String,
    pub ncc_before: f64,
    pub ncc_after: f64,
    pub dice: Option<f64>,
    pub mad: Option<f64>,
    pub sd95: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(mut sink: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(sink, "pair_id,ncc_before,ncc_after,dice,mad,sd95")?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{},{},{}",
            r.pair_id,
            r.ncc_before,
            r.ncc_after,
            opt(r.dice),
            opt(r.mad),
            opt(r.sd95)
        )?;
    }
    Ok(())
}

pub fn write_curve_csv<W: Write>(mut sink: W, rows: &[(u64, f64, f64)]) -> Result<()> {
    writeln!(sink, "iter,train_loss,val_loss")?;
    for (iter, train, val) in rows {
        writeln!(sink, "{iter},{train},{val}")?;
    }
    Ok(())
}
