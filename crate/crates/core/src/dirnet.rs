//! The registration network: a small fully-convolutional regressor that maps
//! a fixed/moving image pair to a coarse grid of control-point displacements.
//!
//! The trunk is four 3x3 convolutions (zero padding) alternating with 2x
//! downsampling layers, followed by two hidden 1x1 convolutions and a linear
//! 1x1 output with two kernels (dy, dx per grid point). Batch normalization
//! and ELU follow every layer except the output. The output layer starts at
//! zero so an untrained net performs the identity warp.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{ModelParams, ParamEntry};
use crate::resampler::Image2D;
use crate::tape::{BnMode, DownsampleKind, Tape, ValueId};
use crate::tensor::Tensor;
use crate::transformer::{ControlGrid, DisplacementField, SplineOrder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Two downsamplings, average pooling, cubic splines (28x28 inputs).
    MnistDefault,
    /// Four downsamplings, average pooling, cubic splines.
    Baseline4x,
    /// Baseline with max pooling.
    A1MaxPool,
    /// Baseline with 3x3 stride-2 convolutions as downsampling layers.
    A2StridedConv,
    /// Baseline with quadratic instead of cubic splines.
    B1Quadratic,
    /// Baseline with an extra 3x3 convolution before and after the last
    /// downsampling layer.
    C1WideReceptive,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "mnist-default" => Ok(Preset::MnistDefault),
            "baseline-4x" => Ok(Preset::Baseline4x),
            "a1-maxpool" => Ok(Preset::A1MaxPool),
            "a2-strided" => Ok(Preset::A2StridedConv),
            "b1-quadratic" => Ok(Preset::B1Quadratic),
            "c1-wide" => Ok(Preset::C1WideReceptive),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected mnist-default, baseline-4x, a1-maxpool, a2-strided, b1-quadratic, or c1-wide)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::MnistDefault => "mnist-default",
            Preset::Baseline4x => "baseline-4x",
            Preset::A1MaxPool => "a1-maxpool",
            Preset::A2StridedConv => "a2-strided",
            Preset::B1Quadratic => "b1-quadratic",
            Preset::C1WideReceptive => "c1-wide",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub preset: Preset,
    pub kernels_per_layer: usize,
    pub num_downsamplings: usize,
    pub spline_order: SplineOrder,
    pub downsample_kind: DownsampleKind,
    pub extra_c1_convs: bool,
}

impl NetConfig {
    pub fn from_preset(preset: Preset) -> NetConfig {
        let (downs, kind, order, extra) = match preset {
            Preset::MnistDefault => (2, DownsampleKind::AveragePool, SplineOrder::Cubic, false),
            Preset::Baseline4x => (4, DownsampleKind::AveragePool, SplineOrder::Cubic, false),
            Preset::A1MaxPool => (4, DownsampleKind::MaxPool, SplineOrder::Cubic, false),
            Preset::A2StridedConv => (4, DownsampleKind::StridedConv, SplineOrder::Cubic, false),
            Preset::B1Quadratic => (4, DownsampleKind::AveragePool, SplineOrder::Quadratic, false),
            Preset::C1WideReceptive => (4, DownsampleKind::AveragePool, SplineOrder::Cubic, true),
        };
        NetConfig {
            preset,
            kernels_per_layer: 16,
            num_downsamplings: downs,
            spline_order: order,
            downsample_kind: kind,
            extra_c1_convs: extra,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels_per_layer < 1 {
            return Err(Error::Config("kernels_per_layer must be at least 1".into()));
        }
        let expected_downs = match self.preset {
            Preset::MnistDefault => 2,
            _ => 4,
        };
        if self.num_downsamplings != expected_downs {
            return Err(Error::Config(format!(
                "preset {} uses {} downsampling layers, got {}",
                self.preset.name(),
                expected_downs,
                self.num_downsamplings
            )));
        }
        if self.extra_c1_convs && self.preset != Preset::C1WideReceptive {
            return Err(Error::Config(format!(
                "extra receptive-field convolutions only belong to the c1-wide preset, not {}",
                self.preset.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum LayerKind {
    /// 3x3 conv with zero padding, stride 1, BN + ELU.
    Conv3x3 { cin: usize, cout: usize },
    /// Parameter-free 2x pooling.
    DownPool,
    /// 3x3 stride-2 conv, BN + ELU.
    DownStrided { ch: usize },
    /// Hidden 1x1 conv, BN + ELU.
    Pointwise { cin: usize, cout: usize },
    /// Linear 1x1 output with 2 kernels, zero-initialized, no BN or ELU.
    Output { cin: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Ordered layer plan for a config. Parameter names, checkpoint layout, and
/// the forward pass all derive from this.
pub(crate) fn plan(cfg: &NetConfig) -> Vec<LayerSpec> {
    let k = cfg.kernels_per_layer;
    let mut layers = Vec::new();
    let mut conv_no = 0;
    let mut push_conv = |layers: &mut Vec<LayerSpec>, cin: usize| {
        conv_no += 1;
        layers.push(LayerSpec {
            name: format!("conv{conv_no}"),
            kind: LayerKind::Conv3x3 { cin, cout: k },
        });
    };
    let push_down = |layers: &mut Vec<LayerSpec>, i: usize| match cfg.downsample_kind {
        DownsampleKind::StridedConv => layers.push(LayerSpec {
            name: format!("down{i}"),
            kind: LayerKind::DownStrided { ch: k },
        }),
        _ => layers.push(LayerSpec { name: String::new(), kind: LayerKind::DownPool }),
    };
    for i in 1..=4 {
        push_conv(&mut layers, if i == 1 { 2 } else { k });
        if i <= cfg.num_downsamplings {
            if i == cfg.num_downsamplings && cfg.extra_c1_convs {
                push_conv(&mut layers, k);
            }
            push_down(&mut layers, i);
            if i == cfg.num_downsamplings && cfg.extra_c1_convs {
                push_conv(&mut layers, k);
            }
        }
    }
    layers.push(LayerSpec { name: "pw1".into(), kind: LayerKind::Pointwise { cin: k, cout: k } });
    layers.push(LayerSpec { name: "pw2".into(), kind: LayerKind::Pointwise { cin: k, cout: k } });
    layers.push(LayerSpec { name: "out".into(), kind: LayerKind::Output { cin: k } });
    layers
}

/// (name, shape, trainable) for every parameter tensor, in network order.
pub(crate) fn param_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut specs = Vec::new();
    let bn = |specs: &mut Vec<(String, Vec<usize>, bool)>, name: &str, ch: usize| {
        specs.push((format!("{name}.bn_scale"), vec![ch], true));
        specs.push((format!("{name}.bn_shift"), vec![ch], true));
        specs.push((format!("{name}.bn_mean"), vec![ch], false));
        specs.push((format!("{name}.bn_var"), vec![ch], false));
    };
    for layer in plan(cfg) {
        match layer.kind {
            LayerKind::Conv3x3 { cin, cout } => {
                specs.push((format!("{}.weight", layer.name), vec![cout, cin, 3, 3], true));
                specs.push((format!("{}.bias", layer.name), vec![cout], true));
                bn(&mut specs, &layer.name, cout);
            }
            LayerKind::DownPool => {}
            LayerKind::DownStrided { ch } => {
                specs.push((format!("{}.weight", layer.name), vec![ch, ch, 3, 3], true));
                specs.push((format!("{}.bias", layer.name), vec![ch], true));
                bn(&mut specs, &layer.name, ch);
            }
            LayerKind::Pointwise { cin, cout } => {
                specs.push((format!("{}.weight", layer.name), vec![cout, cin, 1, 1], true));
                specs.push((format!("{}.bias", layer.name), vec![cout], true));
                bn(&mut specs, &layer.name, cout);
            }
            LayerKind::Output { cin } => {
                specs.push((format!("{}.weight", layer.name), vec![2, cin, 1, 1], true));
                specs.push(("out.bias".into(), vec![2], true));
            }
        }
    }
    specs
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: NetConfig,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub warped: Image2D,
    pub dvf: DisplacementField,
    pub control: ControlGrid,
    pub loss: f64,
}

/// Handles into a recorded forward pass.
pub struct ForwardPass {
    pub grid: ValueId,
    pub dvf: ValueId,
    pub warped: ValueId,
    pub loss: ValueId,
    /// Trainable parameter leaves, in declaration order.
    pub param_ids: Vec<(String, ValueId)>,
    /// Updated running statistics per normalized layer (Train mode with
    /// tracking only): (layer name, new mean, new var).
    pub stat_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub spacing_y: f64,
    pub spacing_x: f64,
}

impl Model {
    /// Initialize parameters from a seed. Hidden conv weights draw uniform
    /// values scaled by sqrt(2 / fan_in); biases and the whole output layer
    /// start at zero; BN starts as the identity transform (scale 1, shift 0)
    /// with running mean 0 / var 1.
    pub fn build(cfg: &NetConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for (name, shape, trainable) in param_specs(cfg) {
            let numel: usize = shape.iter().product();
            let tensor = if name.ends_with(".bn_scale") || name.ends_with(".bn_var") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".weight") && !name.starts_with("out.") {
                let fan_in: usize = shape[1] * shape[2] * shape[3];
                let bound = (2.0 / fan_in as f64).sqrt();
                let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(shape)
            };
            params.push(ParamEntry::new(&name, tensor, trainable))?;
        }
        Ok(Model { cfg: *cfg, params })
    }

    /// Regress a control grid for one pair without warping.
    pub fn regress(&self, fixed: &Image2D, moving: &Image2D, mode: BnMode) -> Result<ControlGrid> {
        let (fb, mb) = pair_batch(&[(fixed, moving)])?;
        let mut tape = Tape::new();
        let pass = run_forward(&mut tape, &self.cfg, &self.params, &fb, &mb, mode, false)?;
        let grid_vals = tape.value(pass.grid);
        let disp = Tensor::new(
            vec![2, pass.grid_h, pass.grid_w],
            grid_vals.data().to_vec(),
        )?;
        ControlGrid::new(pass.grid_h, pass.grid_w, pass.spacing_y, pass.spacing_x, disp)
    }

    /// One-pass registration of a single pair using running BN statistics.
    pub fn register_pair(&self, fixed: &Image2D, moving: &Image2D) -> Result<RegistrationResult> {
        let (fb, mb) = pair_batch(&[(fixed, moving)])?;
        let mut tape = Tape::new();
        let pass = run_forward(&mut tape, &self.cfg, &self.params, &fb, &mb, BnMode::Infer, false)?;
        let h = fixed.h();
        let w = fixed.w();
        let warped = Image2D::new(h, w, tape.value(pass.warped).data().to_vec())?;
        let dvf = DisplacementField::new(h, w, Tensor::new(vec![2, h, w], tape.value(pass.dvf).data().to_vec())?)?;
        let disp = Tensor::new(vec![2, pass.grid_h, pass.grid_w], tape.value(pass.grid).data().to_vec())?;
        let control = ControlGrid::new(pass.grid_h, pass.grid_w, pass.spacing_y, pass.spacing_x, disp)?;
        Ok(RegistrationResult { warped, dvf, control, loss: tape.value(pass.loss).item() })
    }
}

/// Stack pairs of equally sized images into [n, 1, h, w] fixed and moving
/// batches.
pub fn pair_batch(pairs: &[(&Image2D, &Image2D)]) -> Result<(Tensor, Tensor)> {
    if pairs.is_empty() {
        return Err(Error::Usage("need at least one image pair".into()));
    }
    let h = pairs[0].0.h();
    let w = pairs[0].0.w();
    let mut fixed = Vec::with_capacity(pairs.len() * h * w);
    let mut moving = Vec::with_capacity(pairs.len() * h * w);
    for (f, m) in pairs {
        if f.h() != h || f.w() != w || m.h() != h || m.w() != w {
            return Err(Error::Shape(format!(
                "all images in a batch must be {h}x{w}, got {}x{} / {}x{}",
                f.h(),
                f.w(),
                m.h(),
                m.w()
            )));
        }
        fixed.extend_from_slice(f.pixels());
        moving.extend_from_slice(m.pixels());
    }
    Ok((
        Tensor::new(vec![pairs.len(), 1, h, w], fixed)?,
        Tensor::new(vec![pairs.len(), 1, h, w], moving)?,
    ))
}

/// Record the full pipeline (regressor, spline interpolation, warp, loss) on
/// a tape. `train` selects batch statistics plus running-stat updates; the
/// caller applies `stat_updates` to the parameter set after the step.
pub fn run_forward(
    tape: &mut Tape,
    cfg: &NetConfig,
    params: &ModelParams,
    fixed: &Tensor,
    moving: &Tensor,
    mode: BnMode,
    want_grads: bool,
) -> Result<ForwardPass> {
    cfg.validate()?;
    let shape = fixed.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Shape(format!("fixed batch must be [n, 1, h, w], got {shape:?}")));
    }
    if moving.shape() != shape {
        return Err(Error::Shape(format!(
            "moving batch {:?} must match fixed batch {shape:?}",
            moving.shape()
        )));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let min_dim = 1usize << cfg.num_downsamplings;
    if h < min_dim || w < min_dim {
        return Err(Error::Config(format!(
            "{h}x{w} images are too small for {} downsampling layers (need at least {min_dim}x{min_dim})",
            cfg.num_downsamplings
        )));
    }

    // Channel-concatenate (fixed, moving) into the 2-channel regressor input.
    let mut concat = Vec::with_capacity(n * 2 * h * w);
    for s in 0..n {
        concat.extend_from_slice(&fixed.data()[s * h * w..(s + 1) * h * w]);
        concat.extend_from_slice(&moving.data()[s * h * w..(s + 1) * h * w]);
    }
    let mut cur = tape.leaf(Tensor::new(vec![n, 2, h, w], concat)?, false);

    let mut param_ids = Vec::new();
    let mut leaf = |tape: &mut Tape, name: &str| -> Result<ValueId> {
        let entry = params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("parameter {name:?} missing from model")))?;
        let id = tape.leaf(entry.value.clone(), want_grads && entry.trainable);
        if entry.trainable {
            param_ids.push((name.to_string(), id));
        }
        Ok(id)
    };
    let mut stat_updates = Vec::new();
    let train = mode == BnMode::Train;

    for layer in plan(cfg) {
        match layer.kind {
            LayerKind::Conv3x3 { .. } | LayerKind::DownStrided { .. } | LayerKind::Pointwise { .. } => {
                let wgt = leaf(tape, &format!("{}.weight", layer.name))?;
                let bia = leaf(tape, &format!("{}.bias", layer.name))?;
                cur = match layer.kind {
                    LayerKind::Conv3x3 { .. } => tape.conv2d(cur, wgt, bia, 1)?,
                    LayerKind::DownStrided { .. } => tape.conv2d(cur, wgt, bia, 2)?,
                    _ => tape.conv1x1(cur, wgt, bia)?,
                };
                let scale = leaf(tape, &format!("{}.bn_scale", layer.name))?;
                let shift = leaf(tape, &format!("{}.bn_shift", layer.name))?;
                let mean = params.get(&format!("{}.bn_mean", layer.name)).expect("planned").value.data();
                let var = params.get(&format!("{}.bn_var", layer.name)).expect("planned").value.data();
                let (out, updated) = tape.batch_norm(cur, scale, shift, mean, var, mode, train)?;
                if let Some((m, v)) = updated {
                    stat_updates.push((layer.name.clone(), m, v));
                }
                cur = tape.elu(out)?;
            }
            LayerKind::DownPool => {
                cur = tape.downsample2x(cur, cfg.downsample_kind, None)?;
            }
            LayerKind::Output { .. } => {
                let wgt = leaf(tape, "out.weight")?;
                let bia = leaf(tape, "out.bias")?;
                cur = tape.conv1x1(cur, wgt, bia)?;
            }
        }
    }

    let gshape = tape.value(cur).shape().to_vec();
    let (grid_h, grid_w) = (gshape[2], gshape[3]);
    let spacing_y = h as f64 / grid_h as f64;
    let spacing_x = w as f64 / grid_w as f64;
    let dvf = tape.grid_to_dvf(cur, h, w, spacing_y, spacing_x, cfg.spline_order)?;
    let moving_leaf = tape.leaf(moving.clone(), false);
    let warped = tape.warp(moving_leaf, dvf)?;
    let fixed_leaf = tape.leaf(fixed.clone(), false);
    let loss = tape.ncc_loss(fixed_leaf, warped)?;
    Ok(ForwardPass {
        grid: cur,
        dvf,
        warped,
        loss,
        param_ids,
        stat_updates,
        grid_h,
        grid_w,
        spacing_y,
        spacing_x,
    })
}

/// Apply the running-statistic updates produced by a Train-mode forward.
pub fn apply_stat_updates(params: &mut ModelParams, updates: &[(String, Vec<f64>, Vec<f64>)]) {
    for (name, mean, var) in updates {
        if let Some(e) = params.get_mut(&format!("{name}.bn_mean")) {
            e.value.data_mut().copy_from_slice(mean);
        }
        if let Some(e) = params.get_mut(&format!("{name}.bn_var")) {
            e.value.data_mut().copy_from_slice(var);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ncc;
    use rand::Rng;

    fn small_cfg(preset: Preset, k: usize) -> NetConfig {
        NetConfig { kernels_per_layer: k, ..NetConfig::from_preset(preset) }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image2D {
        Image2D::from_fn(h, w, |_, _| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn presets_resolve_expected_configs() {
        let m = NetConfig::from_preset(Preset::MnistDefault);
        assert_eq!(m.num_downsamplings, 2);
        assert_eq!(m.kernels_per_layer, 16);
        assert_eq!(m.downsample_kind, DownsampleKind::AveragePool);
        assert_eq!(m.spline_order, SplineOrder::Cubic);
        assert!(!m.extra_c1_convs);

        assert_eq!(NetConfig::from_preset(Preset::Baseline4x).num_downsamplings, 4);
        assert_eq!(NetConfig::from_preset(Preset::A1MaxPool).downsample_kind, DownsampleKind::MaxPool);
        assert_eq!(
            NetConfig::from_preset(Preset::A2StridedConv).downsample_kind,
            DownsampleKind::StridedConv
        );
        assert_eq!(
            NetConfig::from_preset(Preset::B1Quadratic).spline_order,
            SplineOrder::Quadratic
        );
        assert!(NetConfig::from_preset(Preset::C1WideReceptive).extra_c1_convs);
        for p in [
            Preset::MnistDefault,
            Preset::Baseline4x,
            Preset::A1MaxPool,
            Preset::A2StridedConv,
            Preset::B1Quadratic,
            Preset::C1WideReceptive,
        ] {
            NetConfig::from_preset(p).validate().unwrap();
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(matches!(Preset::parse("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = NetConfig::from_preset(Preset::MnistDefault);
        cfg.kernels_per_layer = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = NetConfig::from_preset(Preset::MnistDefault);
        cfg.num_downsamplings = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = NetConfig::from_preset(Preset::Baseline4x);
        cfg.extra_c1_convs = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn plan_orders_layers_per_preset() {
        let names: Vec<String> = plan(&small_cfg(Preset::MnistDefault, 4))
            .iter()
            .map(|l| if l.name.is_empty() { "<pool>".into() } else { l.name.clone() })
            .collect();
        assert_eq!(
            names,
            ["conv1", "<pool>", "conv2", "<pool>", "conv3", "conv4", "pw1", "pw2", "out"]
        );
        let names: Vec<String> = plan(&small_cfg(Preset::C1WideReceptive, 4))
            .iter()
            .map(|l| if l.name.is_empty() { "<pool>".into() } else { l.name.clone() })
            .collect();
        assert_eq!(
            names,
            ["conv1", "<pool>", "conv2", "<pool>", "conv3", "<pool>", "conv4", "conv5", "<pool>", "conv6", "pw1", "pw2", "out"]
        );
        let names: Vec<String> = plan(&small_cfg(Preset::A2StridedConv, 4))
            .iter()
            .map(|l| l.name.clone())
            .collect();
        assert_eq!(
            names,
            ["conv1", "down1", "conv2", "down2", "conv3", "down3", "conv4", "down4", "pw1", "pw2", "out"]
        );
    }

    #[test]
    fn build_is_seed_deterministic_and_zero_out() {
        let cfg = small_cfg(Preset::MnistDefault, 4);
        let a = Model::build(&cfg, 7).unwrap();
        let b = Model::build(&cfg, 7).unwrap();
        for (ea, eb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ea.name, eb.name);
            let bits_a: Vec<u64> = ea.value.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = eb.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{}", ea.name);
        }
        let c = Model::build(&cfg, 8).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(x, y)| x.value.data() != y.value.data());
        assert!(differs, "different seeds must give different weights");
        assert!(a.params.get("out.weight").unwrap().value.iter().all(|v| *v == 0.0));
        assert!(a.params.get("out.bias").unwrap().value.iter().all(|v| *v == 0.0));
        assert!(!a.params.get("conv1.bn_mean").unwrap().trainable);
        assert!(!a.params.get("conv1.bn_var").unwrap().trainable);
    }

    #[test]
    fn grid_geometry_matches_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::build(&small_cfg(Preset::MnistDefault, 4), 3).unwrap();
        let f = random_image(&mut rng, 28, 28);
        let m = random_image(&mut rng, 28, 28);
        let grid = model.regress(&f, &m, BnMode::Infer).unwrap();
        assert_eq!((grid.gh(), grid.gw()), (7, 7));
        assert_eq!((grid.spacing_y(), grid.spacing_x()), (4.0, 4.0));

        let model = Model::build(&small_cfg(Preset::Baseline4x, 2), 3).unwrap();
        let f = random_image(&mut rng, 256, 256);
        let m = random_image(&mut rng, 256, 256);
        let grid = model.regress(&f, &m, BnMode::Infer).unwrap();
        assert_eq!((grid.gh(), grid.gw()), (16, 16));
        assert_eq!((grid.spacing_y(), grid.spacing_x()), (16.0, 16.0));
    }

    #[test]
    fn fully_convolutional_across_input_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::build(&small_cfg(Preset::MnistDefault, 2), 5).unwrap();
        for dim in [16usize, 28, 32, 64] {
            let f = random_image(&mut rng, dim, dim);
            let m = random_image(&mut rng, dim, dim);
            let grid = model.regress(&f, &m, BnMode::Infer).unwrap();
            let want = dim.div_ceil(4);
            assert_eq!((grid.gh(), grid.gw()), (want, want), "input {dim}");
        }
    }

    #[test]
    fn zero_initialized_net_is_identity_registration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::build(&small_cfg(Preset::MnistDefault, 4), 11).unwrap();
        let f = random_image(&mut rng, 28, 28);
        let m = random_image(&mut rng, 28, 28);
        let res = model.register_pair(&f, &m).unwrap();
        assert!(res.control.disp().iter().all(|v| *v == 0.0));
        assert!(res.dvf.d().iter().all(|v| *v == 0.0));
        let same_bits = res
            .warped
            .pixels()
            .iter()
            .zip(m.pixels().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits, "identity warp must reproduce the moving image exactly");
        let direct = ncc(&f, &m).unwrap();
        assert!((res.loss + direct.value).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&res.loss));
    }

    #[test]
    fn variant_presets_run_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for preset in [
            Preset::Baseline4x,
            Preset::A1MaxPool,
            Preset::A2StridedConv,
            Preset::B1Quadratic,
            Preset::C1WideReceptive,
        ] {
            let model = Model::build(&small_cfg(preset, 2), 9).unwrap();
            let f = random_image(&mut rng, 32, 32);
            let m = random_image(&mut rng, 32, 32);
            let res = model.register_pair(&f, &m).unwrap();
            assert_eq!((res.warped.h(), res.warped.w()), (32, 32));
            assert_eq!((res.control.gh(), res.control.gw()), (2, 2), "{}", preset.name());
            assert!(res.loss.is_finite());
        }
    }

    #[test]
    fn strided_preset_owns_downsample_parameters() {
        let model = Model::build(&small_cfg(Preset::A2StridedConv, 2), 1).unwrap();
        for i in 1..=4 {
            assert!(model.params.get(&format!("down{i}.weight")).is_some());
            assert!(model.params.get(&format!("down{i}.bn_scale")).is_some());
        }
        let pooled = Model::build(&small_cfg(Preset::Baseline4x, 2), 1).unwrap();
        assert!(pooled.params.get("down1.weight").is_none());
        assert!(pooled.params.len() < model.params.len());
    }

    #[test]
    fn mismatched_and_tiny_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::build(&small_cfg(Preset::MnistDefault, 2), 2).unwrap();
        let f = random_image(&mut rng, 28, 28);
        let m = random_image(&mut rng, 27, 28);
        assert!(matches!(model.register_pair(&f, &m), Err(Error::Shape(_))));
        let tiny_f = random_image(&mut rng, 2, 2);
        let tiny_m = random_image(&mut rng, 2, 2);
        assert!(matches!(model.register_pair(&tiny_f, &tiny_m), Err(Error::Config(_))));
    }

    #[test]
    fn inference_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::build(&small_cfg(Preset::MnistDefault, 4), 13).unwrap();
        let f = random_image(&mut rng, 28, 28);
        let m = random_image(&mut rng, 28, 28);
        let a = model.register_pair(&f, &m).unwrap();
        let b = model.register_pair(&f, &m).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        let bits = |img: &Image2D| img.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.warped), bits(&b.warped));
    }

    #[test]
    fn train_mode_regress_differs_from_infer_on_fresh_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::build(&small_cfg(Preset::MnistDefault, 4), 17).unwrap();
        let f = random_image(&mut rng, 28, 28);
        let m = random_image(&mut rng, 28, 28);
        // Both modes run; with zero output weights both grids are zero, so
        // only shapes are asserted here.
        let g1 = model.regress(&f, &m, BnMode::Train).unwrap();
        let g2 = model.regress(&f, &m, BnMode::Infer).unwrap();
        assert_eq!((g1.gh(), g1.gw()), (g2.gh(), g2.gw()));
    }
}
