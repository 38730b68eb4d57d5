//! Training loops and evaluation harness.
//!
//! Mini-batch unsupervised training: draw random fixed/moving pairs from a
//! pool, run the full pipeline, backpropagate the similarity loss, take one
//! Adam step. Validation runs on pre-drawn pairs in inference mode so running
//! statistics never move during monitoring. Also here: the per-pair
//! iterative baseline (direct optimization of one control grid, no network)
//! and the batch evaluation that produces per-pair and aggregate metrics.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::MetricsRow;
use crate::dirnet::{apply_stat_updates, pair_batch, run_forward, Model, NetConfig, RegistrationResult};
use crate::error::{Error, Result};
use crate::metrics::{dice, ncc, surface_distances, warp_mask, LabelMask};
use crate::optim::{AdamHyper, ModelParams, ParamEntry};
use crate::resampler::{warp, Image2D};
use crate::tape::{BnMode, Tape};
use crate::tensor::Tensor;
use crate::transformer::{grid_to_dvf, ControlGrid, SplineOrder};

/// Pairs drawn for each monitoring pass.
const MONITOR_PAIRS: usize = 64;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub hyper: AdamHyper,
    pub seed: u64,
    pub validation_every: usize,
    pub net: NetConfig,
}

impl TrainConfig {
    pub fn new(net: NetConfig) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            iterations: 5000,
            hyper: AdamHyper::default(),
            seed: 0,
            validation_every: 100,
            net,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.hyper.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.hyper.lr)));
        }
        if self.validation_every < 1 {
            return Err(Error::Config("validation_every must be at least 1".into()));
        }
        self.net.validate()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LearningCurve {
    /// (iteration, train loss, validation loss), iterations strictly
    /// increasing; losses are inference-mode means over fixed pair sets.
    pub rows: Vec<(u64, f64, f64)>,
}

/// Uniform draws of ordered (fixed, moving) index pairs with fixed != moving.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pool_len: usize,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(pool_len: usize, seed: u64) -> Result<PairSampler> {
        if pool_len < 2 {
            return Err(Error::Usage(format!(
                "pair sampling needs at least 2 images, got {pool_len}"
            )));
        }
        Ok(PairSampler { pool_len, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn draw(&mut self) -> (usize, usize) {
        let fixed = self.rng.random_range(0..self.pool_len);
        let mut moving = self.rng.random_range(0..self.pool_len - 1);
        if moving >= fixed {
            moving += 1;
        }
        (fixed, moving)
    }
}

/// Deterministic seeded shuffle; the validation split takes round(n/6).
pub fn split_train_val(images: &[Image2D], seed: u64) -> Result<(Vec<Image2D>, Vec<Image2D>)> {
    let n = images.len();
    if n < 6 {
        return Err(Error::Usage(format!("need at least 6 images to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let val_len = (n + 3) / 6;
    let val = idx[..val_len].iter().map(|&i| images[i].clone()).collect();
    let train = idx[val_len..].iter().map(|&i| images[i].clone()).collect();
    Ok((train, val))
}

fn mean_infer_loss(model: &Model, pool: &[Image2D], pairs: &[(usize, usize)], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for block in pairs.chunks(chunk) {
        let refs: Vec<(&Image2D, &Image2D)> = block.iter().map(|&(f, m)| (&pool[f], &pool[m])).collect();
        let (fb, mb) = pair_batch(&refs)?;
        let mut tape = Tape::new();
        let pass = run_forward(&mut tape, &model.cfg, &model.params, &fb, &mb, BnMode::Infer, false)?;
        total += tape.value(pass.loss).item() * block.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Unsupervised training. The learning curve gets a row at iteration 0, at
/// every `validation_every`-th step, and at the final step; train rows use a
/// fixed probe set from the training pool, validation rows a fixed set from
/// the validation pool, both evaluated in inference mode.
pub fn train(
    train_pool: &[Image2D],
    val_pool: &[Image2D],
    cfg: &TrainConfig,
) -> Result<(Model, LearningCurve)> {
    cfg.validate()?;
    if train_pool.len() < 2 {
        return Err(Error::Usage(format!(
            "training pool needs at least 2 images, got {}",
            train_pool.len()
        )));
    }
    if val_pool.len() < 2 {
        return Err(Error::Usage(format!(
            "validation pool needs at least 2 images, got {}",
            val_pool.len()
        )));
    }
    let mut model = Model::build(&cfg.net, cfg.seed)?;
    let mut batch_sampler = PairSampler::new(train_pool.len(), cfg.seed ^ 0xb47c4)?;
    let mut probe_sampler = PairSampler::new(train_pool.len(), cfg.seed ^ 0x9d0be)?;
    let mut val_sampler = PairSampler::new(val_pool.len(), cfg.seed ^ 0x7a11d)?;
    let probe_pairs: Vec<(usize, usize)> = (0..MONITOR_PAIRS).map(|_| probe_sampler.draw()).collect();
    let val_pairs: Vec<(usize, usize)> = (0..MONITOR_PAIRS).map(|_| val_sampler.draw()).collect();

    let mut curve = LearningCurve::default();
    let monitor = |model: &Model, iter: u64, curve: &mut LearningCurve| -> Result<()> {
        let train_loss = mean_infer_loss(model, train_pool, &probe_pairs, cfg.batch_size)?;
        let val_loss = mean_infer_loss(model, val_pool, &val_pairs, cfg.batch_size)?;
        curve.rows.push((iter, train_loss, val_loss));
        Ok(())
    };
    monitor(&model, 0, &mut curve)?;

    for it in 1..=cfg.iterations {
        let batch: Vec<(usize, usize)> = (0..cfg.batch_size).map(|_| batch_sampler.draw()).collect();
        let refs: Vec<(&Image2D, &Image2D)> =
            batch.iter().map(|&(f, m)| (&train_pool[f], &train_pool[m])).collect();
        let (fb, mb) = pair_batch(&refs)?;
        let mut tape = Tape::new();
        let pass = run_forward(&mut tape, &cfg.net, &model.params, &fb, &mb, BnMode::Train, true)?;
        let loss = tape.value(pass.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at iteration {it} (batch pairs {batch:?})"
            )));
        }
        tape.backward(pass.loss)?;
        let grads: Vec<(String, Vec<f64>)> = pass
            .param_ids
            .iter()
            .filter_map(|(name, id)| tape.grad(*id).map(|g| (name.clone(), g.to_vec())))
            .collect();
        model
            .params
            .adam_step(&cfg.hyper, &grads)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("at iteration {it}: {m}")),
                other => other,
            })?;
        apply_stat_updates(&mut model.params, &pass.stat_updates);
        if it % cfg.validation_every == 0 || it == cfg.iterations {
            monitor(&model, it as u64, &mut curve)?;
        }
    }
    Ok((model, curve))
}

/// Conventional per-pair registration: optimize one control grid directly
/// against the similarity loss, no network. Returns the best-loss iterate.
/// With `multires`, the first half of the budget runs on 2x-downsampled
/// images (half spacing, displacements scaled up afterwards).
pub fn iterative_baseline(
    fixed: &Image2D,
    moving: &Image2D,
    spacing: f64,
    order: SplineOrder,
    iters: usize,
    lr: f64,
    multires: bool,
) -> Result<RegistrationResult> {
    if !(spacing > 0.0) {
        return Err(Error::Usage(format!("spacing must be positive, got {spacing}")));
    }
    if iters < 1 {
        return Err(Error::Usage("iteration count must be at least 1".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
    }
    if fixed.h() != moving.h() || fixed.w() != moving.w() {
        return Err(Error::Shape(format!(
            "fixed {}x{} and moving {}x{} must match",
            fixed.h(),
            fixed.w(),
            moving.h(),
            moving.w()
        )));
    }
    let h = fixed.h();
    let w = fixed.w();
    let gh = ((h as f64 / spacing).ceil() as usize).max(2);
    let gw = ((w as f64 / spacing).ceil() as usize).max(2);

    let mut params = ModelParams::new();
    params.push(ParamEntry::new("control", Tensor::zeros(vec![1, 2, gh, gw]), true))?;
    let hyper = AdamHyper { lr, ..AdamHyper::default() };

    let coarse_iters = if multires { iters / 2 } else { 0 };
    let half = |img: &Image2D| -> Result<Image2D> {
        let hh = h.div_ceil(2);
        let hw = w.div_ceil(2);
        Image2D::from_fn(hh, hw, |y, x| {
            let y1 = (2 * y + 1).min(h - 1);
            let x1 = (2 * x + 1).min(w - 1);
            (img.at(2 * y, 2 * x) + img.at(2 * y, x1) + img.at(y1, 2 * x) + img.at(y1, x1)) / 4.0
        })
    };
    let run_step = |params: &mut ModelParams,
                    f: &Tensor,
                    m: &Tensor,
                    th: usize,
                    tw: usize,
                    sy: f64,
                    sx: f64,
                    it: usize|
     -> Result<f64> {
        let mut tape = Tape::new();
        let grid = tape.leaf(params.get("control").expect("created above").value.clone(), true);
        let dvf = tape.grid_to_dvf(grid, th, tw, sy, sx, order)?;
        let mleaf = tape.leaf(m.clone(), false);
        let warped = tape.warp(mleaf, dvf)?;
        let fleaf = tape.leaf(f.clone(), false);
        let loss = tape.ncc_loss(fleaf, warped)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("baseline loss at iteration {it}")));
        }
        tape.backward(loss)?;
        let g = tape.grad(grid).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; 2 * gh * gw]);
        params.adam_step(&hyper, &[("control".to_string(), g)])?;
        Ok(value)
    };

    if coarse_iters > 0 {
        let fh = half(fixed)?;
        let mh = half(moving)?;
        let ft = Tensor::new(vec![1, 1, fh.h(), fh.w()], fh.pixels().to_vec())?;
        let mt = Tensor::new(vec![1, 1, mh.h(), mh.w()], mh.pixels().to_vec())?;
        for it in 0..coarse_iters {
            run_step(&mut params, &ft, &mt, fh.h(), fh.w(), spacing / 2.0, spacing / 2.0, it)?;
        }
        // Displacements were expressed in half-resolution pixels; the same
        // control grid at full resolution moves twice as far.
        for v in params.get_mut("control").expect("created above").value.data_mut() {
            *v *= 2.0;
        }
    }

    let ft = Tensor::new(vec![1, 1, h, w], fixed.pixels().to_vec())?;
    let mt = Tensor::new(vec![1, 1, h, w], moving.pixels().to_vec())?;
    let eval_grid = |disp: &Tensor| -> Result<(f64, ControlGrid)> {
        let grid = ControlGrid::new(gh, gw, spacing, spacing, Tensor::new(vec![2, gh, gw], disp.data().to_vec())?)?;
        let dvf = grid_to_dvf(&grid, h, w, order)?;
        let warped = warp(moving, &dvf)?;
        let outcome = ncc(fixed, &warped)?;
        Ok((-outcome.value, grid))
    };
    let (mut best_loss, mut best_grid) = eval_grid(&params.get("control").expect("created above").value)?;
    for it in coarse_iters..iters {
        run_step(&mut params, &ft, &mt, h, w, spacing, spacing, it)?;
        let (loss, grid) = eval_grid(&params.get("control").expect("created above").value)?;
        if loss < best_loss {
            best_loss = loss;
            best_grid = grid;
        }
    }
    let dvf = grid_to_dvf(&best_grid, h, w, order)?;
    let warped = warp(moving, &dvf)?;
    Ok(RegistrationResult { warped, dvf, control: best_grid, loss: best_loss })
}

/// How `evaluate_registration` registers each pair.
pub enum Registrar<'a> {
    Net(&'a Model),
    Baseline { spacing: f64, order: SplineOrder, iters: usize, lr: f64 },
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub fixed: Image2D,
    pub moving: Image2D,
    pub fixed_mask: Option<LabelMask>,
    pub moving_mask: Option<LabelMask>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub ncc_before: Option<(f64, f64)>,
    pub ncc_after: Option<(f64, f64)>,
    pub dice: Option<(f64, f64)>,
    pub mad: Option<(f64, f64)>,
    pub sd95: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutcome {
    pub rows: Vec<MetricsRow>,
    /// Warped moving images, one per row (same order).
    pub warped: Vec<Image2D>,
    /// (pair id, what went wrong) for pairs excluded from the aggregates.
    pub errors: Vec<(String, String)>,
    pub summary: EvalSummary,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Register every pair and score it: normalized cross correlation before and
/// after always; overlap and surface distances when both masks are present.
/// A pair that errors is recorded and excluded; the run continues.
pub fn evaluate_registration(
    registrar: &Registrar,
    pairs: &[EvalPair],
    pixel_size: f64,
) -> Result<EvalOutcome> {
    if !(pixel_size > 0.0) {
        return Err(Error::Usage(format!("pixel size must be positive, got {pixel_size}")));
    }
    let mut out = EvalOutcome::default();
    let mut agg: [Vec<f64>; 5] = Default::default();
    for pair in pairs {
        let scored = (|| -> Result<(MetricsRow, Image2D)> {
            let result = match registrar {
                Registrar::Net(model) => model.register_pair(&pair.fixed, &pair.moving)?,
                Registrar::Baseline { spacing, order, iters, lr } => iterative_baseline(
                    &pair.fixed,
                    &pair.moving,
                    *spacing,
                    *order,
                    *iters,
                    *lr,
                    false,
                )?,
            };
            let before = ncc(&pair.fixed, &pair.moving)?.value;
            let after = ncc(&pair.fixed, &result.warped)?.value;
            let (mut d, mut mad, mut sd95) = (None, None, None);
            if let (Some(fm), Some(mm)) = (&pair.fixed_mask, &pair.moving_mask) {
                let warped_mask = warp_mask(mm, &result.dvf)?;
                d = Some(dice(fm, &warped_mask)?);
                let (m, s) = surface_distances(fm, &warped_mask, pixel_size)?;
                mad = Some(m);
                sd95 = Some(s);
            }
            let row = MetricsRow {
                pair_id: pair.id.clone(),
                ncc_before: before,
                ncc_after: after,
                dice: d,
                mad,
                sd95,
            };
            Ok((row, result.warped))
        })();
        match scored {
            Ok((row, warped)) => {
                agg[0].push(row.ncc_before);
                agg[1].push(row.ncc_after);
                if let Some(v) = row.dice {
                    agg[2].push(v);
                }
                if let Some(v) = row.mad {
                    agg[3].push(v);
                }
                if let Some(v) = row.sd95 {
                    agg[4].push(v);
                }
                out.rows.push(row);
                out.warped.push(warped);
            }
            Err(e) => out.errors.push((pair.id.clone(), e.to_string())),
        }
    }
    out.summary = EvalSummary {
        ncc_before: mean_std(&agg[0]),
        ncc_after: mean_std(&agg[1]),
        dice: mean_std(&agg[2]),
        mad: mean_std(&agg[3]),
        sd95: mean_std(&agg[4]),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{ring_image, ring_mask};
    use crate::dirnet::Preset;
    use std::collections::HashSet;

    fn tiny_pool(n: usize, dim: usize, seed: u64) -> Vec<Image2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cy = rng.random_range(dim as f64 * 0.35..dim as f64 * 0.65);
                let cx = rng.random_range(dim as f64 * 0.35..dim as f64 * 0.65);
                ring_image(dim, dim, cy, cx, dim as f64 * 0.12, dim as f64 * 0.3, 1.0, 0.0).unwrap()
            })
            .collect()
    }

    fn tiny_cfg(seed: u64, iterations: usize) -> TrainConfig {
        let net = NetConfig {
            kernels_per_layer: 2,
            ..NetConfig::from_preset(Preset::MnistDefault)
        };
        TrainConfig {
            batch_size: 4,
            iterations,
            seed,
            validation_every: 2,
            ..TrainConfig::new(net)
        }
    }

    #[test]
    fn split_examples() {
        let images: Vec<Image2D> = (0..60u8)
            .map(|i| Image2D::new(1, 1, vec![i as f64]).unwrap())
            .collect();
        let (train, val) = split_train_val(&images, 4).unwrap();
        assert_eq!((train.len(), val.len()), (50, 10));
        let mut all: Vec<i64> = train
            .iter()
            .chain(val.iter())
            .map(|i| i.pixels()[0] as i64)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<i64>>());

        let six: Vec<Image2D> = images[..6].to_vec();
        let (t6, v6) = split_train_val(&six, 1).unwrap();
        assert_eq!((t6.len(), v6.len()), (5, 1));
        assert!(matches!(split_train_val(&images[..5], 1), Err(Error::Usage(_))));

        let (t2, v2) = split_train_val(&images, 4).unwrap();
        let key = |v: &Vec<Image2D>| v.iter().map(|i| i.pixels()[0] as i64).collect::<Vec<_>>();
        assert_eq!(key(&train), key(&t2));
        assert_eq!(key(&val), key(&v2));
    }

    #[test]
    fn sampler_avoids_self_pairs_and_covers_all() {
        let mut s = PairSampler::new(10, 77).unwrap();
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let (f, m) = s.draw();
            assert_ne!(f, m);
            assert!(f < 10 && m < 10);
            seen.insert((f, m));
        }
        assert_eq!(seen.len(), 90, "all ordered pairs of a 10-image pool appear");
        assert!(matches!(PairSampler::new(1, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn single_iteration_takes_one_adam_step() {
        let pool = tiny_pool(6, 16, 1);
        let cfg = tiny_cfg(5, 1);
        let (model, curve) = train(&pool[..4], &pool[4..], &cfg).unwrap();
        assert_eq!(model.params.step_count(), 1);
        let init = Model::build(&cfg.net, cfg.seed).unwrap();
        let moved = model
            .params
            .iter()
            .zip(init.params.iter())
            .any(|(a, b)| a.value.data() != b.value.data());
        assert!(moved, "one step must change some parameter");
        assert_eq!(curve.rows.len(), 2);
        assert_eq!(curve.rows[0].0, 0);
        assert_eq!(curve.rows[1].0, 1);
        assert!(curve.rows.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn training_is_bit_deterministic_and_validation_neutral() {
        let pool = tiny_pool(8, 16, 2);
        let run = |validation_every: usize| {
            let mut cfg = tiny_cfg(9, 4);
            cfg.validation_every = validation_every;
            let (model, _) = train(&pool[..6], &pool[6..], &cfg).unwrap();
            model
                .params
                .iter()
                .flat_map(|e| e.value.iter().map(|v| v.to_bits()))
                .collect::<Vec<u64>>()
        };
        let a = run(2);
        let b = run(2);
        assert_eq!(a, b, "same seed, same trajectory");
        let c = run(1);
        assert_eq!(a, c, "extra validation passes must not alter training");
    }

    #[test]
    fn non_finite_losses_are_reported_with_context() {
        let mut pool = tiny_pool(4, 16, 3);
        let bad = vec![f64::MAX; 256];
        pool[0] = Image2D::new(16, 16, bad).unwrap();
        // Overflowing intensities drive activations to infinity fast; the
        // error must say where.
        let cfg = TrainConfig { hyper: AdamHyper { lr: 1e10, ..AdamHyper::default() }, ..tiny_cfg(1, 50) };
        match train(&pool[..2], &pool[2..], &cfg) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("iteration"), "{msg}"),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn baseline_identity_pair_stays_at_optimum() {
        let img = ring_image(24, 24, 12.0, 12.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let res = iterative_baseline(&img, &img, 4.0, SplineOrder::Cubic, 5, 0.1, false).unwrap();
        assert!((res.loss + 1.0).abs() < 1e-9, "loss {}", res.loss);
        assert!(res.control.disp().iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn baseline_recovers_two_pixel_shift() {
        let fixed = ring_image(24, 24, 11.0, 11.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let moving = ring_image(24, 24, 13.0, 13.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let before = ncc(&fixed, &moving).unwrap().value;
        let res = iterative_baseline(&fixed, &moving, 4.0, SplineOrder::Cubic, 300, 0.1, false).unwrap();
        let after = ncc(&fixed, &res.warped).unwrap().value;
        assert!(after >= 0.99, "before {before}, after {after}");
        assert!(after > before);
    }

    #[test]
    fn baseline_multires_also_recovers_shift() {
        let fixed = ring_image(24, 24, 11.0, 11.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let moving = ring_image(24, 24, 13.0, 13.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let res = iterative_baseline(&fixed, &moving, 4.0, SplineOrder::Cubic, 300, 0.1, true).unwrap();
        let after = ncc(&fixed, &res.warped).unwrap().value;
        assert!(after >= 0.99, "after {after}");
    }

    #[test]
    fn baseline_rejects_bad_arguments() {
        let img = ring_image(16, 16, 8.0, 8.0, 2.0, 6.0, 1.0, 0.0).unwrap();
        assert!(matches!(
            iterative_baseline(&img, &img, 0.0, SplineOrder::Cubic, 10, 0.1, false),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            iterative_baseline(&img, &img, 4.0, SplineOrder::Cubic, 0, 0.1, false),
            Err(Error::Usage(_))
        ));
        let other = ring_image(18, 16, 8.0, 8.0, 2.0, 6.0, 1.0, 0.0).unwrap();
        assert!(matches!(
            iterative_baseline(&img, &other, 4.0, SplineOrder::Cubic, 10, 0.1, false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identity_model_on_identical_pairs_scores_perfectly() {
        let cfg = NetConfig { kernels_per_layer: 2, ..NetConfig::from_preset(Preset::MnistDefault) };
        let model = Model::build(&cfg, 3).unwrap();
        let img = ring_image(24, 24, 12.0, 12.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let mask = ring_mask(24, 24, 12.0, 12.0, 3.0, 8.0);
        let pairs = vec![EvalPair {
            id: "self".into(),
            fixed: img.clone(),
            moving: img.clone(),
            fixed_mask: Some(mask.clone()),
            moving_mask: Some(mask),
        }];
        let out = evaluate_registration(&Registrar::Net(&model), &pairs, 1.0).unwrap();
        assert!(out.errors.is_empty());
        let row = &out.rows[0];
        assert!((row.ncc_before - 1.0).abs() < 1e-12);
        assert!((row.ncc_after - 1.0).abs() < 1e-12);
        assert_eq!(row.dice, Some(1.0));
        assert_eq!(row.mad, Some(0.0));
        assert_eq!(row.sd95, Some(0.0));
        let (m, s) = out.summary.dice.unwrap();
        assert_eq!((m, s), (1.0, 0.0));
    }

    #[test]
    fn failing_pairs_are_excluded_but_run_continues() {
        let cfg = NetConfig { kernels_per_layer: 2, ..NetConfig::from_preset(Preset::MnistDefault) };
        let model = Model::build(&cfg, 3).unwrap();
        let img = ring_image(24, 24, 12.0, 12.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let empty = LabelMask::from_fn(24, 24, |_, _| false);
        let mask = ring_mask(24, 24, 12.0, 12.0, 3.0, 8.0);
        let pairs = vec![
            EvalPair {
                id: "bad".into(),
                fixed: img.clone(),
                moving: img.clone(),
                fixed_mask: Some(empty.clone()),
                moving_mask: Some(empty),
            },
            EvalPair {
                id: "good".into(),
                fixed: img.clone(),
                moving: img.clone(),
                fixed_mask: Some(mask.clone()),
                moving_mask: Some(mask),
            },
        ];
        let out = evaluate_registration(&Registrar::Net(&model), &pairs, 1.0).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].pair_id, "good");
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].0, "bad");
        assert_eq!(out.summary.dice.unwrap().0, 1.0);
    }

    #[test]
    fn baseline_registrar_beats_before_on_synthetic_shift() {
        let fixed = ring_image(24, 24, 11.0, 11.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let moving = ring_image(24, 24, 13.0, 12.0, 3.0, 8.0, 1.0, 0.0).unwrap();
        let fm = ring_mask(24, 24, 11.0, 11.0, 3.0, 8.0);
        let mm = ring_mask(24, 24, 13.0, 12.0, 3.0, 8.0);
        let before_dice = dice(&fm, &mm).unwrap();
        let pairs = vec![EvalPair {
            id: "shift".into(),
            fixed,
            moving,
            fixed_mask: Some(fm),
            moving_mask: Some(mm),
        }];
        let reg = Registrar::Baseline { spacing: 4.0, order: SplineOrder::Cubic, iters: 200, lr: 0.1 };
        let out = evaluate_registration(&reg, &pairs, 1.0).unwrap();
        assert!(out.errors.is_empty());
        let row = &out.rows[0];
        assert!(row.ncc_after > row.ncc_before);
        assert!(row.dice.unwrap() > before_dice, "dice {} vs before {}", row.dice.unwrap(), before_dice);
    }
}
