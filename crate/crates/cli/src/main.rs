//! Command-line driver: train a registration network, register single
//! pairs (trained net or iterative baseline), batch-evaluate a manifest,
//! and run the finite-difference gradient checks.
//!
//! Exit codes: 0 success; 1 caller mistakes (bad flags, bad configuration,
//! mismatched shapes); 2 bad input data (missing files, format violations);
//! 3 numeric failure (non-finite values, failed gradient checks). Every run
//! logs its fully resolved configuration to standard error so results can
//! be reproduced from the log alone.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use dirnet_core::data_io::{
    load_checkpoint, load_mnist, load_pgm, save_checkpoint, save_dvf, save_pgm, write_curve_csv,
    write_metrics_csv,
};
use dirnet_core::dirnet::{NetConfig, Preset};
use dirnet_core::gradcheck::{all_pass, run_full_suite, write_report_csv};
use dirnet_core::metrics::{ncc, LabelMask};
use dirnet_core::resampler::Image2D;
use dirnet_core::training::{
    evaluate_registration, iterative_baseline, split_train_val, train, EvalPair, Registrar,
    TrainConfig,
};
use dirnet_core::transformer::SplineOrder;
use dirnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dirnet", version, about = "Unsupervised deformable image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a registration network on a pool of digit images
    Train(TrainArgs),
    /// Register one image pair with a trained checkpoint
    Register(RegisterArgs),
    /// Register one image pair by direct control-grid optimization
    Baseline(BaselineArgs),
    /// Register and score every pair in a manifest
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences
    #[command(name = "gradcheck")]
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train-images-idx3-ubyte and train-labels-idx1-ubyte
    #[arg(long)]
    dataset: PathBuf,
    /// Train on this digit class only (0-9); default is the whole pool
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=9))]
    digit: Option<u8>,
    /// Network preset: mnist-default, baseline-4x, a1-maxpool, a2-strided,
    /// b1-quadratic, or c1-wide (short forms mnist, baseline, a1, a2, b1, c1)
    #[arg(long, default_value = "mnist-default")]
    preset: String,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iterations between validation points on the learning curve
    #[arg(long, default_value_t = 100)]
    val_every: usize,
    #[arg(long)]
    out_ckpt: PathBuf,
    #[arg(long)]
    out_curve: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out_warped: PathBuf,
    #[arg(long)]
    out_dvf: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Control point spacing in pixels
    #[arg(long, default_value_t = 4.0)]
    spacing: f64,
    /// Spline order: cubic or quadratic
    #[arg(long, default_value = "cubic")]
    order: String,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Run a coarse half-resolution stage first
    #[arg(long)]
    multires: bool,
    #[arg(long)]
    out_warped: PathBuf,
    #[arg(long)]
    out_dvf: PathBuf,
}

#[derive(Args)]
#[command(group = ArgGroup::new("registrar").required(true).args(["ckpt", "baseline"]))]
struct EvaluateArgs {
    /// Register with this trained checkpoint
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Register with the iterative baseline optimizer instead
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 4.0, requires = "baseline", conflicts_with = "ckpt")]
    spacing: f64,
    /// Spline order: cubic or quadratic
    #[arg(long, default_value = "cubic", requires = "baseline", conflicts_with = "ckpt")]
    order: String,
    #[arg(long, default_value_t = 200, requires = "baseline", conflicts_with = "ckpt")]
    iters: usize,
    #[arg(long, default_value_t = 0.1, requires = "baseline", conflicts_with = "ckpt")]
    lr: f64,
    /// CSV manifest, one pair per line: fixed,moving[,fixed_mask[,moving_mask]];
    /// paths are resolved relative to the manifest file
    #[arg(long)]
    manifest: PathBuf,
    /// Physical size of one pixel, for the surface distances
    #[arg(long, default_value_t = 1.0)]
    pixel_size: f64,
    #[arg(long)]
    out_csv: PathBuf,
    /// Also write the mean of all warped images as a PGM
    #[arg(long)]
    emit_average: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Where to write the per-check CSV report
    #[arg(long)]
    report: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset> {
    let canonical = match s {
        "mnist" => "mnist-default",
        "baseline" => "baseline-4x",
        "a1" => "a1-maxpool",
        "a2" => "a2-strided",
        "b1" => "b1-quadratic",
        "c1" => "c1-wide",
        other => other,
    };
    Preset::parse(canonical)
}

fn parse_order(s: &str) -> Result<SplineOrder> {
    match s {
        "cubic" => Ok(SplineOrder::Cubic),
        "quadratic" => Ok(SplineOrder::Quadratic),
        other => Err(Error::Usage(format!(
            "unknown spline order {other:?} (expected cubic or quadratic)"
        ))),
    }
}

fn require_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Data(format!("input not found: {}", path.display())));
    }
    Ok(())
}

fn require_output_dir(path: &Path) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    if !parent.as_os_str().is_empty() && !parent.is_dir() {
        return Err(Error::Data(format!(
            "output directory not found: {}",
            parent.display()
        )));
    }
    Ok(())
}

fn load_mask(path: &Path) -> Result<LabelMask> {
    Ok(LabelMask::from_image(&load_pgm(path)?))
}

fn run_train(a: &TrainArgs) -> Result<i32> {
    let preset = parse_preset(&a.preset)?;
    let images_path = a.dataset.join("train-images-idx3-ubyte");
    let labels_path = a.dataset.join("train-labels-idx1-ubyte");
    require_input(&images_path)?;
    require_input(&labels_path)?;
    require_output_dir(&a.out_ckpt)?;
    require_output_dir(&a.out_curve)?;
    let net = NetConfig::from_preset(preset);
    eprintln!(
        "config: train dataset={} digit={} preset={} kernels={} downsamplings={} iters={} batch={} seed={} val_every={} out_ckpt={} out_curve={}",
        a.dataset.display(),
        a.digit.map_or("all".to_string(), |d| d.to_string()),
        preset.name(),
        net.kernels_per_layer,
        net.num_downsamplings,
        a.iters,
        a.batch,
        a.seed,
        a.val_every,
        a.out_ckpt.display(),
        a.out_curve.display(),
    );
    let dataset = load_mnist(&images_path, &labels_path)?;
    let pool: Vec<Image2D> = match a.digit {
        Some(d) => dataset
            .images
            .into_iter()
            .zip(dataset.labels)
            .filter(|&(_, l)| l == d)
            .map(|(im, _)| im)
            .collect(),
        None => dataset.images,
    };
    eprintln!("loaded {} images", pool.len());
    let (train_pool, val_pool) = split_train_val(&pool, a.seed)?;
    let cfg = TrainConfig {
        batch_size: a.batch,
        iterations: a.iters,
        seed: a.seed,
        validation_every: a.val_every,
        ..TrainConfig::new(net)
    };
    let (model, curve) = train(&train_pool, &val_pool, &cfg)?;
    save_checkpoint(&a.out_ckpt, &model)?;
    write_curve_csv(BufWriter::new(File::create(&a.out_curve)?), &curve.rows)?;
    let last = curve.rows.last().expect("curve has at least the initial row");
    println!(
        "trained {} iterations on {}/{} train/val images; final train loss {:.6}, val loss {:.6}",
        a.iters,
        train_pool.len(),
        val_pool.len(),
        last.1,
        last.2
    );
    Ok(0)
}

fn write_pair_outputs(
    fixed: &Image2D,
    moving: &Image2D,
    result: &dirnet_core::dirnet::RegistrationResult,
    out_warped: &Path,
    out_dvf: &Path,
) -> Result<()> {
    save_pgm(out_warped, &result.warped)?;
    save_dvf(out_dvf, &result.dvf)?;
    let before = ncc(fixed, moving)?;
    let after = ncc(fixed, &result.warped)?;
    if before.degenerate || after.degenerate {
        eprintln!("warning: a constant image made the similarity degenerate");
    }
    println!("similarity before {:.6}, after {:.6}", before.value, after.value);
    Ok(())
}

fn run_register(a: &RegisterArgs) -> Result<i32> {
    require_input(&a.ckpt)?;
    require_input(&a.fixed)?;
    require_input(&a.moving)?;
    require_output_dir(&a.out_warped)?;
    require_output_dir(&a.out_dvf)?;
    eprintln!(
        "config: register ckpt={} fixed={} moving={} out_warped={} out_dvf={}",
        a.ckpt.display(),
        a.fixed.display(),
        a.moving.display(),
        a.out_warped.display(),
        a.out_dvf.display(),
    );
    let model = load_checkpoint(&a.ckpt)?;
    eprintln!(
        "checkpoint: preset={} kernels={}",
        model.cfg.preset.name(),
        model.cfg.kernels_per_layer
    );
    let fixed = load_pgm(&a.fixed)?;
    let moving = load_pgm(&a.moving)?;
    let result = model.register_pair(&fixed, &moving)?;
    write_pair_outputs(&fixed, &moving, &result, &a.out_warped, &a.out_dvf)?;
    Ok(0)
}

fn run_baseline(a: &BaselineArgs) -> Result<i32> {
    let order = parse_order(&a.order)?;
    require_input(&a.fixed)?;
    require_input(&a.moving)?;
    require_output_dir(&a.out_warped)?;
    require_output_dir(&a.out_dvf)?;
    eprintln!(
        "config: baseline fixed={} moving={} spacing={} order={} iters={} lr={} multires={} out_warped={} out_dvf={}",
        a.fixed.display(),
        a.moving.display(),
        a.spacing,
        a.order,
        a.iters,
        a.lr,
        a.multires,
        a.out_warped.display(),
        a.out_dvf.display(),
    );
    let fixed = load_pgm(&a.fixed)?;
    let moving = load_pgm(&a.moving)?;
    let result = iterative_baseline(&fixed, &moving, a.spacing, order, a.iters, a.lr, a.multires)?;
    write_pair_outputs(&fixed, &moving, &result, &a.out_warped, &a.out_dvf)?;
    Ok(0)
}

fn parse_manifest(path: &Path) -> Result<Vec<EvalPair>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if idx == 0 && line == "fixed,moving,fixed_mask,moving_mask" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 2 to 4 comma-separated paths, got {}",
                idx + 1,
                fields.len()
            )));
        }
        let fixed_path = dir.join(fields[0]);
        let moving_path = dir.join(fields[1]);
        require_input(&fixed_path)?;
        require_input(&moving_path)?;
        let opt_mask = |i: usize| -> Result<Option<LabelMask>> {
            match fields.get(i).filter(|s| !s.is_empty()) {
                Some(s) => {
                    let p = dir.join(s);
                    require_input(&p)?;
                    Ok(Some(load_mask(&p)?))
                }
                None => Ok(None),
            }
        };
        let stem = |p: &Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into())
        };
        pairs.push(EvalPair {
            id: format!("{:03}_{}_to_{}", pairs.len(), stem(&moving_path), stem(&fixed_path)),
            fixed: load_pgm(&fixed_path)?,
            moving: load_pgm(&moving_path)?,
            fixed_mask: opt_mask(2)?,
            moving_mask: opt_mask(3)?,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no pairs", path.display())));
    }
    Ok(pairs)
}

fn print_stat(label: &str, stat: Option<(f64, f64)>) {
    match stat {
        Some((mean, std)) => println!("{label}: mean {mean:.4} std {std:.4}"),
        None => println!("{label}: no pairs"),
    }
}

fn run_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let order = parse_order(&a.order)?;
    if !(a.pixel_size > 0.0) {
        return Err(Error::Usage(format!("pixel size must be positive, got {}", a.pixel_size)));
    }
    require_input(&a.manifest)?;
    require_output_dir(&a.out_csv)?;
    if let Some(avg) = &a.emit_average {
        require_output_dir(avg)?;
    }
    let registrar_log = match &a.ckpt {
        Some(p) => format!("ckpt={}", p.display()),
        None => format!(
            "baseline spacing={} order={} iters={} lr={}",
            a.spacing, a.order, a.iters, a.lr
        ),
    };
    eprintln!(
        "config: evaluate {} manifest={} pixel_size={} out_csv={} emit_average={}",
        registrar_log,
        a.manifest.display(),
        a.pixel_size,
        a.out_csv.display(),
        a.emit_average.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
    );
    let pairs = parse_manifest(&a.manifest)?;
    eprintln!("loaded {} pairs", pairs.len());
    let model;
    let registrar = match &a.ckpt {
        Some(p) => {
            require_input(p)?;
            model = load_checkpoint(p)?;
            Registrar::Net(&model)
        }
        None => Registrar::Baseline { spacing: a.spacing, order, iters: a.iters, lr: a.lr },
    };
    let out = evaluate_registration(&registrar, &pairs, a.pixel_size)?;
    for (id, what) in &out.errors {
        eprintln!("warning: pair {id} skipped: {what}");
    }
    write_metrics_csv(BufWriter::new(File::create(&a.out_csv)?), &out.rows)?;
    println!("scored {} pairs ({} skipped)", out.rows.len(), out.errors.len());
    print_stat("ncc before", out.summary.ncc_before);
    print_stat("ncc after", out.summary.ncc_after);
    print_stat("dice", out.summary.dice);
    print_stat("mad", out.summary.mad);
    print_stat("sd95", out.summary.sd95);
    if let Some(avg_path) = &a.emit_average {
        let first = out
            .warped
            .first()
            .ok_or_else(|| Error::Data("no successfully registered pairs to average".into()))?;
        let (h, w) = (first.h(), first.w());
        if out.warped.iter().any(|im| im.h() != h || im.w() != w) {
            return Err(Error::Data("warped images differ in size; cannot average".into()));
        }
        let n = out.warped.len() as f64;
        let mean = Image2D::from_fn(h, w, |y, x| {
            out.warped.iter().map(|im| im.at(y, x)).sum::<f64>() / n
        })?;
        save_pgm(avg_path, &mean)?;
        eprintln!("wrote mean of {} warped images", out.warped.len());
    }
    Ok(0)
}

fn run_gradcheck(a: &GradCheckArgs) -> Result<i32> {
    require_output_dir(&a.report)?;
    eprintln!("config: gradcheck seed={} report={}", a.seed, a.report.display());
    let records = run_full_suite(a.seed)?;
    write_report_csv(BufWriter::new(File::create(&a.report)?), &records)?;
    let failed = records.iter().filter(|r| !r.pass).count();
    if all_pass(&records) {
        println!("all {} gradient checks passed", records.len());
        Ok(0)
    } else {
        println!("{failed} of {} gradient checks failed; see {}", records.len(), a.report.display());
        Ok(3)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape(_) | Error::Usage(_) | Error::Domain(_) | Error::Config(_) => 1,
        Error::Format(_) | Error::Data(_) | Error::Io(_) => 2,
        Error::NonFinite(_) => 3,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Register(a) => run_register(a),
        Command::Baseline(a) => run_baseline(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::GradCheck(a) => run_gradcheck(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
