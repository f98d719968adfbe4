//! `astr` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or failed check, 2 I/O failure.
//! Diagnostics go to stderr; data goes to files or stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use astr::asma::{convex_to_linear, linear_to_convex, roundtrip_error, PolarGeometry};
use astr::io::{read_manifest, write_atomic};
use astr::losses::{coarse_ground_truth, combined_loss, loss_gradient, total_loss_with};
use astr::metrics::{dataset_metrics, frame_metrics_with, MaeSource, MetricReport};
use astr::model::{clip_sample, AstrWeights};
use astr::selfcheck::run_selfcheck;
use astr::sparse_context::{bench_fusion, CoarseMask, FusionBenchRow};
use astr::synthetic::gen_synthetic;
use astr::tensor::{avg_pool2d, Tensor};
use astr::weights::NamedTensors;
use astr::{astr_forward, Config, Image, ScanMode};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "astr", version, about = "Ultrasound video segmentation toolkit", arg_required_else_help = true)]
struct Cli {
    /// TOML config file; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed, overriding both the config file and ASTR_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-frame work. 1 keeps results bitwise
    /// reproducible.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a frame to the other scan mode.
    AsmaConvert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Scan mode of the input.
        #[arg(long, default_value = "convex")]
        from: ScanMode,
        /// Rectangle resolution relative to the fan canvas.
        #[arg(long, default_value_t = 1)]
        oversample: usize,
    },
    /// Convert a frame there and back and report the interior error.
    AsmaRoundtrip {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "convex")]
        from: ScanMode,
        #[arg(long, default_value_t = 1)]
        oversample: usize,
    },
    /// Write a synthetic lesion video with masks and a manifest.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        speckle: Option<f64>,
    },
    /// Segment the target frame of a clip.
    Forward {
        /// Video frames in temporal order.
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        /// Index of the target frame; defaults to the last.
        #[arg(long)]
        target: Option<usize>,
        /// Probability mask PNG.
        #[arg(long)]
        output: PathBuf,
        /// JSON-lines record; printed to stdout when omitted.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Weight file; seeded random weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write the weights used.
        #[arg(long)]
        save_weights: Option<PathBuf>,
        #[arg(long, default_value = "convex")]
        mode: ScanMode,
    },
    /// Time dense against sparse fusion and print a CSV row.
    BenchFusion {
        #[arg(long = "h")]
        h: usize,
        #[arg(long = "w")]
        w: usize,
        #[arg(long = "c")]
        c: usize,
        #[arg(long = "t")]
        t: usize,
        #[arg(long = "m")]
        m: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
    /// Score prediction/ground-truth PNG pairs listed in a manifest.
    EvalMetrics {
        /// One `pred_path,gt_path` per line; relative paths resolve against
        /// the manifest's directory.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Measure MAE on binarised predictions.
        #[arg(long)]
        binarized_mae: bool,
    },
    /// Evaluate the losses and check their gradient on seeded inputs.
    LossCheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        pixels: usize,
    },
    /// Run the invariant suite.
    Selfcheck,
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Io(String),
}

impl From<astr::Error> for CliError {
    fn from(e: astr::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult {
    let cfg = load_config(&cli)?;
    let explicit_geometry = cli.config.is_some();
    match cli.command {
        Command::AsmaConvert {
            input,
            output,
            from,
            oversample,
        } => {
            let img = Image::read_png(&input, from)?;
            let geom = geometry_for(&img, explicit_geometry.then_some(&cfg.geometry), oversample)?;
            let out = match from {
                ScanMode::Convex => convex_to_linear(&img, &geom)?,
                ScanMode::Linear => linear_to_convex(&img, &geom)?,
            };
            out.write_png(&output)?;
            eprintln!("wrote {} ({}×{}, {})", output.display(), out.width(), out.height(), out.mode());
        }
        Command::AsmaRoundtrip {
            input,
            from,
            oversample,
        } => {
            let img = Image::read_png(&input, from)?;
            let geom = geometry_for(&img, explicit_geometry.then_some(&cfg.geometry), oversample)?;
            let mae = roundtrip_error(&img, &geom)?;
            print_json(&serde_json::json!({
                "input": input,
                "mode": from,
                "grid": [geom.out_rows, geom.out_cols],
                "canvas": [geom.canvas_height, geom.canvas_width],
                "interior_mae": mae,
                "interior_mae_levels": mae * 255.0,
            }));
        }
        Command::GenSynthetic {
            out_dir,
            frames,
            width,
            height,
            speckle,
        } => {
            let mut spec = cfg.synthetic.clone();
            spec.frames = frames.unwrap_or(spec.frames);
            spec.width = width.unwrap_or(spec.width);
            spec.height = height.unwrap_or(spec.height);
            spec.speckle = speckle.unwrap_or(spec.speckle);
            let (imgs, masks) = gen_synthetic(&spec, cfg.seed)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
            let mut manifest = String::from("# frame,mask\n");
            for (k, (img, mask)) in imgs.iter().zip(&masks).enumerate() {
                let (f, m) = (format!("frame_{k:03}.png"), format!("mask_{k:03}.png"));
                img.write_png(out_dir.join(&f))?;
                mask.write_png(out_dir.join(&m))?;
                manifest.push_str(&format!("{f},{m}\n"));
            }
            write_atomic(out_dir.join("manifest.txt"), manifest.as_bytes())?;
            print_json(&serde_json::json!({
                "out_dir": out_dir,
                "frames": spec.frames,
                "width": spec.width,
                "height": spec.height,
                "seed": cfg.seed,
            }));
        }
        Command::Forward {
            frames,
            target,
            output,
            record,
            weights,
            save_weights,
            mode,
        } => {
            let model_cfg = cfg.model_config();
            let video = frames
                .iter()
                .map(|p| Image::read_png(p, mode))
                .collect::<Result<Vec<_>, _>>()?;
            let t = target.unwrap_or(video.len() - 1);
            let clip = clip_sample(&video, t, model_cfg.clip_len)?;
            let w = match &weights {
                Some(p) => AstrWeights::from_records(&model_cfg, &NamedTensors::load(p)?)?,
                None => AstrWeights::init(&model_cfg, cfg.seed)?,
            };
            let start = Instant::now();
            let out = astr_forward(&clip, &w, model_cfg.threshold)?;
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            Image::from_probability(&out.prob_mask, mode)?.write_png(&output)?;
            if let Some(p) = &save_weights {
                w.to_records().save(p)?;
            }
            let line = serde_json::to_string(&ForwardRecord {
                target: t,
                frame_times: &clip.frame_times,
                token_counts: &out.token_counts,
                elapsed_ms,
                seed: cfg.seed,
                mask: &output,
            })
            .expect("record serialises");
            match &record {
                Some(p) => write_atomic(p, format!("{line}\n").as_bytes())?,
                None => println!("{line}"),
            }
        }
        Command::BenchFusion { h, w, c, t, m, reps } => {
            let row = bench_fusion(h, w, c, t, m, reps, cfg.seed)?;
            println!("{}", FusionBenchRow::CSV_HEADER);
            println!("{}", row.csv_row());
        }
        Command::EvalMetrics {
            manifest,
            output,
            binarized_mae,
        } => {
            let source = if binarized_mae { MaeSource::Binarized } else { cfg.metrics.mae_source };
            eval_metrics(&manifest, &output, cfg.metrics.bin_threshold, source, cli.threads.into())?;
        }
        Command::LossCheck { size, pixels } => loss_check(&cfg, size, pixels)?,
        Command::Selfcheck => {
            let results = run_selfcheck();
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                return Err(invalid(format!("{failed} of {} checks failed", results.len())));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ForwardRecord<'a> {
    target: usize,
    frame_times: &'a [usize],
    token_counts: &'a [usize],
    elapsed_ms: f64,
    seed: u64,
    mask: &'a Path,
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

/// The configured fan when one was given, otherwise the default fan fitted
/// to the image. `oversample` scales the rectangle relative to the canvas.
fn geometry_for(img: &Image, configured: Option<&PolarGeometry>, oversample: usize) -> CliResult<PolarGeometry> {
    if oversample == 0 {
        return Err(invalid("--oversample must be at least 1"));
    }
    if let Some(g) = configured {
        return Ok(g.clone());
    }
    let (w, h) = (img.width(), img.height());
    Ok(match img.mode() {
        ScanMode::Convex => PolarGeometry::for_canvas(w, h).with_grid(h * oversample, w * oversample),
        ScanMode::Linear => {
            if w % oversample != 0 || h % oversample != 0 {
                return Err(invalid(format!("{w}×{h} rectangle is not divisible by --oversample {oversample}")));
            }
            PolarGeometry::for_canvas(w / oversample, h / oversample).with_grid(h, w)
        }
    })
}

fn as_grid(t: Tensor) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.reshape(&[h, w]).expect("single-channel image")
}

fn eval_metrics(manifest: &Path, output: &Path, threshold: f64, source: MaeSource, threads: usize) -> CliResult {
    let records = read_manifest(manifest, 2)?;
    if records.is_empty() {
        return Err(invalid(format!("{} lists no frames", manifest.display())));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let resolve = |s: &str| base.join(s);

    let score = |rec: &Vec<String>| -> CliResult<(String, MetricReport)> {
        let pred = Image::read_png(resolve(&rec[0]), ScanMode::Linear)?;
        let gt = Image::read_png(resolve(&rec[1]), ScanMode::Linear)?;
        let r = frame_metrics_with(&as_grid(pred.to_tensor()), &gt.to_binary_grid(), threshold, source)?;
        let id = Path::new(&rec[0])
            .file_stem()
            .map_or_else(|| rec[0].clone(), |s| s.to_string_lossy().into_owned());
        Ok((id, r))
    };
    // Results come back in manifest order either way, so the mean is the
    // same for any thread count.
    let scored: Vec<CliResult<(String, MetricReport)>> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
        pool.install(|| records.par_iter().map(score).collect())
    } else {
        records.iter().map(score).collect()
    };
    let scored = scored.into_iter().collect::<CliResult<Vec<_>>>()?;

    let reports: Vec<MetricReport> = scored.iter().map(|(_, r)| *r).collect();
    let summary = dataset_metrics(&reports)?;
    let mut csv = format!("{}\n", MetricReport::CSV_HEADER);
    for (id, r) in &scored {
        csv.push_str(&r.csv_row(id));
        csv.push('\n');
    }
    csv.push_str(&summary.csv_row("mean"));
    csv.push('\n');
    write_atomic(output, csv.as_bytes())?;
    eprintln!(
        "{} frames: dice {:.4} iou {:.4} mae {:.4}",
        reports.len(),
        summary.dice,
        summary.iou,
        summary.mae
    );
    Ok(())
}

fn loss_check(cfg: &Config, size: usize, pixels: usize) -> CliResult {
    const COARSE: usize = 4;
    if size < COARSE || size % COARSE != 0 {
        return Err(invalid(format!("--size must be a positive multiple of {COARSE}")));
    }
    if pixels == 0 {
        return Err(invalid("--pixels must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = size * size;
    let pred = Tensor::from_vec(&[size, size], (0..n).map(|_| rng.random_range(0.05..0.95)).collect())?;
    let centre = size as f64 / 2.0;
    let gt = Tensor::from_vec(
        &[size, size],
        (0..n)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - centre, (i % size) as f64 - centre);
                f64::from(u8::from(x * x + y * y <= (size * size) as f64 / 9.0))
            })
            .collect(),
    )?;

    // One coarse map: the prediction pooled onto a 4×4 grid.
    let k = size / COARSE;
    let pooled = avg_pool2d(&pred.clone().reshape(&[1, size, size])?, k)?;
    let coarse = CoarseMask::new(COARSE, COARSE, pooled.into_data())?;
    let coarse_gt = coarse_ground_truth(&gt, COARSE, COARSE)?;
    let report = total_loss_with(
        &pred,
        &gt,
        &[coarse],
        &[coarse_gt],
        cfg.loss.lambda_aux,
        cfg.loss.aux_reduction,
    )?;

    let grad = loss_gradient(&pred, &gt)?;
    let step = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..pixels {
        let i = rng.random_range(0..n);
        let eval = |delta: f64| -> CliResult<f64> {
            let mut q = pred.data().to_vec();
            q[i] += delta;
            Ok(combined_loss(&Tensor::from_vec(&[size, size], q)?, &gt)?)
        };
        let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
        let a = grad.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
    }
    print_json(&serde_json::json!({
        "report": report,
        "max_grad_rel_error": worst,
        "pixels_checked": pixels,
        "fd_step": step,
        "seed": cfg.seed,
    }));
    Ok(())
}
