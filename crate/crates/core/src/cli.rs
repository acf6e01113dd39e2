//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check, 2 bad arguments, 3 I/O or format
//! error, 4 degenerate transform.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::data::{self, BitDepth, SplitOptions};
use crate::error::Error;
use crate::gradsuite::{run_suite, SUITE_TOLERANCE};
use crate::metrics::EvalReport;
use crate::model::{self, Model, ModelConfig, TrainOptions};
use crate::warp::{self, Dims, Mask, Plane};
use crate::xform::TransformFile;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "WARPCORE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "warpcore", version, about = "Super-resolution under arbitrary image warps")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warp an image with a transform file.
    Warp(WarpArgs),
    /// Synthesize warped training pairs from HR images.
    Synth(SynthArgs),
    /// Train the model on a synthesized split.
    Train(TrainArgs),
    /// Masked PSNR of predictions against references.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and model stage.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Bicubic,
    Adaptive,
    Srwarp,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// JSON transform: `{"matrix": ..}` or `{"kind": "sine"|"barrel", ..}`.
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Bicubic)]
    pub method: Method,
    /// Model directory (required by `srwarp`).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub hr_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// First fill `--hr-dir` with this many procedural 256×256 images.
    #[arg(long)]
    pub procedural: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Split directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Output directory for `weights.bin`, `model.json` and `train_log.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON model configuration; fields left out keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction PNG, or a directory of them.
    #[arg(long = "pred", visible_alias = "sr-dir")]
    pub pred: PathBuf,
    /// Reference PNG, or a directory with the same file names.
    #[arg(long = "ref", visible_alias = "hr-dir")]
    pub reference: PathBuf,
    /// Mask PNG, or a directory with the same file names; all pixels valid if absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Coordinates sampled per model tensor; all when absent.
    #[arg(long)]
    pub coords: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::UnsupportedFormat(_) | Error::Json(_) => EXIT_IO,
                Error::DegeneratePoint { .. }
                | Error::Degenerate(_)
                | Error::OutOfDomain { .. }
                | Error::SingularJacobian { .. }
                | Error::ResampleRejected { .. }
                | Error::EmptyMask
                | Error::NoValidSquare { .. } => EXIT_DEGENERATE,
                Error::InvalidScale { .. }
                | Error::InvalidParams(_)
                | Error::ShapeMismatch(_)
                | Error::UnknownParam(_) => EXIT_USAGE,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => {
                    let err = Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, msg);
                    let _ = err.print();
                }
                other => eprintln!("error: {other}"),
            }
            e.exit_code()
        }
    }
}

/// Runs a parsed command inside a pool sized by `--threads`.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {n:?} threads: {e}", n = cli.threads)))?;
    pool.install(|| match &cli.command {
        Command::Warp(a) => cmd_warp(a),
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed),
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

pub fn cmd_warp(a: &WarpArgs) -> CliResult<()> {
    if a.method == Method::Srwarp && a.weights.is_none() {
        return Err(CliError::Usage("--method srwarp requires --weights <DIR>".into()));
    }
    let tf = TransformFile::from_json(&read_text(&a.transform)?)
        .map_err(|e| CliError::Usage(format!("invalid transform file {}: {e}", a.transform.display())))?;
    let img = data::load_image(&a.input)?;
    let resolved = tf.resolve(img.width(), img.height())?;
    let dst = Dims::new(resolved.width, resolved.height);
    let (out, mask): (Plane, Mask) = match a.method {
        Method::Bicubic => warp::warp_bicubic(&img, &resolved.map, dst),
        Method::Adaptive => warp::warp_adaptive_fixed(&img, &resolved.map, dst),
        Method::Srwarp => {
            let model = Model::load(a.weights.as_deref().expect("checked above"))?;
            let rgb = if img.channels() == 1 {
                data::gray_to_rgb(&img)
            } else {
                img.clone()
            };
            model.forward(&rgb, &resolved.map, dst)?
        }
    };
    data::save_image(&out, &a.output, BitDepth::Eight)?;
    if let Some(p) = &a.mask_out {
        data::save_mask(&mask, p)?;
    }
    eprintln!(
        "warped {}x{} -> {}x{} ({} valid pixels)",
        img.width(),
        img.height(),
        dst.width,
        dst.height,
        mask.count()
    );
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, seed: u64) -> CliResult<()> {
    if let Some(n) = a.procedural {
        data::write_procedural_hr(&a.hr_dir, n, 256, seed)?;
    }
    data::build_split(&a.hr_dir, &a.out_dir, a.count, seed, SplitOptions::default())?;
    println!("{}", a.out_dir.join(data::MANIFEST_FILE).display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, seed: u64) -> CliResult<()> {
    let config: ModelConfig = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?,
        None => ModelConfig::default(),
    };
    config.validate()?;
    if a.batch == 0 || !(a.lr > 0.0) {
        return Err(CliError::Usage("--batch must be positive and --lr > 0".into()));
    }
    let samples = data::load_split(&a.data)?;
    let examples = model::examples_from_split(&samples)?;
    let opts = TrainOptions {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed,
        log_every: 10,
    };
    let (model, log) = model::train(config, &examples, &opts, |e| {
        eprintln!("step {} loss {:.6}", e.step, e.loss);
    })?;
    model.save(&a.out)?;
    let path = a.out.join(TRAIN_LOG_FILE);
    data::write_atomic(
        &path,
        serde_json::to_string_pretty(&log).map_err(Error::from)?.as_bytes(),
    )?;
    println!("{}", a.out.display());
    Ok(())
}

pub const TRAIN_LOG_FILE: &str = "train_log.json";

#[derive(Debug, Serialize)]
pub struct EvalEntry {
    pub name: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub images: Vec<EvalEntry>,
    #[serde(serialize_with = "crate::metrics::ser_db")]
    pub mean_mpsnr_db: f64,
}

fn eval_pair(pred: &Path, reference: &Path, mask: Option<&Path>) -> CliResult<EvalReport> {
    let sr = data::load_image(pred)?;
    let hr = data::load_image(reference)?;
    let m = match mask {
        Some(p) => data::load_mask(p)?,
        None => Mask::ones(hr.width(), hr.height()),
    };
    Ok(EvalReport::compute(&sr, &hr, &m)?)
}

/// Scores either a single image pair or every PNG of `--pred` against the
/// same file name under `--ref` (and `--mask`).
pub fn evaluate_paths(a: &EvalArgs) -> CliResult<EvalSummary> {
    let mut images = Vec::new();
    if a.pred.is_dir() {
        for p in data::list_pngs(&a.pred)? {
            let name = p.file_name().expect("listed file").to_owned();
            let mask = a.mask.as_ref().map(|m| m.join(&name));
            let report = eval_pair(&p, &a.reference.join(&name), mask.as_deref())?;
            images.push(EvalEntry {
                name: name.to_string_lossy().into_owned(),
                report,
            });
        }
        if images.is_empty() {
            return Err(CliError::Usage(format!("no PNG files in {}", a.pred.display())));
        }
    } else {
        let report = eval_pair(&a.pred, &a.reference, a.mask.as_deref())?;
        images.push(EvalEntry {
            name: a.pred.to_string_lossy().into_owned(),
            report,
        });
    }
    let mean_mpsnr_db = images.iter().map(|e| e.report.mpsnr_db).sum::<f64>() / images.len() as f64;
    Ok(EvalSummary { images, mean_mpsnr_db })
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let summary = evaluate_paths(a)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> CliResult<()> {
    if !(a.step > 0.0) {
        return Err(CliError::Usage("--step must be positive".into()));
    }
    let results = run_suite(a.step, a.coords, seed)?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{}", serde_json::to_string(r).map_err(Error::from)?);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        eprintln!("gradcheck: {} cases within {SUITE_TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradcheck failed: {}",
            failed.join(", ")
        )))
    }
}
