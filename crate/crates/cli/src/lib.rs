//! Command-line front end and HTTP service for the `curvereg` library.
//!
//! Every command prints one JSON document on stdout and human-readable
//! progress on stderr. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numerical failure.

pub mod render;
pub mod service;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use curvereg::keycurve::{fit_all, rmse, transform_points, AnnotationSet, CurveSet, DEFAULT_SAMPLES};
use curvereg::register::{evaluate, register, RegistrationConfig, RegistrationResult, Validation};
use curvereg::synth::SynthSpec;
use curvereg::volume::{load_volume, residual_image, save_volume, Channel, VoxelGrid};
use curvereg::warp::Transform;
use curvereg::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

#[derive(Debug, Parser)]
#[command(name = "curvereg", version, about = "Key-curve metrics and PET-CT registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit quadratic key curves to an annotation file.
    Fit {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Key-curve RMSE between two annotation or curve files.
    Score {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Transform (or registration result) applied to the source points.
        #[arg(long)]
        transform: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Generate a synthetic phantom pair.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a source volume onto a target volume.
    Register {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "val_tgt")]
        val_src: Option<PathBuf>,
        #[arg(long, requires = "val_src")]
        val_tgt: Option<PathBuf>,
    },
    /// Key-curve evaluation of a registration result.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Voxel-wise difference `a - b` of every shared channel.
    Residual {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the annotation API over a data directory.
    Serve {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Path prefix for every route, e.g. `/api`.
        #[arg(long, default_value = "")]
        prefix: String,
    },
}

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    let _ = writeln!(out, "{text}");
}

/// Applies `CURVEREG_THREADS` to the global rayon pool.
pub fn configure_threads() {
    if let Some(n) = thread_limit() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Positive value of `CURVEREG_THREADS`, if set.
pub fn thread_limit() -> Option<usize> {
    std::env::var("CURVEREG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(err, "{e}");
                return EXIT_OK;
            }
            let _ = write!(err, "{e}");
            print_json(
                out,
                &ErrorBody {
                    error: "Usage",
                    message: e.kind().to_string(),
                },
            );
            return EXIT_USAGE;
        }
    };
    configure_threads();
    match execute(cli.command, err) {
        Ok(value) => {
            print_json(out, &value);
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            print_json(
                out,
                &ErrorBody {
                    error: e.name(),
                    message: e.to_string(),
                },
            );
            exit_code(&e)
        }
    }
}

fn execute(command: Command, err: &mut dyn Write) -> curvereg::Result<Value> {
    match command {
        Command::Fit { points, out } => {
            let set = AnnotationSet::load(&points)?;
            let curves = fit_all(&set)?;
            curves.save(&out)?;
            let _ = writeln!(err, "fitted {} curves -> {}", curves.curves.len(), out.display());
            Ok(serde_json::to_value(&curves)?)
        }
        Command::Score {
            src,
            tgt,
            transform,
            samples,
        } => {
            let transform = transform.map(Transform::load).transpose()?;
            let report = score_files(&src, &tgt, transform.as_ref(), samples)?;
            let _ = writeln!(err, "rmse {:.4} mm over {} curves", report.rmse_mm, report.per_curve.len());
            let mut value = serde_json::to_value(&report)?;
            value["n_samples"] = json!(samples);
            Ok(value)
        }
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(path) => {
                    let text = read_text(&path)?;
                    serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::HeaderParse(e.to_string()))?
                }
                None => SynthSpec::default(),
            };
            let pair = spec.build()?;
            pair.save(&out)?;
            let unaligned = rmse(&pair.src_curves, &pair.tgt_curves, DEFAULT_SAMPLES)?;
            let _ = writeln!(err, "wrote phantom pair to {}", out.display());
            Ok(json!({
                "out": out,
                "files": {
                    "src": "src.vmeta",
                    "tgt": "tgt.vmeta",
                    "src_points": "src_points.json",
                    "tgt_points": "tgt_points.json",
                    "src_curves": "src_curves.json",
                    "tgt_curves": "tgt_curves.json",
                    "transform": "gt_transform.json",
                },
                "dims": pair.src.dims(),
                "n_curves": pair.src_curves.curves.len(),
                "unaligned_rmse_mm": unaligned.rmse_mm,
            }))
        }
        Command::Register {
            src,
            tgt,
            config,
            out,
            val_src,
            val_tgt,
        } => {
            let cfg = match config {
                Some(path) => RegistrationConfig::load(path)?,
                None => RegistrationConfig::default(),
            };
            let src = load_volume(&src)?;
            let tgt = load_volume(&tgt)?;
            let val = match (val_src, val_tgt) {
                (Some(a), Some(b)) => Some((AnnotationSet::load(a)?, AnnotationSet::load(b)?)),
                _ => None,
            };
            let validation = val.as_ref().map(|(a, b)| Validation { src: a, tgt: b });
            let _ = writeln!(err, "registering...");
            let result = register(&src, &tgt, &cfg, validation)?;
            result.save(&out)?;
            let _ = writeln!(
                err,
                "objective {:.5} -> {:.5} in {:.1} s",
                result.initial_objective(),
                result.final_objective(),
                result.wall_time_s
            );
            Ok(serde_json::to_value(&result)?)
        }
        Command::Eval {
            result,
            src,
            tgt,
            samples,
        } => {
            let result = RegistrationResult::load(&result)?;
            let src = AnnotationSet::load(&src)?;
            let tgt = AnnotationSet::load(&tgt)?;
            let report = evaluate(&src, &tgt, &result.transform, samples)?;
            let _ = writeln!(
                err,
                "rmse {:.4} mm (unaligned {:.4} mm)",
                report.rmse_mm, report.unaligned_rmse_mm
            );
            Ok(serde_json::to_value(&report)?)
        }
        Command::Residual { a, b, out } => {
            let va = load_volume(&a)?;
            let vb = load_volume(&b)?;
            let residual = residual_all(&va, &vb)?;
            let out = if out.extension().is_some() {
                out
            } else {
                out.with_extension("vmeta")
            };
            save_volume(&residual, &out)?;
            let _ = writeln!(err, "wrote residual to {}", out.display());
            let channels: Vec<Value> = residual
                .channels()
                .iter()
                .map(|c| {
                    let max_abs = c.data.iter().fold(0f32, |m, v| m.max(v.abs()));
                    json!({ "channel": c.label, "max_abs": max_abs })
                })
                .collect();
            Ok(json!({ "out": out, "channels": channels }))
        }
        Command::Serve {
            root,
            port,
            host,
            prefix,
        } => {
            let _ = writeln!(err, "serving {} on {host}:{port}{prefix}", root.display());
            service::serve_blocking(root, &host, port, &prefix)?;
            Ok(json!({ "stopped": true }))
        }
    }
}

fn read_text(path: &Path) -> curvereg::Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::IoFailure {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

/// Contents of a `score` input: raw annotations or already fitted curves.
pub enum CurveInput {
    Points(AnnotationSet),
    Curves(CurveSet),
}

impl CurveInput {
    pub fn load(path: &Path) -> curvereg::Result<Self> {
        let text = read_text(path)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::HeaderParse(e.to_string()))?;
        if value.get("points").is_some() {
            let set = AnnotationSet::load(path)?;
            Ok(CurveInput::Points(set))
        } else {
            let set: CurveSet = serde_json::from_value(value).map_err(|e| Error::HeaderParse(e.to_string()))?;
            Ok(CurveInput::Curves(set))
        }
    }

    /// Curves after mapping the points through `t`. Curve files cannot be
    /// transformed since their points are gone.
    pub fn curves(&self, t: Option<&Transform>) -> curvereg::Result<CurveSet> {
        match (self, t) {
            (CurveInput::Points(set), None) => fit_all(set),
            (CurveInput::Points(set), Some(t)) => fit_all(&AnnotationSet {
                visit_id: set.visit_id.clone(),
                points: transform_points(&set.points, t),
            }),
            (CurveInput::Curves(c), None) => Ok(c.clone()),
            (CurveInput::Curves(_), Some(_)) => Err(Error::InvalidConfig(
                "a transform can only be applied to annotation files".into(),
            )),
        }
    }
}

/// RMSE between `src` (mapped through `transform`) and `tgt`.
pub fn score_files(
    src: &Path,
    tgt: &Path,
    transform: Option<&Transform>,
    samples: usize,
) -> curvereg::Result<curvereg::keycurve::RmseReport> {
    if let Some(t) = transform {
        t.validate()?;
    }
    let a = CurveInput::load(src)?.curves(transform)?;
    let b = CurveInput::load(tgt)?.curves(None)?;
    rmse(&a, &b, samples)
}

/// Residual of every channel present in both grids.
pub fn residual_all(a: &VoxelGrid, b: &VoxelGrid) -> curvereg::Result<VoxelGrid> {
    let mut channels: Vec<Channel> = Vec::new();
    for label in a.labels() {
        if b.has_channel(label) {
            let r = residual_image(a, b, label)?;
            channels.push(r.channels()[0].clone());
        }
    }
    if channels.is_empty() {
        return Err(Error::MissingChannel("no channel shared by both volumes".into()));
    }
    VoxelGrid::new(*a.geometry(), channels)
}
