use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use hierlight::cost::{analyze, render, ReportFormat};
use hierlight::detect::{decode, nms, to_json_line, unletterbox, DecodeConfig};
use hierlight::dsl::parse_model_relaxed;
use hierlight::gradcheck::{gradcheck_suite, TOLERANCE};
use hierlight::graph::{compile, Graph};
use hierlight::image::{letterbox, read_ppm};
use hierlight::weights::{init_from_slots, load_weights, save_weights, WeightStore};
use hierlight::{load_model, resolve, Error};

#[derive(Parser)]
#[command(name = "hierlight", version, about = "Cost analysis and CPU inference for HierLight-YOLO models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-node parameter and FLOP report.
    Analyze {
        model: PathBuf,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Write seeded random weights.
    Init {
        model: PathBuf,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Detect objects in P6 PPM images; prints one JSON line per detection.
    Run {
        model: PathBuf,
        weights: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long, default_value_t = 0.25)]
        conf: f32,
        #[arg(long, default_value_t = 0.45)]
        iou: f32,
    },
    /// Finite-difference gradient checks of the differentiable blocks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        block: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Graphviz DOT of the compiled graph.
    DumpGraph {
        model: PathBuf,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
    },
}

/// A failed check, distinct from an error.
struct CheckFailed(String);

enum Failure {
    Lib(Error),
    Check(CheckFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Consistency(_) => 3,
        _ => 2,
    }
}

fn read_weights(path: &Path) -> Result<WeightStore, Error> {
    if !path.is_file() {
        return Err(Error::Input(format!("cannot open {}", path.display())));
    }
    load_weights(path)
}

fn analyze_cmd(model: &Path, scale: Option<&str>, imgsz: usize, format: Format) -> Result<String, Error> {
    let g = compile(&load_model(model, scale)?, imgsz)?;
    let mut r = analyze(&g);
    if let Some(s) = scale {
        r = r.with_scale(s);
    }
    let f = match format {
        Format::Text => ReportFormat::Text,
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    };
    Ok(render(&r, f))
}

fn detect_image(g: &Graph, store: &WeightStore, cfg: &DecodeConfig, path: &Path) -> Result<Vec<String>, Error> {
    let img = read_ppm(path)?;
    let (x, tr) = letterbox(&img, g.input.h)?;
    let taps = g.forward(store, &x)?;
    let heads: Vec<(usize, &hierlight::Tensor)> = g.head_taps().iter().map(|t| (t.stride, &taps[&t.name])).collect();
    let kept = nms(&decode(&heads, cfg)?, cfg.iou_thresh);
    let name = path.display().to_string();
    Ok(unletterbox(&kept, &tr).iter().map(|d| to_json_line(&name, d)).collect())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match cli.cmd {
        Cmd::Analyze { model, scale, imgsz, format } => {
            out.write_all(analyze_cmd(&model, scale.as_deref(), imgsz, format)?.as_bytes())?;
        }
        Cmd::Init { model, scale, seed, output } => {
            let g = compile(&load_model(&model, scale.as_deref())?, 640)?;
            let store = init_from_slots(&g.slots, seed)?;
            save_weights(&store, &output)
                .map_err(|e| Error::Input(format!("cannot write {}: {e}", output.display())))?;
            writeln!(out, "{} parameters written to {}", store.trainable_count(), output.display())?;
        }
        Cmd::Run { model, weights, images, scale, imgsz, conf, iou } => {
            let g = compile(&load_model(&model, scale.as_deref())?, imgsz)?;
            let store = read_weights(&weights)?;
            store.validate_against(&g.slots)?;
            let cfg = DecodeConfig {
                reg_max: g.reg_max,
                strides: g.head_taps().iter().map(|t| t.stride).collect(),
                conf_thresh: conf,
                iou_thresh: iou,
                classes: g.classes,
            };
            cfg.validate()?;
            // images run concurrently; results are printed in input order
            let results: Vec<_> = images.par_iter().map(|p| detect_image(&g, &store, &cfg, p)).collect();
            for r in results {
                for line in r? {
                    writeln!(out, "{line}")?;
                }
            }
        }
        Cmd::Gradcheck { block, seed } => {
            let reports = gradcheck_suite(&block, seed)?;
            writeln!(out, "{:<12} {:<22} {:>12}  result", "check", "group", "rel_error")?;
            for r in &reports {
                for (group, err) in &r.groups {
                    writeln!(out, "{:<12} {:<22} {:>12.3e}", r.op, group, err)?;
                }
                writeln!(
                    out,
                    "{:<12} {:<22} {:>12.3e}  {}",
                    r.op,
                    "max",
                    r.max_rel_error,
                    if r.pass { "PASS" } else { "FAIL" }
                )?;
            }
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            writeln!(out, "worst relative error {worst:.3e} (tolerance {TOLERANCE:e})")?;
            if let Some(r) = reports.iter().filter(|r| !r.pass).max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)) {
                return Err(Failure::Check(CheckFailed(format!(
                    "gradcheck failed: worst relative error {:.3e} in {}",
                    r.max_rel_error, r.op
                ))));
            }
        }
        Cmd::DumpGraph { model, scale, imgsz } => {
            // relaxed so that small fixtures without a detection head can be drawn
            let text = std::fs::read_to_string(&model)
                .map_err(|e| Error::Input(format!("cannot open {}: {e}", model.display())))?;
            let g = compile(&resolve(&parse_model_relaxed(&text)?, scale.as_deref())?, imgsz)?;
            out.write_all(g.dump_dot().as_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("HIERLIGHT_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("HIERLIGHT_THREADS must be a non-negative integer, got '{v}'")))?;
    // 0 leaves the choice to rayon
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = init_threads().map_err(Failure::Lib).and_then(|_| run(cli));
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        // downstream closed the pipe, e.g. `| head`
        Err(Failure::Lib(Error::Io(e))) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("hierlight: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
