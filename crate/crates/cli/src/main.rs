//! `ncf`: register, warp, synthesize and evaluate volume pairs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use ncf_core::engine::{
    export_field, import_field, mean_magnitude, register_pair, warp_image, write_loss_csv, Interp, RunConfig,
};
use ncf_core::metaimage::{load_volume, save_volume};
use ncf_core::metrics::{dice, endpoint_error, jacobian_folding, tre, Landmarks};
use ncf_core::synth::gen_synthetic_case;
use ncf_core::{Dims, Error};

#[derive(Parser, Debug)]
#[command(name = "ncf", version, about = "Neural correspondence field registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a moving volume onto a fixed volume.
    Register(RegisterArgs),
    /// Resample a volume through a displacement field.
    Warp(WarpArgs),
    /// Write a synthetic case with a known displacement.
    Synth(SynthArgs),
    /// Compute overlap, field and landmark metrics.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_field: PathBuf,
    #[arg(long)]
    out_warped: PathBuf,
    /// Worker threads. Falls back to NCF_THREADS, then to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "linear")]
    interp: Interp,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Edge length `N` for a cube, or `W,H,D`.
    #[arg(long, value_parser = parse_size)]
    size: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Peak displacement in voxels.
    #[arg(long)]
    max_disp: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    fixed_mask: PathBuf,
    #[arg(long)]
    warped_mask: PathBuf,
    #[arg(long)]
    pred_field: Option<PathBuf>,
    #[arg(long)]
    gt_field: Option<PathBuf>,
    #[arg(long)]
    landmarks: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let dims = match parts.as_slice() {
        [n] => Dims::cube(*n),
        [w, h, d] => Dims::new(*w, *h, *d),
        _ => return Err("expected N or W,H,D".into()),
    };
    dims.map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => 3,
        _ => 2,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("NCF_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("NCF_THREADS must be an integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// The loss log sits beside the field file: `field.mha` gets `field_loss.csv`.
fn loss_csv_path(field: &Path) -> PathBuf {
    let stem = field.file_stem().and_then(|s| s.to_str()).unwrap_or("field");
    field.with_file_name(format!("{stem}_loss.csv"))
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

fn run_register(args: RegisterArgs) -> Result<Value, Error> {
    let config = match &args.config {
        // Unknown keys are reported as a warning by the loader.
        Some(path) => RunConfig::load(path)?.0,
        None => RunConfig::default(),
    };
    let fixed = load_volume(&args.fixed)?;
    let moving = load_volume(&args.moving)?;

    let result = match thread_count(args.threads)? {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| register_pair(&fixed, &moving, &config))?,
        Some(_) => return Err(Error::InvalidArgument("thread count must be positive".into())),
        None => register_pair(&fixed, &moving, &config)?,
    };

    ensure_parent(&args.out_field)?;
    ensure_parent(&args.out_warped)?;
    export_field(&result.offset, &args.out_field)?;
    save_volume(&result.warped, &args.out_warped)?;
    let csv = loss_csv_path(&args.out_field);
    write_loss_csv(&result.loss_history, &csv)?;

    let last = result.loss_history.last().expect("at least one iteration");
    Ok(json!({
        "iterations": result.loss_history.len(),
        "initial_loss": result.initial_loss(),
        "final_loss": last.total,
        "photometric": last.photometric,
        "ssim": last.ssim,
        "occupancy": last.occupancy,
        "final_lr": result.final_lr,
        "wall_time_s": result.wall_time,
        "param_count": result.param_count,
        "mean_offset_voxels": mean_magnitude(&result.offset),
        "loss_csv": csv.display().to_string(),
    }))
}

fn run_warp(args: WarpArgs) -> Result<Value, Error> {
    let field = import_field(&args.field)?;
    let input = load_volume(&args.input)?;
    let out = warp_image(&input, &field, args.interp)?;
    ensure_parent(&args.out)?;
    save_volume(&out, &args.out)?;
    Ok(json!({ "out": args.out.display().to_string(), "interp": args.interp.to_string() }))
}

fn run_synth(args: SynthArgs) -> Result<Value, Error> {
    let case = gen_synthetic_case(args.size, args.seed, args.max_disp)?;
    let manifest = case.write_dir(&args.out_dir)?;
    Ok(json!({
        "out_dir": args.out_dir.display().to_string(),
        "seed": manifest.seed,
        "size": manifest.size,
        "max_disp": manifest.max_disp,
        "gt_folding": manifest.gt_folding,
        "pre_dice": manifest.pre_dice,
    }))
}

fn run_eval(args: EvalArgs) -> Result<Value, Error> {
    let fixed = load_volume(&args.fixed_mask)?;
    let warped = load_volume(&args.warped_mask)?;
    let mut out = Map::new();
    out.insert("dice".into(), json!(dice(&fixed, &warped)?));

    let pred = args.pred_field.as_deref().map(import_field).transpose()?;
    if let Some(pred) = &pred {
        out.insert("folding".into(), json!(jacobian_folding(pred)?));
        if let Some(gt_path) = &args.gt_field {
            let gt = import_field(gt_path)?;
            let (mean, max) = endpoint_error(pred, &gt, None)?;
            out.insert("endpoint".into(), json!({ "mean": mean, "max": max }));
        }
    }
    if let Some(lm_path) = &args.landmarks {
        let pred = pred.as_ref().ok_or_else(|| {
            Error::InvalidArgument("--landmarks needs --pred-field to map the fixed points".into())
        })?;
        let lm = Landmarks::load(lm_path)?;
        out.insert("tre".into(), json!(tre(&lm, pred, fixed.spacing())?));
    }
    Ok(Value::Object(out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Register(a) => run_register(a),
        Command::Warp(a) => run_warp(a),
        Command::Synth(a) => run_synth(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
