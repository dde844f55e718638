//! `paseg`: segment CT volumes, evaluate masks, generate phantoms and manage
//! U-Net weight files.
//!
//! Every command prints one JSON summary line on stdout. Diagnostics go to
//! stderr. Exit codes: 0 ok, 2 empty prediction, 64 usage, 65 data format,
//! 70 internal.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use paseg_core::metrics::CaseMetrics;
use paseg_core::nifti::{read_mask, read_volume, write_mask, write_volume};
use paseg_core::phantom::Blob;
use paseg_core::unet::{init_weights, load_weights, save_weights, UNetArch};
use paseg_core::{
    generate_phantom, segment, Backend, EvalReport, NiftiError, PhantomError, PhantomSpec, PipelineError, UNet,
    UNetError,
};
use serde_json::{json, Value};
use thiserror::Error;

use config::{parse_shape, ConfigError, PipelineConfigFile};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("segmentation is empty: {0}")]
    Empty(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Empty(_) => 2,
            CliError::Usage(_) => 64,
            CliError::Data(_) => 65,
            CliError::Internal(_) => 70,
        }
    }
}

fn io_error(kind: ErrorKind, msg: String) -> CliError {
    match kind {
        ErrorKind::NotFound | ErrorKind::PermissionDenied => CliError::Usage(msg),
        _ => CliError::Internal(msg),
    }
}

impl From<NiftiError> for CliError {
    fn from(e: NiftiError) -> Self {
        match &e {
            NiftiError::IoFailure { source, .. } => io_error(source.kind(), e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<UNetError> for CliError {
    fn from(e: UNetError) -> Self {
        match &e {
            UNetError::Io { source, .. } => io_error(source.kind(), e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::EmptyPrediction => CliError::Empty(e.to_string()),
            PipelineError::InvalidConfig(_) | PipelineError::Window(_) => CliError::Usage(e.to_string()),
            PipelineError::Model(m) => m.into(),
            PipelineError::Grid(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match &e {
            ConfigError::Io { source, .. } => io_error(source.kind(), e.to_string()),
            ConfigError::Syntax { .. } => CliError::Usage(e.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "paseg", version, about = "Coarse-to-fine multi-view CT vessel segmentation")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment a CT volume.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic vessel phantom and its ground-truth mask.
    Phantom(PhantomArgs),
    /// Create or inspect UNW1 weight files.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Unet,
    Analytic,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackendKind::Unet)]
    backend: BackendKind,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks; files pair up by name.
    #[arg(long)]
    gt: PathBuf,
    /// CSV report path.
    #[arg(long)]
    report: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Writes `<prefix>_volume.nii[.gz]` and `<prefix>_mask.nii[.gz]`.
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long, default_value = "64", value_parser = parse_shape)]
    shape: [usize; 3],
    #[arg(long, default_value = "1", value_parser = parse_spacing)]
    spacing: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    trunk_radius: f64,
    #[arg(long, default_value_t = 2.0)]
    branch_radius: f64,
    #[arg(long, default_value_t = 4)]
    branches: usize,
    #[arg(long, default_value_t = 150.0, allow_hyphen_values = true)]
    trunk_hu: f32,
    #[arg(long, default_value_t = -450.0, allow_hyphen_values = true)]
    branch_hu: f32,
    #[arg(long, default_value_t = -1024.0, allow_hyphen_values = true)]
    background_hu: f32,
    #[arg(long, default_value_t = 20.0)]
    noise_std: f64,
    /// False-positive sphere `x,y,z,radius[,hu]` painted into the volume only.
    #[arg(long, value_parser = parse_blob, allow_hyphen_values = true)]
    blob: Option<Blob>,
    /// Gzip the output files.
    #[arg(long)]
    gzip: bool,
}

#[derive(Debug, Subcommand)]
enum WeightsCommand {
    /// He-normal initialization of a U-Net.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        #[arg(long, default_value_t = 8)]
        base_width: usize,
        #[arg(long, default_value_t = 2)]
        in_channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the tensors in a weight file.
    Inspect { path: PathBuf },
}

fn parse_spacing(value: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> =
        value.split(',').map(|s| s.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v.as_slice() {
        [s] => Ok([*s; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(format!("spacing '{value}' needs 1 or 3 values")),
    }
}

fn parse_blob(value: &str) -> Result<Blob, String> {
    let v: Vec<f64> =
        value.split(',').map(|s| s.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match *v.as_slice() {
        [x, y, z, r] => Ok(Blob { center: [x, y, z], radius: r, hu: 150.0 }),
        [x, y, z, r, hu] => Ok(Blob { center: [x, y, z], radius: r, hu: hu as f32 }),
        _ => Err(format!("blob '{value}' must be x,y,z,radius[,hu]")),
    }
}

fn load_unet(path: &Path) -> Result<UNet, CliError> {
    Ok(UNet::from_weights(&load_weights(path)?)?)
}

fn cmd_segment(args: &SegmentArgs) -> Result<Value, CliError> {
    let cfg = match &args.config {
        Some(p) => PipelineConfigFile::load(p)?,
        None => PipelineConfigFile::default(),
    };
    let vol = read_volume(&args.input)?;
    info!("read {} with shape {:?}", args.input.display(), vol.shape());

    let (coarse, fine): (Box<dyn Backend>, Vec<Box<dyn Backend>>) = match args.backend {
        BackendKind::Analytic => (Box::new(cfg.analytic), vec![Box::new(cfg.analytic)]),
        BackendKind::Unet => {
            if cfg.models.is_empty() {
                return Err(CliError::Usage("the unet backend needs at least one `model` path in --config".into()));
            }
            let fine = cfg
                .models
                .iter()
                .map(|p| load_unet(p).map(|n| Box::new(n) as Box<dyn Backend>))
                .collect::<Result<Vec<_>, _>>()?;
            let coarse: Box<dyn Backend> = match &cfg.coarse_model {
                Some(p) => Box::new(load_unet(p)?),
                None => Box::new(load_unet(&cfg.models[0])?),
            };
            (coarse, fine)
        }
    };
    let fine_refs: Vec<&dyn Backend> = fine.iter().map(|b| b.as_ref()).collect();
    let result = segment(&vol, coarse.as_ref(), &fine_refs, &cfg.seg)?;
    write_mask(&result.mask, &args.output)?;
    Ok(json!({
        "command": "segment",
        "output": args.output.display().to_string(),
        "backend": coarse.name(),
        "shape": vol.shape(),
        "foreground_voxels": result.mask.count(),
        "roi": {"lo": result.location.roi.lo, "hi": result.location.roi.hi},
        "refine_iterations": result.refine_regions.len(),
    }))
}

/// Case id of a NIfTI file name, or `None` for other files.
fn case_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_owned)
}

fn list_cases(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(e.kind(), format!("cannot list {}: {e}", dir.display())))?;
    let mut cases = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Internal(e.to_string()))?.path();
        if let Some(id) = case_id(&path) {
            if let Some(prev) = cases.insert(id.clone(), path) {
                warn!("case {id} appears twice; ignoring {}", prev.display());
            }
        }
    }
    Ok(cases)
}

fn cmd_eval(args: &EvalArgs) -> Result<Value, CliError> {
    let preds = list_cases(&args.pred)?;
    let gts = list_cases(&args.gt)?;
    let mut ids: Vec<&String> = gts.keys().chain(preds.keys()).collect();
    ids.sort();
    ids.dedup();
    let cases: Vec<CaseMetrics> = ids
        .into_iter()
        .map(|id| match (preds.get(id), gts.get(id)) {
            (Some(p), Some(g)) => match (read_mask(p), read_mask(g)) {
                // Distances are measured on the ground-truth grid.
                (Ok(pred), Ok(gt)) => match pred.with_spacing(gt.spacing()) {
                    Ok(pred) => CaseMetrics::evaluate(id.as_str(), &pred, &gt),
                    Err(e) => CaseMetrics::failed(id.as_str(), e.to_string()),
                },
                (Err(e), _) | (_, Err(e)) => CaseMetrics::failed(id.as_str(), e.to_string()),
            },
            (None, _) => CaseMetrics::failed(id.as_str(), "no prediction"),
            (_, None) => CaseMetrics::failed(id.as_str(), "no ground truth"),
        })
        .collect();
    let report = EvalReport::from_cases(cases);
    let write = |path: &Path, text: String| {
        fs::write(path, text).map_err(|e| io_error(e.kind(), format!("cannot write {}: {e}", path.display())))
    };
    write(&args.report, report.to_csv())?;
    if let Some(j) = &args.json {
        write(j, format!("{}\n", report.to_json()))?;
    }
    let full = report.to_json();
    Ok(json!({
        "command": "eval",
        "report": args.report.display().to_string(),
        "cases": report.cases.len(),
        "failures": report.failures(),
        "mean_dice": full["mean_dice"],
        "mean_hd_mm": full["mean_hd_mm"],
    }))
}

fn cmd_phantom(args: &PhantomArgs) -> Result<Value, CliError> {
    let spec = PhantomSpec {
        shape: args.shape,
        spacing: args.spacing,
        seed: args.seed,
        trunk_radius: args.trunk_radius,
        branch_radius: args.branch_radius,
        branch_count: args.branches,
        trunk_hu: args.trunk_hu,
        branch_hu: args.branch_hu,
        background_hu: args.background_hu,
        noise_std: args.noise_std,
        blob: args.blob,
    };
    let (vol, mask) = generate_phantom(&spec)?;
    let ext = if args.gzip { "nii.gz" } else { "nii" };
    let prefix = args.out_prefix.display();
    let vol_path = PathBuf::from(format!("{prefix}_volume.{ext}"));
    let mask_path = PathBuf::from(format!("{prefix}_mask.{ext}"));
    write_volume(&vol, &vol_path)?;
    write_mask(&mask, &mask_path)?;
    Ok(json!({
        "command": "phantom",
        "volume": vol_path.display().to_string(),
        "mask": mask_path.display().to_string(),
        "shape": spec.shape,
        "foreground_voxels": mask.count(),
    }))
}

fn cmd_weights(cmd: &WeightsCommand) -> Result<Value, CliError> {
    match cmd {
        WeightsCommand::Init { out, levels, base_width, in_channels, seed } => {
            if *levels == 0 || *base_width == 0 || *in_channels == 0 {
                return Err(CliError::Usage("levels, base width and input channels must be positive".into()));
            }
            let arch = UNetArch::classic(*levels, *base_width, *in_channels);
            let weights = init_weights(&arch, *seed);
            save_weights(&weights, out)?;
            Ok(json!({
                "command": "weights init",
                "path": out.display().to_string(),
                "widths": arch.widths,
                "in_channels": arch.in_channels,
                "tensors": weights.tensors().len(),
                "parameters": weights.parameter_count(),
            }))
        }
        WeightsCommand::Inspect { path } => {
            let weights = load_weights(path)?;
            let tensors: Vec<Value> =
                weights.tensors().iter().map(|t| json!({"name": t.name, "dims": t.dims})).collect();
            let arch = UNetArch::infer_from(&weights)
                .map(|a| json!({"widths": a.widths, "in_channels": a.in_channels, "spatial_multiple": a.spatial_multiple()}))
                .unwrap_or(Value::Null);
            Ok(json!({
                "command": "weights inspect",
                "path": path.display().to_string(),
                "parameters": weights.parameter_count(),
                "architecture": arch,
                "tensors": tensors,
            }))
        }
    }
}

fn run(cli: &Cli) -> Result<Value, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Internal(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Weights(w) => cmd_weights(w),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("paseg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
