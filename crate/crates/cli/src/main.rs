//! `calib3d`: synthesize, fit, apply and evaluate post-hoc calibrators for
//! point-cloud segmentation logits.
//!
//! Exit codes: 0 on success, 1 on invalid input or parameters, 2 on I/O
//! failure. Machine-readable summaries go to stdout; logs go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calib3d::calibrators::Method;
use calib3d::eval::{dataset_outcomes, outcomes_from_predictions, scan_outcomes, scan_predictions};
use calib3d::io::{self, ParamsFile, Split};
use calib3d::metrics::evaluate;
use calib3d::optim::{fit, FitConfig, ThresholdEstimator};
use calib3d::prob::EntropyKind;
use calib3d::synth::{self, SynthConfig};
use calib3d::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "calib3d", version, about = "Post-hoc confidence calibration for 3D semantic segmentation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Seed for data generation, batch shuffling and MetaC's random branch.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-scan work (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scans and a manifest with an 80/20 fit/eval split.
    Synth(SynthArgs),
    /// Fit a calibrator and write its parameters.
    Fit(FitArgs),
    /// Write per-scan calibrated prediction sidecar files.
    Apply(ApplyArgs),
    /// Compute ECE, reliability bins, depth profile and mIoU.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Calibrated,
    TempDistort,
    DepthDistort,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 10)]
    scans: usize,
    #[arg(long, default_value_t = 1024)]
    points: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Logit scale for the temp-distort preset.
    #[arg(long, default_value_t = 2.5)]
    tau: f64,
    /// Depth slope of the logit scale for the depth-distort preset.
    #[arg(long, default_value_t = 0.05)]
    k1: f64,
    /// Depth offset of the logit scale for the depth-distort preset.
    #[arg(long, default_value_t = 1.0)]
    k2: f64,
    /// Symmetric Dirichlet concentration of the class distributions.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 50.0)]
    radius: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Temps,
    Logis,
    Diris,
    Metac,
    Depts,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Temps => Method::TempS,
            MethodArg::Logis => Method::LogiS,
            MethodArg::Diris => Method::DiriS,
            MethodArg::Metac => Method::MetaC,
            MethodArg::Depts => Method::DeptS,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FitSplit {
    Fit,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalSplit {
    Eval,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EntropyArg {
    Shannon,
    Conf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Midpoint,
    Histogram,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "fit")]
    split: FitSplit,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    wd: f64,
    #[arg(long, default_value_t = 8)]
    batch_scans: usize,
    #[arg(long, value_enum, default_value = "shannon")]
    entropy: EntropyArg,
    /// Fixed entropy threshold in nats (metac, depts).
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum, default_value = "midpoint")]
    eta_estimator: EstimatorArg,
    /// Balanced correct/incorrect subsampling of each DeptS batch.
    #[arg(long)]
    balanced: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    split: EvalSplit,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    split: EvalSplit,
    /// Calibrator applied on the fly; uncalibrated when absent.
    #[arg(long, conflicts_with = "sidecars")]
    params: Option<PathBuf>,
    /// Directory of sidecar files written by `apply`.
    #[arg(long)]
    sidecars: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    reliability_csv: Option<PathBuf>,
    #[arg(long)]
    reliability_svg: Option<PathBuf>,
    /// Include the 5 m depth-bin profile in the report.
    #[arg(long)]
    depth_profile: bool,
}

fn eval_split(s: EvalSplit) -> Split {
    match s {
        EvalSplit::Eval => Split::Eval,
        EvalSplit::All => Split::All,
    }
}

fn sidecar_name(scan: &str) -> String {
    let stem = Path::new(scan).file_stem().and_then(|s| s.to_str()).unwrap_or(scan);
    format!("{stem}.c3dc")
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn run_synth(args: SynthArgs, seed: u64) -> Result<(), Error> {
    let config = SynthConfig {
        n_scans: args.scans,
        points_per_scan: args.points,
        n_classes: args.classes,
        scene_radius: args.radius,
        seed,
        dirichlet_alpha: args.alpha,
    };
    let base = synth::gen_calibrated(&config)?;
    let dataset = match args.preset {
        Preset::Calibrated => base,
        Preset::TempDistort => synth::distort_temperature(&base, args.tau)?,
        Preset::DepthDistort => synth::distort_depth(&base, args.k1, args.k2)?,
    };
    let (fit_idx, eval_idx) = synth::split_indices(dataset.scans.len(), seed);
    let manifest = io::write_dataset(&dataset, &args.out, &fit_idx, &eval_idx)?;
    info!("wrote {} scans to {}", dataset.scans.len(), args.out.display());
    print(json!({
        "manifest": manifest.display().to_string(),
        "scans": dataset.scans.len(),
        "fit": fit_idx.len(),
        "eval": eval_idx.len(),
    }));
    Ok(())
}

fn run_fit(args: FitArgs, seed: u64) -> Result<(), Error> {
    let split = match args.split {
        FitSplit::Fit => Split::Fit,
        FitSplit::All => Split::All,
    };
    let (_, names, dataset) = io::load_split(&args.data, split)?;
    info!("fitting on {} scans", names.len());
    let config = FitConfig {
        epochs: args.epochs,
        lr: args.lr,
        weight_decay: args.wd,
        batch_scans: args.batch_scans,
        seed,
        entropy_kind: match args.entropy {
            EntropyArg::Shannon => EntropyKind::Shannon,
            EntropyArg::Conf => EntropyKind::ConfEntropy,
        },
        eta: args.eta,
        eta_estimator: match args.eta_estimator {
            EstimatorArg::Midpoint => ThresholdEstimator::Midpoint,
            EstimatorArg::Histogram => ThresholdEstimator::Histogram,
        },
        balanced_sampling: args.balanced,
        ..FitConfig::default()
    };
    let method = Method::from(args.method);
    let result = fit(method, &dataset, &config)?;
    let file = ParamsFile::new(&result.params, dataset.n_classes, Some(result.meta.clone()));
    io::write_params(&file, &args.out)?;
    print(json!({
        "method": method.name(),
        "initial_nll": result.meta.initial_nll,
        "final_nll": result.meta.final_nll,
        "eta": result.meta.eta,
        "params": file.params,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

fn run_apply(args: ApplyArgs, seed: u64) -> Result<(), Error> {
    let (file, params) = io::read_params(&args.params)?;
    let (manifest, names, dataset) = io::load_split(&args.data, eval_split(args.split))?;
    if file.s_classes != manifest.n_classes {
        return Err(Error::DimensionMismatch { expected: manifest.n_classes, actual: file.s_classes });
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    let all_scans = manifest.split_paths(Split::All);
    use rayon::prelude::*;
    let preds = names
        .par_iter()
        .zip(&dataset.scans)
        .map(|(name, scan)| {
            // MetaC streams are keyed by the scan's manifest position so a
            // scan gets the same draws regardless of the split
            let index = all_scans.iter().position(|s| s == name).unwrap_or(0);
            scan_predictions(Some(&params), scan, index, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (name, p) in names.iter().zip(&preds) {
        io::write_sidecar(p, args.out.join(sidecar_name(name)))?;
    }
    print(json!({ "method": params.method().name(), "sidecars": names.len(), "out": args.out.display().to_string() }));
    Ok(())
}

fn run_eval(args: EvalArgs, seed: u64) -> Result<(), Error> {
    let (manifest, names, dataset) = io::load_split(&args.data, eval_split(args.split))?;
    let all_scans = manifest.split_paths(Split::All);
    let (outcomes, method) = if let Some(dir) = &args.sidecars {
        let preds = names
            .iter()
            .map(|n| io::read_sidecar(dir.join(sidecar_name(n))))
            .collect::<Result<Vec<_>, _>>()?;
        (outcomes_from_predictions(&dataset, &preds)?, "sidecar".to_string())
    } else if let Some(path) = &args.params {
        let (file, params) = io::read_params(path)?;
        if file.s_classes != manifest.n_classes {
            return Err(Error::DimensionMismatch {
                expected: manifest.n_classes,
                actual: file.s_classes,
            });
        }
        use rayon::prelude::*;
        let outcomes = names
            .par_iter()
            .zip(&dataset.scans)
            .map(|(name, scan)| {
                let index = all_scans.iter().position(|s| s == name).unwrap_or(0);
                scan_outcomes(Some(&params), scan, index, seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        (outcomes, params.method().name().to_string())
    } else {
        (dataset_outcomes(None, &dataset, seed)?, "uncal".to_string())
    };
    let mut report = evaluate(&outcomes, dataset.n_classes, args.bins, &method).map_err(|e| match e {
        Error::EmptyScan { scan } => Error::Validation {
            path: args.data.clone(),
            message: format!("scan {} has no valid points", names[scan]),
        },
        other => other,
    })?;
    if !args.depth_profile {
        report.depth_profile.clear();
    }
    io::write_report(&report, &args.report)?;
    if let Some(p) = &args.reliability_csv {
        io::write_reliability_csv(&report.reliability, p)?;
    }
    if let Some(p) = &args.reliability_svg {
        io::write_reliability_svg(&report.reliability, p)?;
    }
    print(json!({
        "method": report.method,
        "dataset_ece": report.dataset_ece,
        "ece_pct": report.ece_pct,
        "miou": report.miou,
        "n_scans": report.n_scans,
        "report": args.report.display().to_string(),
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.global.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let seed = cli.global.seed;
    let result = match cli.command {
        Command::Synth(a) => run_synth(a, seed),
        Command::Fit(a) => run_fit(a, seed),
        Command::Apply(a) => run_apply(a, seed),
        Command::Eval(a) => run_eval(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::DegenerateSplit { .. }) {
                eprintln!("hint: pass --eta <nats> to set the entropy threshold manually");
            }
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
