//! Command-line front end. Every flag can also be set through an environment
//! variable `DEEPPRIOR_<FLAG>` (upper case, dashes as underscores).
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

pub mod ablation;
pub mod record;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data_io::{
    build_dataset, export_slice, load_projections, load_volume, manifest_path, save_volume, sha256_hex,
    DatasetConfig, DisplayWindow,
};
use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, Window};
use crate::geometry::subsample_views;
use crate::metrics_stats::{
    kendall_w, noninferiority_sample_size, weighted_kappa, DataRange, MetricReport, ReaderTable, SampleSizeInputs,
};
use crate::projector::ProjectionSet;
use crate::tensor::Axis;
use crate::training::{
    infer, train_direct, train_stage1, train_stage2, train_stage3, with_schedule, write_loss_csv, StagePipeline,
    StageRun, TrainConfig, TrainingData,
};

pub use ablation::{ablate, ablation_csv, ablation_text, evaluate_fdk, evaluate_pipeline, summarize, AblationRow, CaseResult, Summary};
pub use record::{default_log_path, read_log, RunLog, RunRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "deepprior", version, about = "Sparse-view CBCT reconstruction with a learned codebook prior")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads for projection and FDK (0 = all cores).
    #[arg(long, global = true, env = "DEEPPRIOR_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Append-only run log; defaults to runs.jsonl beside the output.
    #[arg(long, global = true, env = "DEEPPRIOR_RUN_LOG")]
    pub run_log: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate phantoms, projections and FDK volumes with a manifest.
    Simulate(SimulateArgs),
    /// FDK reconstruction of a projection file.
    ReconstructFdk(FdkArgs),
    /// Train the full-view autoencoder and codebook (or the direct variant).
    TrainStage1(TrainArgs),
    /// Train the sparse-view encoder and code classifier.
    TrainStage2(TrainArgs),
    /// Train the fusion module and fine-tune the sparse-view encoder.
    TrainStage3(TrainArgs),
    /// Reconstruct a volume from sparse projections with a checkpoint.
    Infer(InferArgs),
    /// PSNR and SSIM of a volume against a reference.
    Evaluate(EvaluateArgs),
    /// Compare full, without-stage-3 and without-stages-2-3 checkpoints.
    Ablate(AblateArgs),
    /// Reader-study statistics.
    Stats(StatsArgs),
    /// Write PNG slices of a volume.
    ExportSlices(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Dataset config (TOML); defaults apply when absent.
    #[arg(long, env = "DEEPPRIOR_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "DEEPPRIOR_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "DEEPPRIOR_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FdkArgs {
    /// Projection file.
    #[arg(long, env = "DEEPPRIOR_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "DEEPPRIOR_OUT")]
    pub out: PathBuf,
    /// Keep every n-th view of a full-view file first.
    #[arg(long, env = "DEEPPRIOR_RATIO", value_parser = ratio_parser)]
    pub ratio: Option<usize>,
    #[arg(long, env = "DEEPPRIOR_WINDOW", default_value = "hann")]
    pub window: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (TOML); the desk defaults apply when absent.
    #[arg(long, env = "DEEPPRIOR_CONFIG")]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long, env = "DEEPPRIOR_DATA")]
    pub data: PathBuf,
    /// Checkpoint to write; losses go to `<out>.metrics.csv`.
    #[arg(long, env = "DEEPPRIOR_OUT")]
    pub out: PathBuf,
    /// Previous-stage checkpoint (stages 2 and 3).
    #[arg(long, env = "DEEPPRIOR_FROM")]
    pub from: Option<PathBuf>,
    #[arg(long, env = "DEEPPRIOR_SEED")]
    pub seed: Option<u64>,
    /// Sparse view ratio to learn.
    #[arg(long, env = "DEEPPRIOR_RATIO", value_parser = ratio_parser)]
    pub ratio: Option<usize>,
    /// Stage 1 only: map sparse-view to full-view volumes without codebook.
    #[arg(long)]
    pub direct: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Projection file (sparse, or full with --ratio).
    #[arg(long, env = "DEEPPRIOR_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "DEEPPRIOR_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "DEEPPRIOR_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "DEEPPRIOR_RATIO", value_parser = ratio_parser)]
    pub ratio: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Fixed data range; the reference's own range when absent.
    #[arg(long)]
    pub range: Option<f64>,
    /// Per-slice CSV.
    #[arg(long, env = "DEEPPRIOR_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Dataset manifest.
    #[arg(long, env = "DEEPPRIOR_DATA")]
    pub data: PathBuf,
    #[arg(long)]
    pub full: PathBuf,
    #[arg(long)]
    pub without_s3: PathBuf,
    #[arg(long)]
    pub without_s23: PathBuf,
    #[arg(long, env = "DEEPPRIOR_RATIO", default_value_t = 6, value_parser = ratio_parser)]
    pub ratio: usize,
    /// CSV table.
    #[arg(long, env = "DEEPPRIOR_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(subcommand)]
    pub test: StatsCommand,
}

#[derive(Subcommand, Debug)]
pub enum StatsCommand {
    /// Linear-weighted kappa of two raters (CSV with two rating columns).
    Kappa {
        #[arg(long)]
        data: PathBuf,
    },
    /// Kendall's W (CSV: one row per item, one column per reader).
    Kendall {
        #[arg(long)]
        data: PathBuf,
    },
    /// Paired non-inferiority sample size.
    SampleSize {
        #[arg(long, default_value_t = 0.025)]
        alpha: f64,
        #[arg(long, default_value_t = 0.9)]
        power: f64,
        #[arg(long, default_value_t = 0.23)]
        sigma_d: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 0.02)]
        mu_d: f64,
        #[arg(long, default_value_t = 0.2)]
        dropout: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    Axial,
    Coronal,
    Sagittal,
    All,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Volume file.
    #[arg(long, env = "DEEPPRIOR_DATA")]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, env = "DEEPPRIOR_OUT")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub axis: AxisArg,
    /// Slice index; the central slice when absent.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long, requires = "width")]
    pub level: Option<f64>,
    #[arg(long, requires = "level")]
    pub width: Option<f64>,
}

fn ratio_parser(s: &str) -> std::result::Result<usize, String> {
    let r: usize = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if crate::geometry::SUPPORTED_RATIOS.contains(&r) {
        Ok(r)
    } else {
        Err(format!("ratio must be one of {:?}", crate::geometry::SUPPORTED_RATIOS))
    }
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if cli.threads > 0 {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn log_path(cli: &Cli, out: &Path) -> PathBuf {
    cli.run_log.clone().unwrap_or_else(|| default_log_path(out))
}

fn thin(proj: ProjectionSet, ratio: Option<usize>) -> Result<ProjectionSet> {
    match ratio {
        None | Some(1) => Ok(proj),
        Some(r) => proj.select(&subsample_views(&proj.geometry, r)?),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::ReconstructFdk(a) => reconstruct(cli, a),
        Command::TrainStage1(a) => train(cli, a, 1),
        Command::TrainStage2(a) => train(cli, a, 2),
        Command::TrainStage3(a) => train(cli, a, 3),
        Command::Infer(a) => infer_cmd(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Ablate(a) => ablate_cmd(cli, a),
        Command::Stats(a) => stats(&a.test),
        Command::ExportSlices(a) => export(cli, a),
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let mut rec = RunLog::start("simulate");
    let mut cfg = match &a.config {
        Some(p) => {
            rec.input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<DatasetConfig>(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
        None => DatasetConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest = build_dataset(&cfg, &a.out)?;
    let text = toml::to_string(&cfg).expect("dataset config serializes");
    rec.config(sha256_hex(text.as_bytes()), Some(cfg.seed));
    rec.output(&manifest_path(&a.out))?;
    println!("{} phantoms written to {}", manifest.entries.len(), a.out.display());
    rec.finish(&log_path(cli, &a.out))?;
    Ok(())
}

fn reconstruct(cli: &Cli, a: &FdkArgs) -> Result<()> {
    let mut rec = RunLog::start("reconstruct-fdk");
    rec.input(&a.data)?;
    let window: Window = a.window.parse()?;
    let proj = thin(load_projections(&a.data)?, a.ratio)?;
    let vol = fdk_reconstruct(&proj, proj.geometry.volume_shape, window)?;
    save_volume(&a.out, &vol)?;
    rec.config(sha256_hex(format!("{window} {:?}", a.ratio).as_bytes()), None);
    rec.output(&a.out)?;
    rec.finish(&log_path(cli, &a.out))?;
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs, stage: u8) -> Result<()> {
    let mut rec = RunLog::start(&format!("train-stage{stage}"));
    let mut cfg = match &a.config {
        Some(p) => {
            rec.input(p)?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::desk(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.ratio {
        cfg.sparse_ratio = r;
    }
    cfg.validate()?;
    rec.input(&a.data)?;
    let data = TrainingData::from_manifest(&a.data, cfg.sparse_ratio)?;
    let abort = a.out.with_extension("last_good.ckpt");
    let previous = |what: &str| -> Result<StagePipeline> {
        let p = a
            .from
            .as_ref()
            .ok_or_else(|| Error::Parameter(format!("train-stage{stage} needs --from <{what} checkpoint>")))?;
        StagePipeline::load(p)
    };
    if a.direct && stage != 1 {
        return Err(Error::Parameter("--direct applies to train-stage1 only".into()));
    }
    let run: StageRun = match stage {
        1 if a.direct => train_direct(&data, &cfg, Some(&abort))?,
        1 => train_stage1(&data, &cfg, Some(&abort))?,
        2 => {
            let p = with_schedule(&previous("stage-1")?, &cfg)?;
            train_stage2(&data, &p, Some(&abort))?
        }
        _ => {
            let p = with_schedule(&previous("stage-2")?, &cfg)?;
            train_stage3(&data, &p, Some(&abort))?
        }
    };
    if let Some(p) = &a.from {
        rec.input(p)?;
    }
    run.pipeline.save(&a.out)?;
    let csv = metrics_path(&a.out);
    write_loss_csv(&csv, &run.log)?;
    rec.config(cfg.hash(), Some(cfg.seed));
    rec.output(&a.out)?;
    rec.output(&csv)?;
    rec.finish(&log_path(cli, &a.out))?;
    Ok(())
}

/// Loss log written beside a checkpoint.
pub fn metrics_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

fn infer_cmd(cli: &Cli, a: &InferArgs) -> Result<()> {
    let mut rec = RunLog::start("infer");
    rec.input(&a.data)?;
    rec.input(&a.checkpoint)?;
    let pipeline = StagePipeline::load(&a.checkpoint)?;
    let proj = thin(load_projections(&a.data)?, a.ratio)?;
    let vol = infer(&proj, &pipeline)?;
    save_volume(&a.out, &vol)?;
    rec.config(pipeline.config.hash(), Some(pipeline.config.seed));
    rec.output(&a.out)?;
    rec.finish(&log_path(cli, &a.out))?;
    Ok(())
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let reference = load_volume(&a.reference)?;
    let test = load_volume(&a.test)?;
    let range = a.range.map(DataRange::Fixed).unwrap_or(DataRange::Auto);
    let report = MetricReport::compute(&reference, &test, range)?;
    println!("psnr_db {}", report.psnr);
    println!("identical {}", report.psnr.is_identical());
    println!("ssim {:.6}", report.ssim);
    println!("data_range {:.6}", report.data_range);
    if let Some(out) = &a.out {
        let mut rec = RunLog::start("evaluate");
        rec.input(&a.reference)?;
        rec.input(&a.test)?;
        let mut w = csv::Writer::from_path(out).map_err(|e| Error::format(out, e.to_string()))?;
        let err = |e: csv::Error| Error::format(out, e.to_string());
        w.write_record(["slice", "psnr_db", "ssim"]).map_err(err)?;
        for s in &report.slices {
            w.write_record([s.slice.to_string(), s.psnr.to_string(), format!("{:.6}", s.ssim)])
                .map_err(err)?;
        }
        w.write_record(["all".to_string(), report.psnr.to_string(), format!("{:.6}", report.ssim)])
            .map_err(err)?;
        w.flush().map_err(|e| Error::io(out, e))?;
        rec.output(out)?;
        rec.finish(&log_path(cli, out))?;
    }
    Ok(())
}

fn ablate_cmd(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let variants = [
        ("full", a.full.as_path()),
        ("without-s3", a.without_s3.as_path()),
        ("without-s2-s3", a.without_s23.as_path()),
    ];
    let rows = ablate(&a.data, &variants, a.ratio)?;
    let baseline = summarize(&evaluate_fdk(&a.data, a.ratio)?);
    print!("{}", ablation_text(&rows, Some(&baseline)));
    if let Some(out) = &a.out {
        let mut rec = RunLog::start("ablate");
        rec.input(&a.data)?;
        for (_, p) in variants {
            rec.input(p)?;
        }
        std::fs::write(out, ablation_csv(&rows)).map_err(|e| Error::io(out, e))?;
        rec.output(out)?;
        rec.finish(&log_path(cli, out))?;
    }
    Ok(())
}

/// Integer ratings from a CSV with a header row.
pub fn read_ratings(path: &Path) -> Result<Vec<Vec<i64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("non-integer rating: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}

fn stats(cmd: &StatsCommand) -> Result<()> {
    match cmd {
        StatsCommand::Kappa { data } => {
            let rows = read_ratings(data)?;
            if rows.iter().any(|r| r.len() != 2) {
                return Err(Error::format(data, "kappa needs exactly two rating columns"));
            }
            let a: Vec<i64> = rows.iter().map(|r| r[0]).collect();
            let b: Vec<i64> = rows.iter().map(|r| r[1]).collect();
            let k = weighted_kappa(&a, &b)?;
            println!("kappa {:.6}", k.kappa);
            println!("std_error {:.6}", k.std_error);
            println!("z {:.6}", k.z);
            println!("p_value {:.6e}", k.p_value);
            println!("band {:?}", k.band);
        }
        StatsCommand::Kendall { data } => {
            let k = kendall_w(&ReaderTable::new(read_ratings(data)?)?)?;
            println!("w {:.6}", k.w);
            println!("chi_square {:.6}", k.chi_square);
            println!("df {}", k.df);
            println!("p_value {:.6e}", k.p_value);
            println!("band {:?}", k.band);
        }
        StatsCommand::SampleSize { alpha, power, sigma_d, delta, mu_d, dropout } => {
            let s = noninferiority_sample_size(&SampleSizeInputs {
                alpha: *alpha,
                beta: 1.0 - power,
                sigma_d: *sigma_d,
                delta: *delta,
                mu_d: *mu_d,
                dropout_fraction: *dropout,
            })?;
            println!("raw {:.4}", s.raw);
            println!("required {}", s.n_required);
            println!("enrolled {}", s.n_enrolled);
        }
    }
    Ok(())
}

fn export(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let mut rec = RunLog::start("export-slices");
    rec.input(&a.data)?;
    let vol = load_volume(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let window = a.level.zip(a.width).map(|(level, width)| DisplayWindow { level, width });
    let axes: Vec<Axis> = match a.axis {
        AxisArg::Axial => vec![Axis::Axial],
        AxisArg::Coronal => vec![Axis::Coronal],
        AxisArg::Sagittal => vec![Axis::Sagittal],
        AxisArg::All => Axis::ALL.to_vec(),
    };
    let stem = a.data.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    for axis in axes {
        let extent = match axis {
            Axis::Axial => vol.shape[0],
            Axis::Coronal => vol.shape[1],
            Axis::Sagittal => vol.shape[2],
        };
        let index = a.index.unwrap_or(extent / 2);
        let name = format!("{stem}_{}_{index:03}.png", format!("{axis:?}").to_lowercase());
        let path = a.out.join(name);
        export_slice(&vol, axis, index, window, &path)?;
        rec.output(&path)?;
    }
    rec.finish(&log_path(cli, &a.out))?;
    Ok(())
}
