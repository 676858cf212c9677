//! csi-lab: generate channel datasets, train and evaluate the CSI
//! feedback networks, audit parameter counts, and run sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use csi_core::arch::{ArchitectureKind, ArchitectureSpec, Gamma, ModelDims};
use csi_core::arch::{bias_free_parallel_uncompression, bias_free_serial_uncompression};
use csi_lab::config::RunConfig;
use csi_lab::dataset::{build_dataset, load_dataset, GenerationConfig};
use csi_lab::evaluate::evaluate;
use csi_lab::sweep::{dims_with_codeword, run_sweep, SweepAxis};
use csi_lab::train::{train_run, TrainError, TrainSettings};
use csi_lab::weights;

#[derive(Parser)]
#[command(
    name = "csi-lab",
    version,
    about = "Recurrent CSI feedback compression laboratory",
    after_help = "Environment: CSI_THREADS caps data-generation parallelism."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test channel sequence datasets.
    GenData(CommonArgs),
    /// Train a network on a generated dataset.
    Train(CommonArgs),
    /// Evaluate saved weights on a dataset split.
    Eval(CommonArgs),
    /// Print the exact parameter audit of an architecture.
    CountParams(CommonArgs),
    /// Train/evaluate across alpha or gamma values.
    Sweep(SweepCmd),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Working precision: 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
    /// Architecture: csinet | rec | pr.
    #[arg(long)]
    arch: Option<String>,
    /// Compression ratio fraction, e.g. 1/16.
    #[arg(long)]
    gamma: Option<String>,
    /// Temporal correlation factor.
    #[arg(long)]
    alpha: Option<f64>,
    /// Dimensions as ANTENNAS,SUBCARRIERS,DELAY_ROWS,STEPS.
    #[arg(long, value_name = "NT,NC,ROWS,T")]
    dims: Option<String>,
    /// Split sizes as TRAIN,VAL,TEST.
    #[arg(long, value_name = "TRAIN,VAL,TEST")]
    counts: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Feedback quantizer bit width for evaluation.
    #[arg(long)]
    quantize_bits: Option<u8>,
    /// Update normalization running statistics during training.
    #[arg(long)]
    norm_update: Option<bool>,
    #[arg(long)]
    norm_momentum: Option<f64>,
    /// Decoder-only fine-tuning epochs on dequantized codewords.
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    min_paths: Option<usize>,
    #[arg(long)]
    max_paths: Option<usize>,
    /// Dataset directory (gen-data output, train/eval input).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weights file (eval input).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Dataset split for eval: train | val | test.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    common: CommonArgs,
    /// Sweep axis: alpha | gamma.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. 0.05,0.1,0.3 or 1/16,1/32.
    #[arg(long)]
    values: String,
}

fn resolve(args: &CommonArgs, command: &str) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.command = command.to_string();
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.precision {
        cfg.precision = v;
    }
    if let Some(v) = &args.arch {
        cfg.arch = v.clone();
    }
    if let Some(v) = &args.gamma {
        cfg.gamma = v.clone();
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(dims) = &args.dims {
        let parts: Vec<usize> = dims
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("parsing --dims {dims:?}"))?;
        if parts.len() != 4 {
            bail!("--dims expects NT,NC,ROWS,T");
        }
        cfg.antennas = parts[0];
        cfg.subcarriers = parts[1];
        cfg.delay_rows = parts[2];
        cfg.steps = parts[3];
    }
    if let Some(counts) = &args.counts {
        let parts: Vec<usize> = counts
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("parsing --counts {counts:?}"))?;
        if parts.len() != 3 {
            bail!("--counts expects TRAIN,VAL,TEST");
        }
        cfg.train_count = parts[0];
        cfg.val_count = parts[1];
        cfg.test_count = parts[2];
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.quantize_bits {
        cfg.quantize_bits = Some(v);
    }
    if let Some(v) = args.norm_update {
        cfg.norm_update = v;
    }
    if let Some(v) = args.norm_momentum {
        cfg.norm_momentum = v;
    }
    if let Some(v) = args.finetune_epochs {
        cfg.finetune_epochs = v;
    }
    if let Some(v) = args.min_paths {
        cfg.min_paths = v;
    }
    if let Some(v) = args.max_paths {
        cfg.max_paths = v;
    }
    if let Some(v) = &args.data {
        cfg.data_dir = Some(v.display().to_string());
    }
    if let Some(v) = &args.weights {
        cfg.weights = Some(v.display().to_string());
    }
    if let Some(v) = &args.split {
        cfg.split = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &CommonArgs, default: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn stamp_environment(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let stamp = format!(
        "csi-lab {}\nprecision: {}\nseed: {}\narch: {}\ngamma: {}\nprofile: {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.precision,
        cfg.seed,
        cfg.arch,
        cfg.gamma,
        if cfg!(debug_assertions) { "dev" } else { "release" },
    );
    fs::write(dir.join("env.txt"), stamp)?;
    Ok(())
}

fn cmd_gen_data(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args, "gen-data")?;
    let out = out_dir(args, "data");
    let gen = GenerationConfig {
        dims: cfg.dims()?,
        counts: cfg.counts(),
        alpha: cfg.alpha,
        seed: cfg.seed,
        generator: cfg.generator(),
        threads: None,
    };
    let summary = build_dataset(&gen, &out)?;
    cfg.write_into(&out)?;
    stamp_environment(&out, &cfg)?;
    println!(
        "generated {} train / {} val / {} test sequences into {}",
        summary.counts.train,
        summary.counts.val,
        summary.counts.test,
        out.display()
    );
    println!(
        "normalization range [{}, {}]",
        summary.norm_lo, summary.norm_hi
    );
    println!(
        "clamped entries: train {} / val {} / test {}",
        summary.clamped[0], summary.clamped[1], summary.clamped[2]
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<csi_lab::Dataset> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| anyhow!("no dataset directory; pass --data or set data_dir"))?;
    load_dataset(&Path::new(dir).join(format!("{name}.csid")))
}

fn settings_from(cfg: &RunConfig) -> Result<TrainSettings> {
    Ok(TrainSettings {
        arch: cfg.arch_kind()?,
        dims: cfg.dims()?,
        epochs: cfg.epochs,
        batch: cfg.batch,
        lr: cfg.lr,
        patience: cfg.patience,
        seed: cfg.seed,
        norm_update: cfg.norm_update,
        norm_momentum: cfg.norm_momentum,
        quantize_bits: cfg.quantize_bits,
        finetune_epochs: cfg.finetune_epochs,
    })
}

fn check_dataset_dims(ds: &csi_lab::Dataset, dims: &ModelDims) -> Result<()> {
    if ds.delay_rows != dims.delay_rows || ds.antennas != dims.antennas || ds.steps != dims.steps {
        bail!(
            "dataset dims ({} rows, {} antennas, {} steps) do not match the configured dims ({}, {}, {})",
            ds.delay_rows, ds.antennas, ds.steps,
            dims.delay_rows, dims.antennas, dims.steps
        );
    }
    Ok(())
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args, "train")?;
    let out = out_dir(args, "run");
    let train_ds = load_split(&cfg, "train")?;
    let val_ds = load_split(&cfg, "val")?;
    let settings = settings_from(&cfg)?;
    check_dataset_dims(&train_ds, &settings.dims)?;
    cfg.write_into(&out)?;
    stamp_environment(&out, &cfg)?;

    let artifacts = match cfg.precision {
        32 => train_run::<f32>(&settings, &train_ds, &val_ds, &out),
        _ => train_run::<f64>(&settings, &train_ds, &val_ds, &out),
    }?;
    let o = &artifacts.outcome;
    println!(
        "trained {} for {} epochs (best epoch {})",
        o.arch, o.epochs_run, o.best_epoch
    );
    println!(
        "checkpoint validation NMSE: {} dB ({} dB in the normalized domain)",
        o.checkpoint_val_nmse_db, o.checkpoint_val_nmse_db_normalized
    );
    if let Some(q) = o.finetuned_val_nmse_db_quantized {
        println!("fine-tuned quantized validation NMSE: {q} dB");
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args, "eval")?;
    let out = out_dir(args, "run");
    let weights_path = cfg
        .weights
        .as_ref()
        .ok_or_else(|| anyhow!("no weights file; pass --weights"))?;
    let file = weights::load(Path::new(weights_path))?;
    let ds = load_split(&cfg, &cfg.split)?;

    let kind = ArchitectureKind::parse(&file.kind)?;
    let dims = dims_with_codeword(
        ds.antennas,
        cfg.subcarriers.max(ds.delay_rows),
        ds.delay_rows,
        ds.steps,
        file.m as usize,
    );
    if 2 * dims.delay_rows * dims.antennas != file.n as usize {
        bail!(
            "weights expect N = {}, dataset snapshots have {}",
            file.n,
            2 * dims.delay_rows * dims.antennas
        );
    }
    let spec = ArchitectureSpec::new(kind, dims);
    fs::create_dir_all(&out)?;
    cfg.write_into(&out)?;
    stamp_environment(&out, &cfg)?;

    let report = match cfg.precision {
        32 => {
            let (mut params, model) = csi_core::arch::build_network::<f32>(&spec, 0)?;
            weights::apply(&file, &mut params)?;
            evaluate(&model, &params, &ds, cfg.quantize_bits, cfg.batch)?
        }
        _ => {
            let (mut params, model) = csi_core::arch::build_network::<f64>(&spec, 0)?;
            weights::apply(&file, &mut params)?;
            evaluate(&model, &params, &ds, cfg.quantize_bits, cfg.batch)?
        }
    };

    println!(
        "{} on {} split ({} sequences): NMSE {} dB (normalized-domain {} dB)",
        file.kind, cfg.split, report.sequences, report.nmse_db, report.nmse_db_normalized
    );
    println!("per-step NMSE (dB):");
    for (t, v) in report.per_step_db.iter().enumerate() {
        println!("  t{}: {v}", t + 1);
    }
    if let Some(q) = &report.quantized {
        println!("quantized ({} bits): NMSE {} dB", q.bits, q.nmse_db);
        for (t, v) in q.per_step_db.iter().enumerate() {
            println!("  t{}: {v}", t + 1);
        }
    }

    // eval.csv: one row, mirroring the printed table.
    let mut header = String::from("split,sequences,nmse_db,nmse_db_normalized,nmse_db_quantized");
    let mut row = format!(
        "{},{},{},{},{}",
        cfg.split,
        report.sequences,
        report.nmse_db,
        report.nmse_db_normalized,
        report
            .quantized
            .as_ref()
            .map(|q| q.nmse_db.to_string())
            .unwrap_or_default()
    );
    for (t, v) in report.per_step_db.iter().enumerate() {
        header.push_str(&format!(",nmse_db_t{}", t + 1));
        row.push_str(&format!(",{v}"));
    }
    fs::write(out.join("eval.csv"), format!("{header}\n{row}\n"))?;
    Ok(())
}

fn cmd_count_params(args: &CommonArgs) -> Result<()> {
    let cfg = resolve(args, "count-params")?;
    let kind = cfg.arch_kind()?;
    let dims = cfg.dims()?;
    let spec = ArchitectureSpec::new(kind, dims);
    let count = spec.count_params();
    let (n, m) = (dims.snapshot_len() as u64, dims.codeword_len as u64);

    let formula = match kind {
        ArchitectureKind::RecCsiNet => Some(bias_free_parallel_uncompression(n, m)),
        ArchitectureKind::PrRecCsiNet => Some(bias_free_serial_uncompression(n, m)),
        ArchitectureKind::CsiNet => None,
    };

    println!(
        "architecture {}, gamma {} (N={n}, M={m})",
        kind.name(),
        Gamma::parse(&cfg.gamma)?
    );
    println!("{:<20} {:>14} {:>22}", "module", "parameters", "bias-free formula");
    println!("{:<20} {:>14}", "feature_extraction", count.feature_extraction);
    println!("{:<20} {:>14}", "compression", count.compression);
    match formula {
        Some(f) => println!("{:<20} {:>14} {:>22}", "uncompression", count.uncompression, f),
        None => println!("{:<20} {:>14}", "uncompression", count.uncompression),
    }
    println!("{:<20} {:>14}", "recovery", count.recovery);
    println!("{:<20} {:>14}", "total", count.total());
    Ok(())
}

fn cmd_sweep(cmd: &SweepCmd) -> Result<()> {
    let cfg = resolve(&cmd.common, "sweep")?;
    let out = out_dir(&cmd.common, "sweep");
    let axis = SweepAxis::parse(&cmd.axis)?;
    let values: Vec<String> = cmd
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    fs::create_dir_all(&out)?;
    cfg.write_into(&out)?;
    stamp_environment(&out, &cfg)?;
    let csv = match cfg.precision {
        32 => run_sweep::<f32>(&cfg, axis, &values, &out)?,
        _ => run_sweep::<f64>(&cfg, axis, &values, &out)?,
    };
    println!("sweep table: {}", csv.display());
    println!("{}", fs::read_to_string(csv)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::CountParams(args) => cmd_count_params(args),
        Command::Sweep(cmd) => cmd_sweep(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<TrainError>()
                .map(|t| matches!(t, TrainError::NonFinite { .. }))
                .unwrap_or(false)
            {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
