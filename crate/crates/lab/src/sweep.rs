//! Parameter sweeps: train and evaluate one model per axis value with a
//! shared seed and fixed budget, emitting a CSV keyed by the value.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use csi_core::arch::{ArchitectureSpec, Gamma, ModelDims};
use csi_core::Scalar;

use crate::config::RunConfig;
use crate::dataset::{build_dataset, load_dataset, GenerationConfig};
use crate::evaluate::evaluate;
use crate::train::{train_run, TrainSettings};
use crate::weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Gamma,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "gamma" => Ok(SweepAxis::Gamma),
            other => bail!("unknown sweep axis {other:?}, expected alpha | gamma"),
        }
    }
}

fn dir_token(value: &str) -> String {
    value.replace('/', "-")
}

/// Per-value training is bit-identical to a standalone train + eval with
/// the same configuration: the sweep only varies the swept field and the
/// output directory.
pub fn run_sweep<S: Scalar>(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
) -> Result<PathBuf> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    fs::create_dir_all(out_dir)?;
    // Quantized evaluation is part of every sweep row; default to 8 bits.
    let bits = base.quantize_bits.unwrap_or(8);

    let mut rows = Vec::new();
    for value in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Alpha => {
                cfg.alpha = value
                    .parse::<f64>()
                    .with_context(|| format!("alpha value {value:?}"))?;
            }
            SweepAxis::Gamma => {
                Gamma::parse(value)?;
                cfg.gamma = value.clone();
            }
        }
        cfg.validate()?;
        let dims = cfg.dims()?;

        // Alpha changes the data; gamma reuses one dataset for all values.
        let data_dir = match axis {
            SweepAxis::Alpha => out_dir.join(format!("data_alpha_{}", dir_token(value))),
            SweepAxis::Gamma => out_dir.join("data"),
        };
        if !data_dir.join("train.csid").exists() {
            build_dataset(
                &GenerationConfig {
                    dims,
                    counts: cfg.counts(),
                    alpha: cfg.alpha,
                    seed: cfg.seed,
                    generator: cfg.generator(),
                    threads: None,
                },
                &data_dir,
            )?;
        }

        let run_dir = out_dir.join(format!("run_{}", dir_token(value)));
        let train_ds = load_dataset(&data_dir.join("train.csid"))?;
        let val_ds = load_dataset(&data_dir.join("val.csid"))?;
        let settings = TrainSettings {
            arch: cfg.arch_kind()?,
            dims,
            epochs: cfg.epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            patience: cfg.patience,
            seed: cfg.seed,
            norm_update: cfg.norm_update,
            norm_momentum: cfg.norm_momentum,
            quantize_bits: Some(bits),
            finetune_epochs: 0,
        };
        let artifacts = train_run::<S>(&settings, &train_ds, &val_ds, &run_dir)
            .map_err(|e| anyhow::anyhow!("{e}"))?;

        let test_ds = load_dataset(&data_dir.join("test.csid"))?;
        let file = weights::load(&artifacts.weights_path)?;
        let spec = ArchitectureSpec::new(settings.arch, dims);
        let (mut params, model) = csi_core::arch::build_network::<S>(&spec, 0)?;
        weights::apply(&file, &mut params)?;
        let report = evaluate(&model, &params, &test_ds, Some(bits), cfg.batch)?;

        let quantized_db = report
            .quantized
            .as_ref()
            .map(|q| q.nmse_db)
            .expect("quantized evaluation requested");
        rows.push((
            value.clone(),
            report.nmse_db,
            quantized_db,
            spec.count_params().total(),
        ));
    }

    let csv_path = out_dir.join("sweep.csv");
    let mut f = fs::File::create(&csv_path)?;
    writeln!(f, "axis_value,test_nmse_db,test_nmse_db_quantized,params_total")?;
    for (value, db, qdb, total) in rows {
        writeln!(f, "{value},{db},{qdb},{total}")?;
    }
    Ok(csv_path)
}

/// Dims helper shared with the CLI: dims of a dataset file plus an
/// explicit codeword length.
pub fn dims_with_codeword(
    antennas: usize,
    subcarriers: usize,
    delay_rows: usize,
    steps: usize,
    codeword_len: usize,
) -> ModelDims {
    ModelDims {
        antennas,
        subcarriers,
        delay_rows,
        steps,
        codeword_len,
    }
}
