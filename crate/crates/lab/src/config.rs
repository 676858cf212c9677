//! Run configuration: JSON file + 1:1 CLI flag overrides. The fully
//! resolved configuration is written verbatim into every run directory so
//! a run can be re-executed from it.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use csi_core::arch::{ArchitectureKind, Gamma, ModelDims};
use csi_core::channel::GeneratorConfig;

use crate::dataset::SplitCounts;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Stamped at resolution time; informational.
    pub command: String,
    pub seed: u64,
    /// Working precision: 32 (training) or 64 (verification).
    pub precision: u32,
    /// csinet | rec | pr.
    pub arch: String,
    /// Compression ratio as an exact fraction, e.g. "1/16".
    pub gamma: String,
    /// Temporal correlation factor of the generated sequences.
    pub alpha: f64,
    pub antennas: usize,
    pub subcarriers: usize,
    pub delay_rows: usize,
    pub steps: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub quantize_bits: Option<u8>,
    /// Track normalization running statistics during training. Off by
    /// default: the lagged statistics feed back into the forward pass and
    /// measurably destabilize training at these dataset sizes, so the
    /// normalization layers default to their identity statistics plus the
    /// trainable per-channel scale and shift.
    pub norm_update: bool,
    pub norm_momentum: f64,
    /// Decoder-only fine-tuning epochs on dequantized codewords (0 = off).
    pub finetune_epochs: usize,
    pub min_paths: usize,
    pub max_paths: usize,
    /// Dataset directory (gen-data output; train/eval input).
    pub data_dir: Option<String>,
    /// Weights file for eval.
    pub weights: Option<String>,
    /// Dataset split used by eval.
    pub split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 1,
            precision: 32,
            arch: "rec".into(),
            gamma: "1/16".into(),
            alpha: 0.1,
            antennas: 32,
            subcarriers: 1024,
            delay_rows: 32,
            steps: 4,
            train_count: 2000,
            val_count: 300,
            test_count: 300,
            epochs: 100,
            batch: 64,
            lr: 1e-3,
            patience: 10,
            quantize_bits: None,
            norm_update: false,
            norm_momentum: 0.9,
            finetune_epochs: 0,
            min_paths: 3,
            max_paths: 8,
            data_dir: None,
            weights: None,
            split: "test".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != 32 && self.precision != 64 {
            bail!("precision must be 32 or 64, got {}", self.precision);
        }
        if self.batch == 0 {
            bail!("batch size must be at least 1");
        }
        ArchitectureKind::parse(&self.arch)?;
        Gamma::parse(&self.gamma)?;
        if self.alpha < 0.0 {
            bail!("alpha must be >= 0, got {}", self.alpha);
        }
        if !["train", "val", "test"].contains(&self.split.as_str()) {
            bail!("split must be train | val | test, got {:?}", self.split);
        }
        if let Some(bits) = self.quantize_bits {
            if !(1..=16).contains(&bits) {
                bail!("quantize_bits must be in 1..=16, got {bits}");
            }
        }
        self.dims()?;
        Ok(())
    }

    pub fn arch_kind(&self) -> Result<ArchitectureKind> {
        Ok(ArchitectureKind::parse(&self.arch)?)
    }

    pub fn dims(&self) -> Result<ModelDims> {
        Ok(ModelDims::new(
            self.antennas,
            self.subcarriers,
            self.delay_rows,
            self.steps,
            Gamma::parse(&self.gamma)?,
        )?)
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_count,
            val: self.val_count,
            test: self.test_count,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            min_paths: self.min_paths,
            max_paths: self.max_paths,
        }
    }

    /// Write the resolved configuration into the run directory.
    pub fn write_into(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating run directory {}", out_dir.display()))?;
        let json = serde_json::to_string_pretty(self)?;
        fs::write(out_dir.join("config.json"), json + "\n")?;
        Ok(())
    }
}
