//! The training loop: mini-batch Adam over shuffled sequences with BPTT
//! through all T steps, early stopping on validation NMSE, best-checkpoint
//! persistence and per-epoch metrics streaming.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use csi_core::arch::{build_network, ArchitectureKind, ArchitectureSpec, Model, ModelDims};
use csi_core::graph::Graph;
use csi_core::metrics::sequence_loss;
use csi_core::optim::{AdamConfig, AdamState};
use csi_core::params::ParameterSet;
use csi_core::rng::Prng;
use csi_core::tensor::Tensor;
use csi_core::Scalar;

use crate::dataset::Dataset;
use crate::evaluate::evaluate;
use crate::weights;

/// Substream keys for the trainer's independent random streams.
const STREAM_INIT: u64 = 0x494e4954;
const STREAM_SHUFFLE: u64 = 0x53485546;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub arch: ArchitectureKind,
    pub dims: ModelDims,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    pub norm_update: bool,
    pub norm_momentum: f64,
    pub quantize_bits: Option<u8>,
    pub finetune_epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub arch: String,
    pub seed: u64,
    pub precision: u32,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_nmse_db: f64,
    /// Validation NMSE recomputed from the saved checkpoint file, so an
    /// `eval` on the same split reproduces it exactly.
    pub checkpoint_val_nmse_db: f64,
    pub checkpoint_val_nmse_db_normalized: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub train_nmse_db: Option<f64>,
    pub aborted: bool,
    pub finetuned_val_nmse_db_quantized: Option<f64>,
}

#[derive(Debug)]
pub enum TrainError {
    /// Training loss left the finite range; the last good checkpoint is
    /// retained on disk.
    NonFinite { epoch: usize },
    Other(anyhow::Error),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::NonFinite { epoch } => {
                write!(f, "non-finite training loss in epoch {epoch}; aborted")
            }
            TrainError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<anyhow::Error> for TrainError {
    fn from(e: anyhow::Error) -> Self {
        TrainError::Other(e)
    }
}

impl From<csi_core::CsiError> for TrainError {
    fn from(e: csi_core::CsiError) -> Self {
        TrainError::Other(e.into())
    }
}

pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub metrics_path: PathBuf,
    pub weights_path: PathBuf,
}

/// Batched step inputs for the given sequence indices.
fn batch_inputs<S: Scalar>(
    g: &mut Graph<'_, S>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<Vec<csi_core::NodeId>, TrainError> {
    let n = ds.snapshot_len();
    let mut nodes = Vec::with_capacity(ds.steps);
    for t in 0..ds.steps {
        let mut buf = Vec::with_capacity(indices.len() * n);
        for &seq in indices {
            buf.extend(ds.snapshot(seq, t).iter().map(|&v| S::from_f32(v)));
        }
        let tensor = Tensor::from_vec(vec![indices.len(), 2, ds.delay_rows, ds.antennas], buf)
            .map_err(anyhow::Error::from)?;
        nodes.push(g.constant(tensor));
    }
    Ok(nodes)
}

fn metrics_header(steps: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "train_loss".into(), "val_nmse_db".into()];
    for t in 1..=steps {
        cols.push(format!("val_nmse_db_t{t}"));
    }
    cols.push("seconds".into());
    cols.join(",")
}

fn update_running_stats<S: Scalar>(
    params: &mut ParameterSet<S>,
    observations: &[csi_core::graph::NormObservation<S>],
    momentum: f64,
) {
    let keep = S::from_f64(momentum);
    let take = S::from_f64(1.0 - momentum);
    for obs in observations {
        let mean = params.get_mut(obs.mean_param);
        for (m, &b) in mean.tensor.data_mut().iter_mut().zip(&obs.batch_mean) {
            *m = keep * *m + take * b;
        }
        let var = params.get_mut(obs.var_param);
        for (v, &b) in var.tensor.data_mut().iter_mut().zip(&obs.batch_var) {
            *v = keep * *v + take * b;
        }
    }
}

/// Run one training; writes metrics.csv, best.csiw and summary.json into
/// `out_dir`.
pub fn train_run<S: Scalar>(
    settings: &TrainSettings,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out_dir: &Path,
) -> Result<TrainArtifacts, TrainError> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating run directory {}", out_dir.display()))?;
    let spec = ArchitectureSpec::new(settings.arch, settings.dims);
    let root = Prng::seeded(settings.seed);
    let (mut params, model) =
        build_network::<S>(&spec, root.substream(STREAM_INIT).next_u64())?;
    let mut adam = AdamState::new(&params, AdamConfig::with_lr(settings.lr))?;

    let metrics_path = out_dir.join("metrics.csv");
    let weights_path = out_dir.join("best.csiw");
    let mut metrics = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "{}", metrics_header(train_ds.steps)).map_err(anyhow::Error::from)?;

    let mut indices: Vec<usize> = (0..train_ds.sequences).collect();
    let mut best_linear = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut initial_train_loss = f64::NAN;
    let mut final_train_loss = f64::NAN;
    let mut epochs_run = 0usize;

    for epoch in 1..=settings.epochs {
        let started = Instant::now();
        let mut shuffle_rng = root.substream(STREAM_SHUFFLE ^ (epoch as u64) << 8);
        shuffle_rng.shuffle(&mut indices);

        let mut sse_weighted = 0.0f64;
        for chunk in indices.chunks(settings.batch) {
            let mut g = Graph::new(&params);
            let inputs = batch_inputs(&mut g, train_ds, chunk)?;
            let loss_node = match sequence_loss(&mut g, &model, &inputs) {
                Ok((node, _)) => node,
                // A non-finite intermediate surfaces as a contract error.
                Err(csi_core::CsiError::Contract(_)) => {
                    write_summary_abort(out_dir, settings, epoch)?;
                    return Err(TrainError::NonFinite { epoch });
                }
                Err(e) => return Err(e.into()),
            };
            let loss = g.value(loss_node).data()[0].to_f64();
            if !loss.is_finite() {
                write_summary_abort(out_dir, settings, epoch)?;
                return Err(TrainError::NonFinite { epoch });
            }
            sse_weighted += loss * chunk.len() as f64;

            let grads = g.backward(loss_node)?;
            let observations = g.norm_observations().to_vec();
            drop(g);
            params.store_grads(grads);
            if settings.norm_update {
                update_running_stats(&mut params, &observations, settings.norm_momentum);
            }
            adam.step(&mut params)?;
            params.zero_grads();
        }
        let train_loss = sse_weighted / train_ds.sequences as f64;
        if epoch == 1 {
            initial_train_loss = train_loss;
        }
        final_train_loss = train_loss;
        epochs_run = epoch;

        // A parameter blow-up after the step surfaces as a non-finite
        // forward here; treat it like a non-finite loss.
        let report = match evaluate(&model, &params, val_ds, None, settings.batch) {
            Ok(r) => r,
            Err(e) if is_non_finite(&e) => {
                write_summary_abort(out_dir, settings, epoch)?;
                return Err(TrainError::NonFinite { epoch });
            }
            Err(e) => return Err(e.into()),
        };
        let seconds = started.elapsed().as_secs_f64();
        let mut row = format!("{epoch},{train_loss},{}", report.nmse_db);
        for v in &report.per_step_db {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&format!(",{seconds}"));
        writeln!(metrics, "{row}").map_err(anyhow::Error::from)?;

        if report.nmse_linear < best_linear {
            best_linear = report.nmse_linear;
            best_epoch = epoch;
            since_best = 0;
            weights::save(
                &weights_path,
                settings.arch.name(),
                settings.dims.snapshot_len(),
                settings.dims.codeword_len,
                &params,
            )?;
        } else {
            since_best += 1;
            if since_best > settings.patience {
                break;
            }
        }
    }
    drop(metrics);

    // Report what the artifact on disk achieves: reload the checkpoint and
    // evaluate it, so `eval` against the same file reproduces the number.
    let file = weights::load(&weights_path)?;
    let (mut best_params, _) = build_network::<S>(&spec, 0)?;
    weights::apply(&file, &mut best_params)?;
    let check = evaluate(&model, &best_params, val_ds, None, settings.batch)?;

    let mut outcome = TrainOutcome {
        arch: settings.arch.name().to_string(),
        seed: settings.seed,
        precision: S::BITS,
        epochs_run,
        best_epoch,
        best_val_nmse_db: csi_core::metrics::linear_to_db(best_linear),
        checkpoint_val_nmse_db: check.nmse_db,
        checkpoint_val_nmse_db_normalized: check.nmse_db_normalized,
        initial_train_loss,
        final_train_loss,
        train_nmse_db: None,
        aborted: false,
        finetuned_val_nmse_db_quantized: None,
    };

    if settings.finetune_epochs > 0 {
        let bits = settings.quantize_bits.ok_or_else(|| {
            anyhow!("finetune_epochs requires quantize_bits to be set")
        })?;
        let ft = finetune_decoder(
            settings,
            &model,
            &mut best_params,
            train_ds,
            val_ds,
            bits,
            out_dir,
        )?;
        outcome.finetuned_val_nmse_db_quantized = Some(ft);
    }

    let summary = serde_json::to_string_pretty(&outcome).map_err(anyhow::Error::from)?;
    fs::write(out_dir.join("summary.json"), summary + "\n").map_err(anyhow::Error::from)?;

    Ok(TrainArtifacts {
        outcome,
        metrics_path,
        weights_path,
    })
}

fn is_non_finite(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<csi_core::CsiError>(),
        Some(csi_core::CsiError::Contract(_))
    )
}

fn write_summary_abort(
    out_dir: &Path,
    settings: &TrainSettings,
    epoch: usize,
) -> Result<(), TrainError> {
    let text = serde_json::json!({
        "arch": settings.arch.name(),
        "seed": settings.seed,
        "aborted": true,
        "abort_epoch": epoch,
        "note": "non-finite training loss; last good checkpoint retained",
    });
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&text).map_err(anyhow::Error::from)? + "\n",
    )
    .map_err(anyhow::Error::from)?;
    Ok(())
}

/// Decoder-only fine-tuning on dequantized codewords; the encoder is
/// frozen by construction (codewords re-enter the graph as constants).
fn finetune_decoder<S: Scalar>(
    settings: &TrainSettings,
    model: &Model,
    params: &mut ParameterSet<S>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    bits: u8,
    out_dir: &Path,
) -> Result<f64, TrainError> {
    let root = Prng::seeded(settings.seed ^ 0xF1E7);
    let decoder_ids = model.decoder_param_ids(params);
    let mut adam = AdamState::for_ids(params, decoder_ids, AdamConfig::with_lr(settings.lr))?;
    let mut indices: Vec<usize> = (0..train_ds.sequences).collect();
    let mut best = f64::INFINITY;
    let path = out_dir.join("best_finetuned.csiw");

    for epoch in 1..=settings.finetune_epochs {
        let mut rng = root.substream(epoch as u64);
        rng.shuffle(&mut indices);
        for chunk in indices.chunks(settings.batch) {
            let mut g = Graph::new(params);
            let inputs = batch_inputs(&mut g, train_ds, chunk)?;
            let mut enc_states = model.begin_sequence();
            let mut dec_states = model.begin_sequence();
            let mut outputs = Vec::with_capacity(inputs.len());
            for (t, &input) in inputs.iter().enumerate() {
                let code = model.encoder_step(&mut g, input, &mut enc_states)?;
                let deq = crate::evaluate::requantize_node(&mut g, code, bits, t as u8)?;
                outputs.push(model.decoder_step(&mut g, deq, &mut dec_states)?);
            }
            let loss_node = csi_core::metrics::loss_from_step_outputs(
                &mut g,
                &outputs,
                &inputs,
                chunk.len(),
            )?;
            let loss = g.value(loss_node).data()[0].to_f64();
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch });
            }
            let grads = g.backward(loss_node)?;
            drop(g);
            params.store_grads(grads);
            adam.step(params)?;
            params.zero_grads();
        }
        let report = evaluate(model, params, val_ds, Some(bits), settings.batch)?;
        let q = report.quantized.as_ref().expect("requested").nmse_linear;
        if q < best {
            best = q;
            weights::save(
                &path,
                settings.arch.name(),
                settings.dims.snapshot_len(),
                settings.dims.codeword_len,
                params,
            )?;
        }
    }
    Ok(csi_core::metrics::linear_to_db(best))
}
