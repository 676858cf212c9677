//! NMSE evaluation of a model over a dataset, with the feedback codec
//! optionally in the loop.
//!
//! NMSE is computed on de-normalized channels (the normalization map is a
//! dataset-wide invertible affine transform known at both ends); the
//! normalized-domain value is reported alongside for transparency.

use anyhow::{anyhow, Result};

use csi_core::arch::Model;
use csi_core::graph::Graph;
use csi_core::metrics::{linear_to_db, NMSE_DB_FLOOR};
use csi_core::params::ParameterSet;
use csi_core::quant;
use csi_core::tensor::Tensor;
use csi_core::Scalar;

use crate::dataset::Dataset;

#[derive(Debug, Clone)]
pub struct QuantizedEval {
    pub bits: u8,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub per_step_db: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub sequences: usize,
    /// Mean per-sample ratio over all (sequence, step) pairs, de-normalized.
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub per_step_linear: Vec<f64>,
    pub per_step_db: Vec<f64>,
    /// Same metric on the normalized [0, 1] representation.
    pub nmse_linear_normalized: f64,
    pub nmse_db_normalized: f64,
    pub quantized: Option<QuantizedEval>,
}

struct RatioAccumulator {
    per_step_sum: Vec<f64>,
    count_per_step: usize,
}

impl RatioAccumulator {
    fn new(steps: usize) -> Self {
        RatioAccumulator {
            per_step_sum: vec![0.0; steps],
            count_per_step: 0,
        }
    }

    fn per_step_mean(&self) -> Vec<f64> {
        self.per_step_sum
            .iter()
            .map(|s| s / self.count_per_step as f64)
            .collect()
    }

    fn overall(&self) -> f64 {
        self.per_step_sum.iter().sum::<f64>() / (self.per_step_sum.len() * self.count_per_step) as f64
    }
}

/// Evaluate over whole dataset in batches. Results do not depend on the
/// batch size: every sample's forward is column-independent.
pub fn evaluate<S: Scalar>(
    model: &Model,
    params: &ParameterSet<S>,
    ds: &Dataset,
    quantize_bits: Option<u8>,
    batch: usize,
) -> Result<EvalReport> {
    if ds.delay_rows != model.dims.delay_rows
        || ds.antennas != model.dims.antennas
        || ds.steps != model.dims.steps
    {
        return Err(anyhow!(
            "dataset dims ({} rows, {} antennas, {} steps) do not match the model ({}, {}, {})",
            ds.delay_rows,
            ds.antennas,
            ds.steps,
            model.dims.delay_rows,
            model.dims.antennas,
            model.dims.steps
        ));
    }
    let n = ds.snapshot_len();
    let steps = ds.steps;
    let mut denorm_acc = RatioAccumulator::new(steps);
    let mut norm_acc = RatioAccumulator::new(steps);
    let mut quant_acc = quantize_bits.map(|_| RatioAccumulator::new(steps));

    let mut seq = 0usize;
    while seq < ds.sequences {
        let bs = batch.min(ds.sequences - seq);
        let mut g = Graph::new(params);

        // Batched inputs per step, one sequence per column sample.
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut buf = Vec::with_capacity(bs * n);
            for b in 0..bs {
                buf.extend(ds.snapshot(seq + b, t).iter().map(|&v| S::from_f32(v)));
            }
            let tensor = Tensor::from_vec(vec![bs, 2, ds.delay_rows, ds.antennas], buf)
                .map_err(anyhow::Error::from)?;
            inputs.push(g.constant(tensor));
        }

        let mut states = model.begin_sequence();
        let mut q_states = model.begin_sequence();
        for (t, &input) in inputs.iter().enumerate() {
            let code = model.encoder_step(&mut g, input, &mut states)?;
            let out = model.decoder_step(&mut g, code, &mut states)?;
            accumulate_batch(&mut denorm_acc, &mut norm_acc, ds, &g, input, out, t, bs)?;

            if let (Some(bits), Some(acc)) = (quantize_bits, quant_acc.as_mut()) {
                let deq = requantize_node(&mut g, code, bits, t as u8)?;
                let qout = model.decoder_step(&mut g, deq, &mut q_states)?;
                accumulate_quantized(acc, ds, &g, input, qout, t, bs)?;
            }
        }
        denorm_acc.count_per_step += bs;
        norm_acc.count_per_step += bs;
        if let Some(acc) = quant_acc.as_mut() {
            acc.count_per_step += bs;
        }
        seq += bs;
    }

    let per_step_linear = denorm_acc.per_step_mean();
    let nmse_linear = denorm_acc.overall();
    Ok(EvalReport {
        sequences: ds.sequences,
        nmse_linear,
        nmse_db: linear_to_db(nmse_linear),
        per_step_db: per_step_linear.iter().map(|&l| linear_to_db(l)).collect(),
        per_step_linear,
        nmse_linear_normalized: norm_acc.overall(),
        nmse_db_normalized: linear_to_db(norm_acc.overall()),
        quantized: quant_acc.map(|acc| {
            let linear = acc.overall();
            QuantizedEval {
                bits: quantize_bits.expect("set together"),
                nmse_linear: linear,
                nmse_db: linear_to_db(linear),
                per_step_db: acc.per_step_mean().iter().map(|&l| linear_to_db(l)).collect(),
            }
        }),
    })
}

/// Quantize each column (sample) of a [M x B] codeword node and re-enter
/// the dequantized values as a constant, cutting the gradient path exactly
/// where the feedback channel sits.
pub fn requantize_node<S: Scalar>(
    g: &mut Graph<'_, S>,
    code: csi_core::NodeId,
    bits: u8,
    step: u8,
) -> Result<csi_core::NodeId> {
    let (m, batch) = (g.shape(code)[0], g.shape(code)[1]);
    let data = g.value(code).data().to_vec();
    let mut deq = vec![S::ZERO; m * batch];
    let mut column = Vec::with_capacity(m);
    for b in 0..batch {
        column.clear();
        for i in 0..m {
            column.push(data[i * batch + b]);
        }
        let tensor = Tensor::from_vec(vec![m], column.clone()).map_err(anyhow::Error::from)?;
        let payload = quant::quantize(&tensor, bits, step)?;
        let values: Tensor<S> = quant::dequantize(&payload)?;
        for (i, &v) in values.data().iter().enumerate() {
            deq[i * batch + b] = v;
        }
    }
    let tensor = Tensor::from_vec(vec![m, batch], deq).map_err(anyhow::Error::from)?;
    Ok(g.constant(tensor))
}

#[allow(clippy::too_many_arguments)]
fn accumulate_batch<S: Scalar>(
    denorm: &mut RatioAccumulator,
    norm: &mut RatioAccumulator,
    ds: &Dataset,
    g: &Graph<'_, S>,
    input: csi_core::NodeId,
    out: csi_core::NodeId,
    step: usize,
    batch: usize,
) -> Result<()> {
    let n = ds.snapshot_len();
    let x = g.value(input).data();
    let y = g.value(out).data();
    for b in 0..batch {
        let (mut num_d, mut den_d, mut num_n, mut den_n) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let tv = x[b * n + i].to_f64();
            let ov = y[b * n + i].to_f64();
            let t_raw = ds.denormalize(tv);
            let o_raw = ds.denormalize(ov);
            num_d += (t_raw - o_raw) * (t_raw - o_raw);
            den_d += t_raw * t_raw;
            num_n += (tv - ov) * (tv - ov);
            den_n += tv * tv;
        }
        if den_d <= 0.0 || den_n <= 0.0 {
            return Err(anyhow!("zero-norm reference channel in evaluation"));
        }
        denorm.per_step_sum[step] += num_d / den_d;
        norm.per_step_sum[step] += num_n / den_n;
    }
    Ok(())
}

fn accumulate_quantized<S: Scalar>(
    acc: &mut RatioAccumulator,
    ds: &Dataset,
    g: &Graph<'_, S>,
    input: csi_core::NodeId,
    out: csi_core::NodeId,
    step: usize,
    batch: usize,
) -> Result<()> {
    let n = ds.snapshot_len();
    let x = g.value(input).data();
    let y = g.value(out).data();
    for b in 0..batch {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let t_raw = ds.denormalize(x[b * n + i].to_f64());
            let o_raw = ds.denormalize(y[b * n + i].to_f64());
            num += (t_raw - o_raw) * (t_raw - o_raw);
            den += t_raw * t_raw;
        }
        if den <= 0.0 {
            return Err(anyhow!("zero-norm reference channel in evaluation"));
        }
        acc.per_step_sum[step] += num / den;
    }
    Ok(())
}

/// Near-zero reconstructions report the floor rather than -inf.
pub fn db_floor() -> f64 {
    NMSE_DB_FLOOR
}
