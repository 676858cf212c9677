//! NMSE and the sequence reconstruction loss.

use alloc::format;
use alloc::vec::Vec;

use crate::arch::Model;
use crate::error::CsiError;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::Result;

/// Reporting floor for near-zero NMSE; avoids -inf in CSV output.
pub const NMSE_DB_FLOOR: f64 = -100.0;

pub fn linear_to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        return NMSE_DB_FLOOR;
    }
    (10.0 * libm::log10(linear)).max(NMSE_DB_FLOOR)
}

/// Squared-error ratio ||h - hhat||^2 / ||h||^2 of one sample.
pub fn nmse_ratio(h: &[f64], hhat: &[f64]) -> Result<f64> {
    if h.len() != hhat.len() {
        return Err(CsiError::Dimension(format!(
            "nmse needs equal lengths, got {} vs {}",
            h.len(),
            hhat.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in h.iter().zip(hhat) {
        let d = a - b;
        num += d * d;
        den += a * a;
    }
    if den <= 0.0 {
        return Err(CsiError::Metric("zero-norm reference channel".into()));
    }
    Ok(num / den)
}

/// Mean per-sample ratio and its dB value over an iterator of sample pairs.
pub fn nmse<'a, I>(pairs: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    for (h, hhat) in pairs {
        sum += nmse_ratio(h, hhat)?;
        count += 1;
    }
    if count == 0 {
        return Err(CsiError::Metric("nmse over an empty sample set".into()));
    }
    let linear = sum / count as f64;
    Ok((linear, linear_to_db(linear)))
}

/// Assemble the training loss from per-step outputs and targets:
/// `L = (1 / (K * T)) * sum_t sum_elements |out - target|^2`.
///
/// The inner sums run over whole snapshots (they are not divided by the
/// matrix size), `K` is the batch size and `T` the step count.
pub fn loss_from_step_outputs<S: Scalar>(
    g: &mut Graph<'_, S>,
    outputs: &[NodeId],
    targets: &[NodeId],
    batch: usize,
) -> Result<NodeId> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(CsiError::Dimension(format!(
            "loss needs matching non-empty step lists, got {} outputs and {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&out, &tgt) in outputs.iter().zip(targets) {
        let diff = g.sub(out, tgt)?;
        let sq = g.hadamard(diff, diff)?;
        let s = g.sum_all(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.expect("non-empty");
    let steps = outputs.len();
    g.affine(total, 1.0 / (batch * steps) as f64, 0.0)
}

/// Forward a batch of sequences through the model and build the loss node.
/// `step_inputs[t]` is the batched snapshot [K, 2, rows, antennas] of step t;
/// targets are the inputs themselves. Returns (loss, per-step outputs).
pub fn sequence_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &Model,
    step_inputs: &[NodeId],
) -> Result<(NodeId, Vec<NodeId>)> {
    if step_inputs.is_empty() {
        return Err(CsiError::Dimension("empty sequence".into()));
    }
    let batch = g.shape(step_inputs[0])[0];
    let outputs = model.forward_sequence(g, step_inputs)?;
    let loss = loss_from_step_outputs(g, &outputs, step_inputs, batch)?;
    Ok((loss, outputs))
}
