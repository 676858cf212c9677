//! Layer primitives: linear (dense) layer, LSTM cell, 3x3 conv blocks with
//! per-channel normalization, and the three-convolution residual refinement
//! block used by the channel recovery stage.
//!
//! Layers are parameter-id bundles plus forward functions that append onto a
//! `Graph`; gradients come from the graph's reverse pass, including through
//! the recurrent state (backpropagation through time falls out of unrolling
//! the cell across a sequence in one graph).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamId, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Negative-side slope of the LeakyReLU activations.
pub const LEAKY_SLOPE: f64 = 0.3;
/// Epsilon inside the normalization denominator.
pub const NORM_EPS: f64 = 1e-5;
/// Forget gates start open to ease early memory retention.
pub const FORGET_BIAS_INIT: f64 = 1.0;
/// Recurrent matrices use a plain scaled-uniform init, 1/sqrt(hidden).
pub fn recurrent_bound(hidden: usize) -> f64 {
    1.0 / libm::sqrt(hidden as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct DenseIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub scale: ParamId,
    pub shift: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Gate order: input, forget, output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmIds {
    pub recurrent: [ParamId; 4],
    pub input: [ParamId; 4],
    pub bias: [ParamId; 4],
    pub hidden: usize,
    pub input_len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineNetIds {
    pub convs: [ConvIds; 3],
    pub norms: [NormIds; 3],
}

/// Hidden and cell activations carried across the steps of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub y: NodeId,
    pub c: NodeId,
}

pub(crate) const GATE_NAMES: [&str; 4] = ["i", "f", "o", "c"];

// ── forward functions ───────────────────────────────────────────────────

/// W.x + b on a [in x B] column batch.
pub fn dense<S: Scalar>(
    g: &mut Graph<'_, S>,
    ids: &DenseIds,
    x: NodeId,
) -> Result<NodeId> {
    let w = g.param(ids.weight);
    let b = g.param(ids.bias);
    let wx = g.matmul(w, x)?;
    g.add_bias_cols(wx, b)
}

/// Fresh zero state for a batch of `batch` sequences.
pub fn lstm_zero_state<S: Scalar>(
    g: &mut Graph<'_, S>,
    ids: &LstmIds,
    batch: usize,
) -> LstmState {
    let y = g.constant(Tensor::zeros(alloc::vec![ids.hidden, batch]));
    let c = g.constant(Tensor::zeros(alloc::vec![ids.hidden, batch]));
    LstmState { y, c }
}

/// One LSTM step on a [input x B] column batch:
/// gates `sigmoid(Wy.y + Wx.x + b)`, candidate `tanh(...)`,
/// `c' = f (.) c + i (.) cand`, `y' = o (.) tanh(c')`.
pub fn lstm_cell<S: Scalar>(
    g: &mut Graph<'_, S>,
    ids: &LstmIds,
    x: NodeId,
    state: LstmState,
) -> Result<(NodeId, LstmState)> {
    let mut pre = [None; 4];
    for gate in 0..4 {
        let wy = g.param(ids.recurrent[gate]);
        let wx = g.param(ids.input[gate]);
        let b = g.param(ids.bias[gate]);
        let ry = g.matmul(wy, state.y)?;
        let rx = g.matmul(wx, x)?;
        let s = g.add(ry, rx)?;
        pre[gate] = Some(g.add_bias_cols(s, b)?);
    }
    let gate_i = g.sigmoid(pre[0].expect("set above"))?;
    let gate_f = g.sigmoid(pre[1].expect("set above"))?;
    let gate_o = g.sigmoid(pre[2].expect("set above"))?;
    let cand = g.tanh(pre[3].expect("set above"))?;

    let keep = g.hadamard(gate_f, state.c)?;
    let write = g.hadamard(gate_i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let y_next = g.hadamard(gate_o, squashed)?;
    Ok((y_next, LstmState { y: y_next, c: c_next }))
}

/// conv -> normalization, optionally LeakyReLU.
fn conv_norm<S: Scalar>(
    g: &mut Graph<'_, S>,
    conv: &ConvIds,
    norm: &NormIds,
    x: NodeId,
    activate: bool,
) -> Result<NodeId> {
    let w = g.param(conv.weight);
    let b = g.param(conv.bias);
    let y = g.conv2d_3x3(x, w, b)?;
    let scale = g.param(norm.scale);
    let shift = g.param(norm.shift);
    let mean = g.param(norm.mean);
    let var = g.param(norm.var);
    let y = g.channel_norm(y, scale, shift, mean, var, NORM_EPS)?;
    if activate {
        g.leaky_relu(y, LEAKY_SLOPE)
    } else {
        Ok(y)
    }
}

/// Three-convolution residual block on [B, 2, H, W]: 2 -> 8 -> 16 -> 2
/// channels, each conv followed by normalization, LeakyReLU after the first
/// two, and the input added back at the end (jump connection).
pub fn refinenet<S: Scalar>(
    g: &mut Graph<'_, S>,
    ids: &RefineNetIds,
    x: NodeId,
) -> Result<NodeId> {
    let h1 = conv_norm(g, &ids.convs[0], &ids.norms[0], x, true)?;
    let h2 = conv_norm(g, &ids.convs[1], &ids.norms[1], h1, true)?;
    let h3 = conv_norm(g, &ids.convs[2], &ids.norms[2], h2, false)?;
    g.add(h3, x)
}

// ── parameter registration ──────────────────────────────────────────────

pub(crate) fn add_specs<S: Scalar>(
    params: &mut ParameterSet<S>,
    specs: Vec<(String, Vec<usize>, bool, Init)>,
) -> Result<()> {
    for (name, shape, trainable, init) in specs {
        params.add(name, shape, trainable, init)?;
    }
    Ok(())
}

pub fn add_dense<S: Scalar>(
    params: &mut ParameterSet<S>,
    prefix: &str,
    input: usize,
    output: usize,
) -> Result<DenseIds> {
    add_specs(params, dense_specs(prefix, input, output))?;
    Ok(lookup_dense(params, prefix))
}

pub fn add_conv<S: Scalar>(
    params: &mut ParameterSet<S>,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> Result<ConvIds> {
    add_specs(params, conv_specs(prefix, cin, cout))?;
    Ok(lookup_conv(params, prefix))
}

pub fn add_norm<S: Scalar>(
    params: &mut ParameterSet<S>,
    prefix: &str,
    channels: usize,
) -> Result<NormIds> {
    add_specs(params, norm_specs(prefix, channels))?;
    Ok(lookup_norm(params, prefix))
}

pub fn add_lstm<S: Scalar>(
    params: &mut ParameterSet<S>,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> Result<LstmIds> {
    add_specs(params, lstm_specs(prefix, input, hidden))?;
    Ok(lookup_lstm(params, prefix, input, hidden))
}

pub fn add_refinenet<S: Scalar>(
    params: &mut ParameterSet<S>,
    prefix: &str,
) -> Result<RefineNetIds> {
    add_specs(params, refinenet_specs(prefix))?;
    Ok(lookup_refinenet(params, prefix))
}

/// Look up a layer's ids back out of a materialized parameter set.
pub(crate) fn find<S: Scalar>(params: &ParameterSet<S>, name: &str) -> ParamId {
    params
        .id_by_name(name)
        .unwrap_or_else(|| panic!("parameter {name} missing from set"))
}

pub(crate) fn lookup_dense<S: Scalar>(params: &ParameterSet<S>, prefix: &str) -> DenseIds {
    DenseIds {
        weight: find(params, &format!("{prefix}.weight")),
        bias: find(params, &format!("{prefix}.bias")),
    }
}

pub(crate) fn lookup_conv<S: Scalar>(params: &ParameterSet<S>, prefix: &str) -> ConvIds {
    ConvIds {
        weight: find(params, &format!("{prefix}.weight")),
        bias: find(params, &format!("{prefix}.bias")),
    }
}

pub(crate) fn lookup_norm<S: Scalar>(params: &ParameterSet<S>, prefix: &str) -> NormIds {
    NormIds {
        scale: find(params, &format!("{prefix}.scale")),
        shift: find(params, &format!("{prefix}.shift")),
        mean: find(params, &format!("{prefix}.mean")),
        var: find(params, &format!("{prefix}.var")),
    }
}

pub(crate) fn lookup_lstm<S: Scalar>(
    params: &ParameterSet<S>,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> LstmIds {
    let mut recurrent = [ParamId(0); 4];
    let mut input_w = [ParamId(0); 4];
    let mut bias = [ParamId(0); 4];
    for (k, gate) in GATE_NAMES.iter().enumerate() {
        recurrent[k] = find(params, &format!("{prefix}.wy_{gate}"));
        input_w[k] = find(params, &format!("{prefix}.wx_{gate}"));
        bias[k] = find(params, &format!("{prefix}.b_{gate}"));
    }
    LstmIds {
        recurrent,
        input: input_w,
        bias,
        hidden,
        input_len: input,
    }
}

pub(crate) fn lookup_refinenet<S: Scalar>(params: &ParameterSet<S>, prefix: &str) -> RefineNetIds {
    let mut convs = [ConvIds {
        weight: ParamId(0),
        bias: ParamId(0),
    }; 3];
    let mut norms = [NormIds {
        scale: ParamId(0),
        shift: ParamId(0),
        mean: ParamId(0),
        var: ParamId(0),
    }; 3];
    for k in 0..3 {
        convs[k] = lookup_conv(params, &format!("{prefix}.conv{}", k + 1));
        norms[k] = lookup_norm(params, &format!("{prefix}.norm{}", k + 1));
    }
    RefineNetIds { convs, norms }
}

/// Channel widths of one refinement block, input to output.
pub fn refinenet_widths() -> [(usize, usize); 3] {
    [(2, 8), (8, 16), (16, 2)]
}

/// Parameter names a dense layer contributes, for manifest construction.
pub(crate) fn dense_specs(prefix: &str, input: usize, output: usize) -> Vec<(String, Vec<usize>, bool, Init)> {
    alloc::vec![
        (
            format!("{prefix}.weight"),
            alloc::vec![output, input],
            true,
            Init::GlorotUniform { fan_in: input, fan_out: output },
        ),
        (format!("{prefix}.bias"), alloc::vec![output], true, Init::Constant(0.0)),
    ]
}

pub(crate) fn conv_specs(prefix: &str, cin: usize, cout: usize) -> Vec<(String, Vec<usize>, bool, Init)> {
    alloc::vec![
        (
            format!("{prefix}.weight"),
            alloc::vec![cout, cin, 3, 3],
            true,
            Init::GlorotUniform { fan_in: cin * 9, fan_out: cout * 9 },
        ),
        (format!("{prefix}.bias"), alloc::vec![cout], true, Init::Constant(0.0)),
    ]
}

pub(crate) fn norm_specs(prefix: &str, channels: usize) -> Vec<(String, Vec<usize>, bool, Init)> {
    alloc::vec![
        (format!("{prefix}.scale"), alloc::vec![channels], true, Init::Constant(1.0)),
        (format!("{prefix}.shift"), alloc::vec![channels], true, Init::Constant(0.0)),
        (format!("{prefix}.mean"), alloc::vec![channels], false, Init::Constant(0.0)),
        (format!("{prefix}.var"), alloc::vec![channels], false, Init::Constant(1.0)),
    ]
}

pub(crate) fn lstm_specs(prefix: &str, input: usize, hidden: usize) -> Vec<(String, Vec<usize>, bool, Init)> {
    let mut out = Vec::new();
    for gate in GATE_NAMES {
        out.push((
            format!("{prefix}.wy_{gate}"),
            alloc::vec![hidden, hidden],
            true,
            Init::ScaledUniform {
                bound: recurrent_bound(hidden),
            },
        ));
        out.push((
            format!("{prefix}.wx_{gate}"),
            alloc::vec![hidden, input],
            true,
            Init::GlorotUniform {
                fan_in: input,
                fan_out: hidden,
            },
        ));
        let b_init = if gate == "f" {
            Init::Constant(FORGET_BIAS_INIT)
        } else {
            Init::Constant(0.0)
        };
        out.push((format!("{prefix}.b_{gate}"), alloc::vec![hidden], true, b_init));
    }
    out
}

pub(crate) fn refinenet_specs(prefix: &str) -> Vec<(String, Vec<usize>, bool, Init)> {
    let mut out = Vec::new();
    for (k, (cin, cout)) in refinenet_widths().iter().enumerate() {
        out.extend(conv_specs(&format!("{prefix}.conv{}", k + 1), *cin, *cout));
        out.extend(norm_specs(&format!("{prefix}.norm{}", k + 1), *cout));
    }
    out
}
