//! The three encoder/decoder architectures and their exact parameter audit.
//!
//! An `ArchitectureSpec` is (kind, dims); its layer manifest is a pure
//! function of the two, and both the parameter audit and the materialized
//! network derive from that one manifest, so the audited count always equals
//! the number of scalars the network actually carries.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CsiError;
use crate::graph::{Graph, NodeId};
use crate::nn::{self, LstmState};
use crate::params::{Init, ParameterSet};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::Result;

/// Compression ratio as an exact rational, so M = gamma * N has no
/// floating-point ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gamma {
    pub num: u32,
    pub den: u32,
}

impl Gamma {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(CsiError::Config("gamma must be positive".into()));
        }
        Ok(Gamma { num, den })
    }

    /// Parse "1/16" or a bare integer "1".
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |_| CsiError::Config(format!("cannot parse gamma {s:?}, expected e.g. 1/16"));
        match s.split_once('/') {
            Some((a, b)) => Gamma::new(
                a.trim().parse().map_err(bad)?,
                b.trim().parse().map_err(bad)?,
            ),
            None => Gamma::new(s.trim().parse().map_err(bad)?, 1),
        }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl core::fmt::Display for Gamma {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// The dimensional contract shared by all architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// N_t, transmit antennas.
    pub antennas: usize,
    /// N_c, subcarriers of the raw channel.
    pub subcarriers: usize,
    /// Retained delay rows after cropping.
    pub delay_rows: usize,
    /// T, snapshots per sequence.
    pub steps: usize,
    /// M, codeword length per step.
    pub codeword_len: usize,
}

impl ModelDims {
    /// Real scalar count of one cropped snapshot: N = 2 * delay_rows * antennas.
    pub fn snapshot_len(&self) -> usize {
        2 * self.delay_rows * self.antennas
    }

    pub fn new(
        antennas: usize,
        subcarriers: usize,
        delay_rows: usize,
        steps: usize,
        gamma: Gamma,
    ) -> Result<Self> {
        if antennas == 0 || subcarriers == 0 || delay_rows == 0 || steps == 0 {
            return Err(CsiError::Config("all extents must be positive".into()));
        }
        if delay_rows > subcarriers {
            return Err(CsiError::Config(format!(
                "delay_rows {delay_rows} exceeds subcarriers {subcarriers}"
            )));
        }
        let n = 2 * delay_rows * antennas;
        let scaled = n as u64 * gamma.num as u64;
        if scaled % gamma.den as u64 != 0 {
            return Err(CsiError::Config(format!(
                "gamma {gamma} does not divide N = {n} into an integer codeword length"
            )));
        }
        let m = (scaled / gamma.den as u64) as usize;
        if m == 0 || m > n {
            return Err(CsiError::Config(format!(
                "codeword length M = {m} must satisfy 1 <= M <= N = {n}"
            )));
        }
        Ok(ModelDims {
            antennas,
            subcarriers,
            delay_rows,
            steps,
            codeword_len: m,
        })
    }

    /// Paper-scale defaults: 32 antennas, 1024 subcarriers, 32 delay rows,
    /// 4 steps.
    pub fn with_defaults(gamma: Gamma) -> Result<Self> {
        ModelDims::new(32, 1024, 32, 4, gamma)
    }

    pub fn gamma(&self) -> f64 {
        self.codeword_len as f64 / self.snapshot_len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureKind {
    CsiNet,
    RecCsiNet,
    PrRecCsiNet,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 3] = [
        ArchitectureKind::CsiNet,
        ArchitectureKind::RecCsiNet,
        ArchitectureKind::PrRecCsiNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::CsiNet => "csinet",
            ArchitectureKind::RecCsiNet => "rec",
            ArchitectureKind::PrRecCsiNet => "pr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csinet" => Ok(ArchitectureKind::CsiNet),
            "rec" => Ok(ArchitectureKind::RecCsiNet),
            "pr" => Ok(ArchitectureKind::PrRecCsiNet),
            other => Err(CsiError::Config(format!(
                "unknown architecture {other:?}, expected csinet | rec | pr"
            ))),
        }
    }
}

/// Which functional module a tensor belongs to, for the audit breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleTag {
    FeatureExtraction,
    Compression,
    Uncompression,
    Recovery,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
    pub module: ModuleTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    pub dims: ModelDims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub feature_extraction: u64,
    pub compression: u64,
    pub uncompression: u64,
    pub recovery: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.feature_extraction + self.compression + self.uncompression + self.recovery
    }
}

impl ArchitectureSpec {
    pub fn new(kind: ArchitectureKind, dims: ModelDims) -> Self {
        ArchitectureSpec { kind, dims }
    }

    /// Layer-by-layer tensor manifest; a pure function of (kind, dims).
    pub fn manifest(&self) -> Vec<TensorSpec> {
        let n = self.dims.snapshot_len();
        let m = self.dims.codeword_len;
        let mut out = Vec::new();
        let mut push = |module: ModuleTag, specs: Vec<(String, Vec<usize>, bool, Init)>| {
            for (name, shape, trainable, init) in specs {
                out.push(TensorSpec {
                    name,
                    shape,
                    trainable,
                    init,
                    module,
                });
            }
        };

        // Encoder: feature extraction (conv only, no normalization), then
        // the compression module.
        push(ModuleTag::FeatureExtraction, nn::conv_specs("enc.conv", 2, 2));
        push(ModuleTag::Compression, nn::dense_specs("enc.fc", n, m));
        match self.kind {
            ArchitectureKind::CsiNet => {}
            ArchitectureKind::RecCsiNet => {
                push(ModuleTag::Compression, nn::lstm_specs("enc.lstm", n, m));
            }
            ArchitectureKind::PrRecCsiNet => {
                push(ModuleTag::Compression, nn::lstm_specs("enc.lstm", m, m));
            }
        }

        // Decoder: uncompression, then the recovery tail.
        push(ModuleTag::Uncompression, nn::dense_specs("dec.fc", m, n));
        match self.kind {
            ArchitectureKind::CsiNet => {}
            ArchitectureKind::RecCsiNet => {
                push(ModuleTag::Uncompression, nn::lstm_specs("dec.lstm", m, n));
            }
            ArchitectureKind::PrRecCsiNet => {
                push(ModuleTag::Uncompression, nn::lstm_specs("dec.lstm", m, m));
            }
        }
        push(ModuleTag::Recovery, nn::refinenet_specs("dec.ref1"));
        push(ModuleTag::Recovery, nn::refinenet_specs("dec.ref2"));
        push(ModuleTag::Recovery, nn::conv_specs("dec.out.conv", 2, 2));
        push(ModuleTag::Recovery, nn::norm_specs("dec.out.norm", 2));
        out
    }

    /// Exact scalar count over the manifest, split by module.
    pub fn count_params(&self) -> ParamCount {
        let mut count = ParamCount::default();
        for spec in self.manifest() {
            let numel: u64 = spec.shape.iter().map(|&e| e as u64).product();
            match spec.module {
                ModuleTag::FeatureExtraction => count.feature_extraction += numel,
                ModuleTag::Compression => count.compression += numel,
                ModuleTag::Uncompression => count.uncompression += numel,
                ModuleTag::Recovery => count.recovery += numel,
            }
        }
        count
    }
}

/// Bias-free closed form for the parallel (FCN + LSTM with hidden size N)
/// uncompression module: NM + 4N^2 + 4NM + 4N.
pub fn bias_free_parallel_uncompression(n: u64, m: u64) -> u64 {
    n * m + 4 * n * n + 4 * n * m + 4 * n
}

/// Bias-free closed form for the serial (LSTM with hidden size M + FCN)
/// uncompression module: NM + 4M^2 + 4M^2 + 4M.
pub fn bias_free_serial_uncompression(n: u64, m: u64) -> u64 {
    n * m + 8 * m * m + 4 * m
}

// ── materialized network ────────────────────────────────────────────────

/// Recurrent activations threaded across the steps of one sequence; reset
/// at every sequence boundary.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeqStates {
    enc: Option<LstmState>,
    dec: Option<LstmState>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ArchitectureKind,
    pub dims: ModelDims,
    enc_conv: nn::ConvIds,
    enc_fc: nn::DenseIds,
    enc_lstm: Option<nn::LstmIds>,
    dec_fc: nn::DenseIds,
    dec_lstm: Option<nn::LstmIds>,
    ref1: nn::RefineNetIds,
    ref2: nn::RefineNetIds,
    out_conv: nn::ConvIds,
    out_norm: nn::NormIds,
}

/// Materialize the network of `spec`: parameters in manifest order, filled
/// from `seed`, plus the forward procedures bundled as a `Model`.
pub fn build_network<S: Scalar>(
    spec: &ArchitectureSpec,
    seed: u64,
) -> Result<(ParameterSet<S>, Model)> {
    let mut params = ParameterSet::new();
    for t in spec.manifest() {
        params.add(t.name, t.shape, t.trainable, t.init)?;
    }
    params.materialize(&mut Prng::seeded(seed));
    debug_assert_eq!(params.total_scalars(), spec.count_params().total());

    let n = spec.dims.snapshot_len();
    let m = spec.dims.codeword_len;
    let (enc_lstm, dec_lstm) = match spec.kind {
        ArchitectureKind::CsiNet => (None, None),
        ArchitectureKind::RecCsiNet => (
            Some(nn::lookup_lstm(&params, "enc.lstm", n, m)),
            Some(nn::lookup_lstm(&params, "dec.lstm", m, n)),
        ),
        ArchitectureKind::PrRecCsiNet => (
            Some(nn::lookup_lstm(&params, "enc.lstm", m, m)),
            Some(nn::lookup_lstm(&params, "dec.lstm", m, m)),
        ),
    };
    let model = Model {
        kind: spec.kind,
        dims: spec.dims,
        enc_conv: nn::lookup_conv(&params, "enc.conv"),
        enc_fc: nn::lookup_dense(&params, "enc.fc"),
        enc_lstm,
        dec_fc: nn::lookup_dense(&params, "dec.fc"),
        dec_lstm,
        ref1: nn::lookup_refinenet(&params, "dec.ref1"),
        ref2: nn::lookup_refinenet(&params, "dec.ref2"),
        out_conv: nn::lookup_conv(&params, "dec.out.conv"),
        out_norm: nn::lookup_norm(&params, "dec.out.norm"),
    };
    Ok((params, model))
}

impl Model {
    pub fn spec(&self) -> ArchitectureSpec {
        ArchitectureSpec::new(self.kind, self.dims)
    }

    pub fn begin_sequence(&self) -> SeqStates {
        SeqStates::default()
    }

    /// Compress one batched snapshot [B, 2, delay_rows, antennas] into a
    /// codeword batch [M x B] with entries in (-1, 1).
    pub fn encoder_step<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: NodeId,
        states: &mut SeqStates,
    ) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let want = [2, self.dims.delay_rows, self.dims.antennas];
        if shape.len() != 4 || shape[1..] != want {
            return Err(CsiError::Dimension(format!(
                "encoder expects [B, 2, {}, {}], got {shape:?}",
                self.dims.delay_rows, self.dims.antennas
            )));
        }
        let batch = shape[0];

        let w = g.param(self.enc_conv.weight);
        let b = g.param(self.enc_conv.bias);
        let feat = g.conv2d_3x3(x, w, b)?;
        let feat = g.leaky_relu(feat, nn::LEAKY_SLOPE)?;
        let flat = g.flatten_samples(feat)?;

        let code = match self.kind {
            ArchitectureKind::CsiNet => nn::dense(g, &self.enc_fc, flat)?,
            ArchitectureKind::RecCsiNet => {
                let lstm = self.enc_lstm.as_ref().expect("rec encoder has an LSTM");
                let state = states
                    .enc
                    .unwrap_or_else(|| nn::lstm_zero_state(g, lstm, batch));
                let direct = nn::dense(g, &self.enc_fc, flat)?;
                let (mem, next) = nn::lstm_cell(g, lstm, flat, state)?;
                states.enc = Some(next);
                g.add(direct, mem)?
            }
            ArchitectureKind::PrRecCsiNet => {
                let lstm = self.enc_lstm.as_ref().expect("pr encoder has an LSTM");
                let state = states
                    .enc
                    .unwrap_or_else(|| nn::lstm_zero_state(g, lstm, batch));
                let projected = nn::dense(g, &self.enc_fc, flat)?;
                let (mem, next) = nn::lstm_cell(g, lstm, projected, state)?;
                states.enc = Some(next);
                g.add(projected, mem)?
            }
        };
        g.tanh(code)
    }

    /// Reconstruct one batched snapshot from a codeword batch [M x B].
    pub fn decoder_step<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        code: NodeId,
        states: &mut SeqStates,
    ) -> Result<NodeId> {
        let shape = g.shape(code).to_vec();
        if shape.len() != 2 || shape[0] != self.dims.codeword_len {
            return Err(CsiError::Dimension(format!(
                "decoder expects [{} x B], got {shape:?}",
                self.dims.codeword_len
            )));
        }
        let batch = shape[1];

        let wide = match self.kind {
            ArchitectureKind::CsiNet => nn::dense(g, &self.dec_fc, code)?,
            ArchitectureKind::RecCsiNet => {
                let lstm = self.dec_lstm.as_ref().expect("rec decoder has an LSTM");
                let state = states
                    .dec
                    .unwrap_or_else(|| nn::lstm_zero_state(g, lstm, batch));
                let direct = nn::dense(g, &self.dec_fc, code)?;
                let (mem, next) = nn::lstm_cell(g, lstm, code, state)?;
                states.dec = Some(next);
                g.add(direct, mem)?
            }
            ArchitectureKind::PrRecCsiNet => {
                let lstm = self.dec_lstm.as_ref().expect("pr decoder has an LSTM");
                let state = states
                    .dec
                    .unwrap_or_else(|| nn::lstm_zero_state(g, lstm, batch));
                let (mem, next) = nn::lstm_cell(g, lstm, code, state)?;
                states.dec = Some(next);
                let widened = g.add(code, mem)?;
                nn::dense(g, &self.dec_fc, widened)?
            }
        };
        let img = g.unflatten_samples(wide, 2, self.dims.delay_rows, self.dims.antennas)?;
        let img = nn::refinenet(g, &self.ref1, img)?;
        let img = nn::refinenet(g, &self.ref2, img)?;
        let w = g.param(self.out_conv.weight);
        let b = g.param(self.out_conv.bias);
        let img = g.conv2d_3x3(img, w, b)?;
        let scale = g.param(self.out_norm.scale);
        let shift = g.param(self.out_norm.shift);
        let mean = g.param(self.out_norm.mean);
        let var = g.param(self.out_norm.var);
        let img = g.channel_norm(img, scale, shift, mean, var, nn::NORM_EPS)?;
        g.sigmoid(img)
    }

    /// Encode-decode a whole sequence (states reset at entry); returns the
    /// per-step reconstructions.
    pub fn forward_sequence<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        step_inputs: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut states = self.begin_sequence();
        let mut outputs = Vec::with_capacity(step_inputs.len());
        for &x in step_inputs {
            let code = self.encoder_step(g, x, &mut states)?;
            outputs.push(self.decoder_step(g, code, &mut states)?);
        }
        Ok(outputs)
    }

    /// Parameter ids of the decoder half (uncompression + recovery), for
    /// decoder-only fine-tuning.
    pub fn decoder_param_ids<S: Scalar>(&self, params: &ParameterSet<S>) -> Vec<crate::params::ParamId> {
        params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable && e.name.starts_with("dec."))
            .map(|(i, _)| crate::params::ParamId(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(gamma: Gamma) -> ModelDims {
        ModelDims::with_defaults(gamma).unwrap()
    }

    #[test]
    fn gamma_parses_fractions() {
        assert_eq!(Gamma::parse("1/16").unwrap(), Gamma { num: 1, den: 16 });
        assert_eq!(Gamma::parse("1").unwrap(), Gamma { num: 1, den: 1 });
        assert!(Gamma::parse("x/y").is_err());
        assert!(Gamma::parse("0/4").is_err());
    }

    #[test]
    fn default_dims_match_the_reference_setup() {
        let d = dims(Gamma::new(1, 16).unwrap());
        assert_eq!(d.snapshot_len(), 2048);
        assert_eq!(d.codeword_len, 128);
        assert!((d.gamma() - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn non_integer_codeword_rejected() {
        // N = 2048; gamma = 1/3 does not divide it.
        let err = ModelDims::new(32, 1024, 32, 4, Gamma::new(1, 3).unwrap()).unwrap_err();
        assert!(matches!(err, CsiError::Config(_)));
    }

    #[test]
    fn manifest_is_deterministic() {
        let spec = ArchitectureSpec::new(ArchitectureKind::RecCsiNet, dims(Gamma::new(1, 16).unwrap()));
        let a = spec.manifest();
        let b = spec.manifest();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
        }
    }

    #[test]
    fn built_network_scalar_count_equals_audit() {
        for kind in ArchitectureKind::ALL {
            let spec = ArchitectureSpec::new(kind, dims(Gamma::new(1, 32).unwrap()));
            let (params, _) = build_network::<f32>(&spec, 7).unwrap();
            assert_eq!(params.total_scalars(), spec.count_params().total());
        }
    }

    #[test]
    fn refinenet_parameter_count() {
        // Convs (2.8.9+8) + (8.16.9+16) + (16.2.9+2) = 1,610 plus
        // 4 normalization values for each of the 26 channels = 104.
        let spec = ArchitectureSpec::new(ArchitectureKind::CsiNet, dims(Gamma::new(1, 16).unwrap()));
        let one_block: u64 = spec
            .manifest()
            .iter()
            .filter(|t| t.name.starts_with("dec.ref1."))
            .map(|t| t.shape.iter().map(|&e| e as u64).product::<u64>())
            .sum();
        assert_eq!(one_block, 1714);
    }
}
