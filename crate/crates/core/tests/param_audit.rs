//! Exact parameter accounting of the three architectures at the reference
//! dimensions (N = 2048), against the published totals and the bias-free
//! module formulas.

use csi_core::arch::{
    bias_free_parallel_uncompression, bias_free_serial_uncompression, ArchitectureKind,
    ArchitectureSpec, Gamma, ModelDims,
};

fn spec(kind: ArchitectureKind, den: u32) -> ArchitectureSpec {
    let dims = ModelDims::with_defaults(Gamma::new(1, den).unwrap()).unwrap();
    ArchitectureSpec::new(kind, dims)
}

/// Published totals for gamma = 1/16, 1/32, 1/64.
const REC_TOTALS: [u64; 3] = [19_478_584, 18_118_392, 17_450_584];
const PR_TOTALS: [u64; 3] = [793_144, 333_816, 153_304];
const CSINET_TOTALS: [u64; 3] = [530_656, 268_448, 137_344];
const DENS: [u32; 3] = [16, 32, 64];

#[test]
fn reccsinet_totals_are_exact() {
    for (den, expect) in DENS.iter().zip(REC_TOTALS) {
        let count = spec(ArchitectureKind::RecCsiNet, *den).count_params();
        assert_eq!(count.total(), expect, "gamma = 1/{den}");
    }
}

#[test]
fn pr_reccsinet_totals_are_exact() {
    for (den, expect) in DENS.iter().zip(PR_TOTALS) {
        let count = spec(ArchitectureKind::PrRecCsiNet, *den).count_params();
        assert_eq!(count.total(), expect, "gamma = 1/{den}");
    }
}

#[test]
fn csinet_totals_within_one_percent() {
    // The published CsiNet rows exceed this reconstruction by a constant 680
    // whose origin is the baseline's unstated bookkeeping; the audit treats
    // anything under 1% as a match and documents the residual.
    for (den, expect) in DENS.iter().zip(CSINET_TOTALS) {
        let total = spec(ArchitectureKind::CsiNet, *den).count_params().total();
        let residual = expect - total;
        assert_eq!(residual, 680, "gamma = 1/{den}: audited {total} vs {expect}");
        let rel = residual as f64 / expect as f64;
        assert!(rel < 0.01, "gamma = 1/{den}: relative residual {rel}");
    }
}

#[test]
fn bias_free_formula_values() {
    // N = 2048, M = 128.
    assert_eq!(bias_free_parallel_uncompression(2048, 128), 18_096_128);
    assert_eq!(bias_free_serial_uncompression(2048, 128), 393_728);
    // M = 64 variant quoted by the CLI examples.
    assert_eq!(bias_free_serial_uncompression(2048, 64), 164_096);
}

#[test]
fn audited_uncompression_deltas_are_the_documented_bias_terms() {
    // Parallel uncompression: audited minus formula = N (the FCN bias).
    let rec = spec(ArchitectureKind::RecCsiNet, 16).count_params();
    assert_eq!(rec.uncompression, 18_098_176);
    assert_eq!(
        rec.uncompression - bias_free_parallel_uncompression(2048, 128),
        2048
    );
    // Serial uncompression: same delta.
    let pr = spec(ArchitectureKind::PrRecCsiNet, 16).count_params();
    assert_eq!(pr.uncompression, 395_776);
    assert_eq!(pr.uncompression - bias_free_serial_uncompression(2048, 128), 2048);
    let pr32 = spec(ArchitectureKind::PrRecCsiNet, 32).count_params();
    assert_eq!(pr32.uncompression, 166_144);
    assert_eq!(pr32.uncompression - bias_free_serial_uncompression(2048, 64), 2048);
}

#[test]
fn breakdown_modules_sum_to_total() {
    for kind in ArchitectureKind::ALL {
        for den in DENS {
            let c = spec(kind, den).count_params();
            assert_eq!(
                c.feature_extraction + c.compression + c.uncompression + c.recovery,
                c.total()
            );
        }
    }
    // Feature extraction is the 3x3x2->2 conv with bias for every kind.
    assert_eq!(spec(ArchitectureKind::CsiNet, 16).count_params().feature_extraction, 38);
    // Recovery: two 1,714-parameter refinement blocks plus the final
    // conv (38) and its 8 normalization values.
    assert_eq!(spec(ArchitectureKind::CsiNet, 16).count_params().recovery, 3474);
}

#[test]
fn encoder_codeword_length_follows_gamma() {
    let dims = ModelDims::with_defaults(Gamma::new(1, 16).unwrap()).unwrap();
    assert_eq!(dims.snapshot_len(), 2048);
    assert_eq!(dims.codeword_len, 128);
}
