//! Committed golden payload frames, generated by an independent
//! implementation (tools/gen_golden_payloads.py). The wire format must
//! decode them exactly and re-encode them byte-identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use csi_lab::payload;
use serde::Deserialize;

#[derive(Deserialize)]
struct GoldenCase {
    bits: u8,
    step: u8,
    indices: Vec<u16>,
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn golden_frames_decode_and_reencode_bit_exactly() {
    let manifest: BTreeMap<String, GoldenCase> =
        serde_json::from_str(&fs::read_to_string(golden_dir().join("manifest.json")).unwrap())
            .unwrap();
    assert!(!manifest.is_empty());
    for (name, case) in manifest {
        let bytes = fs::read(golden_dir().join(format!("{name}.csiq"))).unwrap();
        let decoded = payload::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(decoded.bits, case.bits, "{name}");
        assert_eq!(decoded.step, case.step, "{name}");
        assert_eq!(decoded.m as usize, case.indices.len(), "{name}");
        let indices = csi_core::quant::unpack_payload(&decoded).unwrap();
        assert_eq!(indices, case.indices, "{name}");
        let reencoded = payload::encode(&decoded);
        assert_eq!(reencoded, bytes, "{name}: re-encode changed bytes");
    }
}

#[test]
fn quantizer_output_matches_a_golden_frame_end_to_end() {
    // Reconstruct the b8/m32 case from its dequantized values: quantizing
    // the cell midpoints reproduces the indices and therefore the bytes.
    let manifest: BTreeMap<String, GoldenCase> =
        serde_json::from_str(&fs::read_to_string(golden_dir().join("manifest.json")).unwrap())
            .unwrap();
    let case = &manifest["payload_b8_m32_s0"];
    let values: Vec<f64> = case
        .indices
        .iter()
        .map(|&i| csi_core::quant::dequantize_index(i, case.bits))
        .collect();
    let tensor = csi_core::Tensor::<f64>::from_vec(vec![values.len()], values).unwrap();
    let p = csi_core::quant::quantize(&tensor, case.bits, case.step).unwrap();
    let bytes = fs::read(golden_dir().join("payload_b8_m32_s0.csiq")).unwrap();
    assert_eq!(payload::encode(&p), bytes);
}
