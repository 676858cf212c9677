//! CSIQ feedback payload wire format: magic "CSIQ", u8 version=1, u8 bits,
//! u16 M (little-endian), u8 step index, then the packed index bytes.

use anyhow::{bail, Result};

use csi_core::quant::{packed_len, CodewordPayload};

const MAGIC: &[u8; 4] = b"CSIQ";
const VERSION: u8 = 1;

pub fn encode(payload: &CodewordPayload) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + payload.packed.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(payload.bits);
    out.extend_from_slice(&payload.m.to_le_bytes());
    out.push(payload.step);
    out.extend_from_slice(&payload.packed);
    out
}

pub fn decode(bytes: &[u8]) -> Result<CodewordPayload> {
    if bytes.len() < 9 {
        bail!("payload frame too short: {} bytes", bytes.len());
    }
    if &bytes[0..4] != MAGIC {
        bail!("not a CSIQ payload frame");
    }
    if bytes[4] != VERSION {
        bail!("unsupported CSIQ version {}", bytes[4]);
    }
    let bits = bytes[5];
    let m = u16::from_le_bytes([bytes[6], bytes[7]]);
    let step = bytes[8];
    let packed = bytes[9..].to_vec();
    let expect = packed_len(m as usize, bits);
    if packed.len() != expect {
        bail!(
            "CSIQ frame carries {} packed bytes, expected {expect} for m={m} bits={bits}",
            packed.len()
        );
    }
    Ok(CodewordPayload {
        m,
        bits,
        step,
        packed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use csi_core::quant;
    use csi_core::rng::Prng;
    use csi_core::tensor::Tensor;

    #[test]
    fn frame_round_trip() {
        let mut rng = Prng::seeded(8);
        for bits in [6u8, 8] {
            for m in [5usize, 32, 128] {
                let values: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let t = Tensor::<f64>::from_vec(vec![m], values).unwrap();
                let p = quant::quantize(&t, bits, 2).unwrap();
                let frame = encode(&p);
                assert_eq!(frame.len(), 9 + packed_len(m, bits));
                let back = decode(&frame).unwrap();
                assert_eq!(back, p);
            }
        }
    }

    #[test]
    fn corrupted_frames_rejected() {
        let t = Tensor::<f64>::zeros(vec![16]);
        let p = quant::quantize(&t, 8, 0).unwrap();
        let frame = encode(&p);
        assert!(decode(&frame[..5]).is_err());
        let mut bad_magic = frame.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        let mut short = frame.clone();
        short.pop();
        assert!(decode(&short).is_err());
        let mut long = frame;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
