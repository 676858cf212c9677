//! Uniform mid-rise quantization of codewords in (-1, 1) and the bit-packed
//! feedback payload.
//!
//! Cells have width 2 / 2^bits; reconstruction is the cell midpoint. Packing
//! is big-endian within bytes, first element in the most significant bits.

use alloc::format;
use alloc::vec::Vec;

use crate::error::CsiError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Tolerated overshoot beyond the closed interval [-1, 1].
const DOMAIN_SLACK: f64 = 1e-6;

/// Quantized feedback message for one time step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodewordPayload {
    /// Codeword length.
    pub m: u16,
    /// Bits per element, 1..=16.
    pub bits: u8,
    /// Step index within the sequence.
    pub step: u8,
    /// ceil(m * bits / 8) bytes.
    pub packed: Vec<u8>,
}

pub fn packed_len(m: usize, bits: u8) -> usize {
    (m * bits as usize + 7) / 8
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(CsiError::Config(format!(
            "bit width must be in 1..=16, got {bits}"
        )));
    }
    Ok(())
}

/// Cell width of the quantizer at the given bit depth.
pub fn cell_width(bits: u8) -> f64 {
    2.0 / (1u32 << bits) as f64
}

/// Map one value in [-1, 1] to its cell index:
/// clamp(floor((x + 1) / delta), 0, 2^bits - 1).
pub fn quantize_value(x: f64, bits: u8) -> Result<u16> {
    if !x.is_finite() || x < -1.0 - DOMAIN_SLACK || x > 1.0 + DOMAIN_SLACK {
        return Err(CsiError::Contract(format!(
            "quantizer input {x} outside [-1, 1]"
        )));
    }
    let levels = 1u32 << bits;
    let idx = libm::floor((x + 1.0) / cell_width(bits));
    let idx = if idx < 0.0 {
        0
    } else if idx >= levels as f64 {
        levels - 1
    } else {
        idx as u32
    };
    Ok(idx as u16)
}

/// Midpoint of the cell with the given index: -1 + (index + 0.5) * delta.
pub fn dequantize_index(index: u16, bits: u8) -> f64 {
    -1.0 + (index as f64 + 0.5) * cell_width(bits)
}

/// Quantize a codeword tensor into a payload for step `step`.
pub fn quantize<S: Scalar>(codeword: &Tensor<S>, bits: u8, step: u8) -> Result<CodewordPayload> {
    check_bits(bits)?;
    if codeword.shape().len() != 1 {
        return Err(CsiError::Dimension(format!(
            "codeword must be rank 1, got {:?}",
            codeword.shape()
        )));
    }
    let m = codeword.numel();
    if m > u16::MAX as usize {
        return Err(CsiError::Config(format!("codeword length {m} exceeds u16")));
    }
    let mut indices = Vec::with_capacity(m);
    for &v in codeword.data() {
        indices.push(quantize_value(v.to_f64(), bits)?);
    }
    Ok(CodewordPayload {
        m: m as u16,
        bits,
        step,
        packed: pack_bits(&indices, bits),
    })
}

/// Reconstruct the codeword as cell midpoints.
pub fn dequantize<S: Scalar>(payload: &CodewordPayload) -> Result<Tensor<S>> {
    let indices = unpack_payload(payload)?;
    let values: Vec<S> = indices
        .iter()
        .map(|&i| S::from_f64(dequantize_index(i, payload.bits)))
        .collect();
    Tensor::from_vec(alloc::vec![payload.m as usize], values)
}

/// Validate the payload framing and unpack its indices.
pub fn unpack_payload(payload: &CodewordPayload) -> Result<Vec<u16>> {
    check_bits(payload.bits)?;
    let expect = packed_len(payload.m as usize, payload.bits);
    if payload.packed.len() != expect {
        return Err(CsiError::Format(format!(
            "payload holds {} bytes, expected {expect} for m={} bits={}",
            payload.packed.len(),
            payload.m,
            payload.bits
        )));
    }
    unpack_bits(&payload.packed, payload.bits, payload.m as usize)
}

/// Pack indices MSB-first: the first element occupies the most significant
/// bits of the first byte; the final byte is zero-padded on the right.
pub fn pack_bits(indices: &[u16], bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(packed_len(indices.len(), bits));
    let mut acc: u32 = 0;
    let mut pending: u32 = 0;
    let mask = ((1u32 << bits) - 1) as u16;
    for &idx in indices {
        acc = (acc << bits) | (idx & mask) as u32;
        pending += bits as u32;
        while pending >= 8 {
            out.push((acc >> (pending - 8)) as u8);
            pending -= 8;
            acc &= (1 << pending) - 1;
        }
    }
    if pending > 0 {
        out.push((acc << (8 - pending)) as u8);
    }
    out
}

/// Unpack `count` indices of `bits` width; errors if the buffer is short.
pub fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u16>> {
    let needed = packed_len(count, bits);
    if bytes.len() < needed {
        return Err(CsiError::Format(format!(
            "need {needed} bytes for {count} x {bits}-bit indices, got {}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut have: u32 = 0;
    let mut pos = 0usize;
    for _ in 0..count {
        while have < bits as u32 {
            acc = (acc << 8) | bytes[pos] as u32;
            pos += 1;
            have += 8;
        }
        out.push(((acc >> (have - bits as u32)) & ((1u32 << bits) - 1)) as u16);
        have -= bits as u32;
        acc &= (1 << have) - 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn boundary_values_hit_boundary_cells() {
        assert_eq!(quantize_value(-1.0, 8).unwrap(), 0);
        assert_eq!(quantize_value(1.0 - 1e-9, 8).unwrap(), 255);
        assert_eq!(quantize_value(0.0, 8).unwrap(), 128);
        // Closed endpoints saturate.
        assert_eq!(quantize_value(1.0, 8).unwrap(), 255);
        assert_eq!(quantize_value(1.0 + 0.5e-6, 8).unwrap(), 255);
        assert!(quantize_value(1.1, 8).is_err());
        assert!(quantize_value(-1.1, 8).is_err());
    }

    #[test]
    fn first_cell_midpoint() {
        assert_eq!(dequantize_index(0, 8), -0.99609375);
    }

    #[test]
    fn round_trip_error_bounded_on_dense_grid() {
        for bits in [6u8, 8] {
            let half_cell = cell_width(bits) / 2.0;
            let steps = 40_001;
            for k in 0..steps {
                let x = -1.0 + 2.0 * (k as f64 + 0.5) / steps as f64;
                let idx = quantize_value(x, bits).unwrap();
                let back = dequantize_index(idx, bits);
                assert!(
                    (x - back).abs() <= half_cell + 1e-15,
                    "bits={bits} x={x} back={back}"
                );
            }
        }
    }

    #[test]
    fn quantize_dequantize_is_idempotent() {
        let mut rng = crate::rng::Prng::seeded(4);
        for bits in [1u8, 6, 8, 12, 16] {
            let values: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let t = Tensor::<f64>::from_vec(vec![64], values).unwrap();
            let p = quantize(&t, bits, 0).unwrap();
            let d = dequantize::<f64>(&p).unwrap();
            let p2 = quantize(&d, bits, 0).unwrap();
            assert_eq!(p, p2, "bits={bits}");
        }
    }

    #[test]
    fn payload_length_is_exact() {
        let t = Tensor::<f32>::zeros(vec![128]);
        let p = quantize(&t, 8, 1).unwrap();
        assert_eq!(p.packed.len(), 128);
        let p6 = quantize(&t, 6, 1).unwrap();
        assert_eq!(p6.packed.len(), 96); // 128 * 6 / 8
        let t5 = Tensor::<f32>::zeros(vec![5]);
        assert_eq!(quantize(&t5, 6, 0).unwrap().packed.len(), 4); // ceil(30/8)
    }

    #[test]
    fn corrupted_length_rejected() {
        let t = Tensor::<f64>::zeros(vec![16]);
        let mut p = quantize(&t, 8, 0).unwrap();
        p.packed.pop();
        assert!(matches!(dequantize::<f64>(&p), Err(CsiError::Format(_))));
    }

    #[test]
    fn msb_first_packing_layout() {
        // Two 6-bit indices 0b101010, 0b000011 pack as
        // 10101000 0011xxxx with zero padding.
        let packed = pack_bits(&[0b101010, 0b000011], 6);
        assert_eq!(packed, vec![0b1010_1000, 0b0011_0000]);
        let back = unpack_bits(&packed, 6, 2).unwrap();
        assert_eq!(back, vec![0b101010, 0b000011]);
    }

    #[test]
    fn pack_unpack_random_round_trips() {
        let mut rng = crate::rng::Prng::seeded(77);
        for _ in 0..200 {
            let bits = 1 + (rng.below(16)) as u8;
            let count = 1 + rng.below(70) as usize;
            let mask = ((1u32 << bits) - 1) as u16;
            let indices: Vec<u16> = (0..count).map(|_| rng.next_u64() as u16 & mask).collect();
            let packed = pack_bits(&indices, bits);
            assert_eq!(packed.len(), packed_len(count, bits));
            let back = unpack_bits(&packed, bits, count).unwrap();
            assert_eq!(back, indices, "bits={bits} count={count}");
        }
    }
}
