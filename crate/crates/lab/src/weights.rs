//! CSIW weight files (little-endian): magic "CSIW", u32 version=1,
//! length-prefixed UTF-8 kind string, u32 N, u32 M, u32 tensor count; per
//! tensor: length-prefixed UTF-8 name, u32 rank, u32 extents, raw
//! 32-bit IEEE-754 values. Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use csi_core::params::ParameterSet;
use csi_core::Scalar;

const MAGIC: &[u8; 4] = b"CSIW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub kind: String,
    pub n: u32,
    pub m: u32,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn save<S: Scalar>(
    path: &Path,
    kind: &str,
    n: usize,
    m: usize,
    params: &ParameterSet<S>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_str(&mut out, kind);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for entry in params.entries() {
        write_str(&mut out, &entry.name);
        let shape = entry.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in entry.tensor.data() {
            out.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    fs::File::create(path)
        .with_context(|| format!("creating weights file {}", path.display()))?
        .write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<WeightsFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening weights file {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let mut c = 0usize;
    let take = |c: &mut usize, n: usize| -> Result<&[u8]> {
        if *c + n > bytes.len() {
            bail!("truncated weights file {}", path.display());
        }
        let s = &bytes[*c..*c + n];
        *c += n;
        Ok(s)
    };
    let rd_u32 = |c: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(c, 4)?.try_into().unwrap()))
    };
    let rd_str = |c: &mut usize| -> Result<String> {
        let len = rd_u32(c)? as usize;
        Ok(String::from_utf8(take(c, len)?.to_vec())?)
    };
    if take(&mut c, 4)? != MAGIC {
        bail!("{} is not a CSIW weights file", path.display());
    }
    let version = rd_u32(&mut c)?;
    if version != VERSION {
        bail!("unsupported CSIW version {version}");
    }
    let kind = rd_str(&mut c)?;
    let n = rd_u32(&mut c)?;
    let m = rd_u32(&mut c)?;
    let count = rd_u32(&mut c)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = rd_str(&mut c)?;
        let rank = rd_u32(&mut c)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd_u32(&mut c)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut c, numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for ch in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(ch.try_into().unwrap()));
        }
        tensors.push((name, shape, data));
    }
    if c != bytes.len() {
        bail!("trailing bytes in weights file {}", path.display());
    }
    Ok(WeightsFile {
        kind,
        n,
        m,
        tensors,
    })
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Overwrite `params` with the file's tensors; the sets must match exactly
/// by name and shape.
pub fn apply<S: Scalar>(file: &WeightsFile, params: &mut ParameterSet<S>) -> Result<()> {
    if file.tensors.len() != params.len() {
        bail!(
            "weights file holds {} tensors, network expects {}",
            file.tensors.len(),
            params.len()
        );
    }
    for (name, shape, data) in &file.tensors {
        let id = params
            .id_by_name(name)
            .with_context(|| format!("network has no parameter named {name}"))?;
        let entry = params.get_mut(id);
        if entry.tensor.shape() != shape.as_slice() {
            bail!(
                "shape mismatch for {name}: file {:?}, network {:?}",
                shape,
                entry.tensor.shape()
            );
        }
        for (dst, &src) in entry.tensor.data_mut().iter_mut().zip(data) {
            *dst = S::from_f32(src);
        }
    }
    Ok(())
}
