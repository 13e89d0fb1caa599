//! Flat binary weights files.
//!
//! Layout: magic `STLB`, format version, architecture dims, the init seed,
//! then every parameter matrix in [`DecoderWeights::matrices`] order as
//! `rows: u32, cols: u32, data: f64 LE`. A `.sha256` sidecar written next to
//! the file pins the golden checksum.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, SteerError};
use crate::model::{DecoderWeights, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STLB";
const VERSION: u32 = 1;

pub fn to_bytes(weights: &DecoderWeights) -> Vec<u8> {
    let c = &weights.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        c.dim as u32,
        c.layers as u32,
        c.heads as u32,
        c.mlp_hidden as u32,
        c.grid_height as u32,
        c.grid_width as u32,
        c.classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&weights.seed.to_le_bytes());
    let matrices = weights.matrices();
    out.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for (_, m) in matrices {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        out.extend_from_slice(&m.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SteerError::parse("weights file", "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<DecoderWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(SteerError::parse("weights file", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SteerError::parse(
            "weights file",
            format!("unsupported version {version}"),
        ));
    }
    let config = ModelConfig {
        dim: r.u32()? as usize,
        layers: r.u32()? as usize,
        heads: r.u32()? as usize,
        mlp_hidden: r.u32()? as usize,
        grid_height: r.u32()? as usize,
        grid_width: r.u32()? as usize,
        classes: r.u32()? as usize,
    };
    config.validate()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;

    let mut weights = DecoderWeights::init(config, seed)?;
    let expected = weights.matrices().len();
    if count != expected {
        return Err(SteerError::parse(
            "weights file",
            format!("{count} matrices, expected {expected}"),
        ));
    }
    let shapes: Vec<(usize, usize)> = weights
        .matrices()
        .iter()
        .map(|(_, m)| (m.rows(), m.cols()))
        .collect();
    let names: Vec<String> = weights.matrices().iter().map(|(n, _)| n.clone()).collect();
    for (slot, ((rows, cols), name)) in weights
        .matrices_mut()
        .into_iter()
        .zip(shapes.into_iter().zip(names))
    {
        let got_rows = r.u32()? as usize;
        let got_cols = r.u32()? as usize;
        if (got_rows, got_cols) != (rows, cols) {
            return Err(SteerError::parse(
                "weights file",
                format!("{name}: {got_rows}x{got_cols}, expected {rows}x{cols}"),
            ));
        }
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(rows, cols, data)?;
        if !tensor.all_finite() {
            return Err(SteerError::NonFinite { op: "weights file" });
        }
        *slot = tensor;
    }
    if r.pos != bytes.len() {
        return Err(SteerError::parse("weights file", "trailing bytes"));
    }
    Ok(weights)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(weights: &DecoderWeights, path: &Path) -> Result<()> {
    let bytes = to_bytes(weights);
    fs::write(path, &bytes).map_err(|e| SteerError::io(format!("writing {}", path.display()), e))?;
    let checksum = sha256_hex(&bytes);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sidecar = path.with_extension(format!(
        "{}sha256",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    fs::write(&sidecar, format!("{checksum}  {name}\n"))
        .map_err(|e| SteerError::io(format!("writing {}", sidecar.display()), e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DecoderWeights> {
    let bytes =
        fs::read(path).map_err(|e| SteerError::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_bytes() {
        let weights = DecoderWeights::init(ModelConfig::default(), 99).unwrap();
        let bytes = to_bytes(&weights);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(weights, back);
    }

    #[test]
    fn rejects_corrupted_magic() {
        let weights = DecoderWeights::init(ModelConfig::default(), 99).unwrap();
        let mut bytes = to_bytes(&weights);
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_truncation() {
        let weights = DecoderWeights::init(ModelConfig::default(), 99).unwrap();
        let bytes = to_bytes(&weights);
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn save_writes_checksum_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.weights");
        let weights = DecoderWeights::init(ModelConfig::default(), 1).unwrap();
        weights.save(&path).unwrap();
        let sidecar = dir.path().join("toy.weights.sha256");
        let line = fs::read_to_string(sidecar).unwrap();
        let expected = sha256_hex(&to_bytes(&weights));
        assert!(line.starts_with(&expected));
        let loaded = DecoderWeights::load(&path).unwrap();
        assert_eq!(loaded, weights);
    }
}
