//! Checkpoint container: a versioned header followed by named sections
//! holding the experiment config, one tensor per parameter, and the
//! bit-packed prune masks.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CapsNetParams, DerivedDims};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;
const KIND_MASK: u8 = 2;

/// In-memory checkpoint: config text plus ordered tensor and mask sections.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
    pub masks: Vec<(String, Vec<bool>)>,
}

impl Checkpoint {
    pub fn from_params(
        config_text: String,
        params: &CapsNetParams,
        masks: Option<&BTreeMap<String, Vec<bool>>>,
    ) -> Self {
        let tensors = params
            .named()
            .iter()
            .map(|(n, t)| (n.to_string(), (*t).clone()))
            .collect();
        let masks = masks
            .map(|m| m.iter().map(|(n, v)| (n.clone(), v.clone())).collect())
            .unwrap_or_default();
        Checkpoint {
            config_text,
            tensors,
            masks,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor section '{name}'")))
    }

    pub fn mask(&self, name: &str) -> Option<&[bool]> {
        self.masks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.as_slice())
    }

    /// Reassemble the parameter struct; shapes are validated against the
    /// dims derived from the stored config by the caller.
    pub fn to_params(&self) -> Result<CapsNetParams> {
        Ok(CapsNetParams {
            conv1_kernels: self.tensor("conv1.kernels")?.clone(),
            conv1_bias: self.tensor("conv1.bias")?.clone(),
            primary_kernels: self.tensor("primary.kernels")?.clone(),
            primary_bias: self.tensor("primary.bias")?.clone(),
            w: self.tensor("w")?.clone(),
            b_prior: self.tensor("b_prior")?.clone(),
        })
    }

    pub fn validate_shapes(&self, dims: &DerivedDims) -> Result<()> {
        let w = self.tensor("w")?;
        if w.shape().first() != Some(&dims.num_primary) {
            return Err(Error::Format(format!(
                "checkpoint W has {:?} rows, config derives I = {}",
                w.shape().first(),
                dims.num_primary
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = 1 + self.tensors.len() + self.masks.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());

        write_section(&mut out, "config", KIND_TEXT, self.config_text.as_bytes());
        for (name, t) in &self.tensors {
            write_section(&mut out, name, KIND_TENSOR, &t.to_bytes());
        }
        for (name, mask) in &self.masks {
            write_section(&mut out, name, KIND_MASK, &pack_mask(mask));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:02x?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut config_text = None;
        let mut tensors = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..count {
            let (name, kind, payload) = read_section(&mut r)?;
            match kind {
                KIND_TEXT => {
                    config_text = Some(String::from_utf8(payload).map_err(|e| {
                        Error::Format(format!("config section is not UTF-8: {e}"))
                    })?)
                }
                KIND_TENSOR => tensors.push((name, Tensor::from_bytes(&payload)?)),
                KIND_MASK => masks.push((name, unpack_mask(&payload)?)),
                other => {
                    return Err(Error::Format(format!("unknown section kind {other}")));
                }
            }
        }
        Ok(Checkpoint {
            config_text: config_text
                .ok_or_else(|| Error::Format("checkpoint has no config section".into()))?,
            tensors,
            masks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

fn write_section(out: &mut Vec<u8>, name: &str, kind: u8, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn read_section(r: &mut impl Read) -> Result<(String, u8, Vec<u8>)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("implausible section name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok((
        String::from_utf8(name).map_err(|e| Error::Format(format!("bad section name: {e}")))?,
        kind[0],
        payload,
    ))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Little-endian bit packing: bit i lives in byte i/8 at position i%8.
fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mask.len().div_ceil(8));
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    let mut byte = 0u8;
    for (i, &alive) in mask.iter().enumerate() {
        if alive {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if mask.len() % 8 != 0 {
        out.push(byte);
    }
    out
}

fn unpack_mask(payload: &[u8]) -> Result<Vec<bool>> {
    if payload.len() < 8 {
        return Err(Error::Format("mask section too short".into()));
    }
    let n = u64::from_le_bytes(payload[..8].try_into().unwrap()) as usize;
    let bytes = &payload[8..];
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Format(format!(
            "mask payload has {} bytes for {} bits",
            bytes.len(),
            n
        )));
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}
