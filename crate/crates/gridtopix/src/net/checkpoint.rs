//! Portable network checkpoints.
//!
//! Layout: 8-byte magic `GTPXCKPT`, u32 LE header length, JSON header,
//! little-endian f32 payload. The header carries the format version, the
//! architecture descriptor, a tensor manifest (name/shape/byte offset) and
//! training metadata. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ArchDescriptor, PolicyNet};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GTPXCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct CheckpointMeta {
    pub global_step: u64,
    pub seed: u64,
    pub routine: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    /// Present for policy checkpoints; absent for bare tensor containers
    /// (e.g. optimizer sidecars).
    arch: Option<ArchDescriptor>,
    manifest: Vec<ManifestEntry>,
    metadata: CheckpointMeta,
}

fn write_container(
    path: &Path,
    arch: Option<&ArchDescriptor>,
    tensors: &[(String, &Tensor<f32>)],
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        arch: arch.cloned(),
        manifest,
        metadata: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&payload)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<(String, Tensor<f32>)>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Validation(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::CheckpointTruncated {
            expected: 12 + header_len,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.version,
            supported: FORMAT_VERSION,
        });
    }
    let payload = &bytes[12 + header_len..];

    // Manifest bounds and overlap checks before any tensor is materialized.
    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    for e in &header.manifest {
        let numel: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(numel * 4)
            .ok_or_else(|| Error::CheckpointManifest { name: e.name.clone() })?;
        if end > payload.len() {
            if payload.len() < expected_payload_len(&header.manifest) {
                return Err(Error::CheckpointTruncated {
                    expected: 12 + header_len + expected_payload_len(&header.manifest),
                    found: bytes.len(),
                });
            }
            return Err(Error::CheckpointManifest { name: e.name.clone() });
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort_by_key(|s| s.0);
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::CheckpointManifest {
                name: w[1].2.to_string(),
            });
        }
    }

    let mut tensors = Vec::with_capacity(header.manifest.len());
    for e in &header.manifest {
        let numel: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = e.offset + i * 4;
            data.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
        }
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok((header, tensors))
}

fn expected_payload_len(manifest: &[ManifestEntry]) -> usize {
    manifest
        .iter()
        .map(|e| e.offset + e.shape.iter().product::<usize>() * 4)
        .max()
        .unwrap_or(0)
}

pub fn save_checkpoint(net: &PolicyNet<f32>, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let tensors: Vec<(String, &Tensor<f32>)> = net
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    write_container(path, Some(&net.arch), &tensors, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyNet<f32>, CheckpointMeta)> {
    let (header, tensors) = read_container(path)?;
    let arch = header
        .arch
        .ok_or_else(|| Error::CheckpointArch("container has no architecture descriptor".into()))?;
    let mut params = ParamSet::new();
    for (name, t) in tensors {
        params.add(&name, t);
    }
    let net = PolicyNet { arch, params };
    // The descriptor is authoritative; verify the payload actually delivers
    // every parameter a freshly built net of this architecture would have.
    let reference: ParamSet<f32> = super::init_params(&net.arch, &mut {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    });
    for (name, t) in reference.iter() {
        let slot = net
            .params
            .slot_of(name)
            .ok_or_else(|| Error::CheckpointArch(format!("missing tensor {name}")))?;
        if net.params.get(slot).shape() != t.shape() {
            return Err(Error::CheckpointArch(format!(
                "tensor {name} has shape {:?}, architecture requires {:?}",
                net.params.get(slot).shape(),
                t.shape()
            )));
        }
    }
    net.params.check_finite("checkpoint load")?;
    Ok((net, header.metadata))
}

/// Bare named-tensor container (no architecture), used for optimizer state.
pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f32>)], meta: &CheckpointMeta) -> Result<()> {
    let refs: Vec<(String, &Tensor<f32>)> =
        tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(path, None, &refs, meta)
}

pub fn load_tensors(path: &Path) -> Result<(Vec<(String, Tensor<f32>)>, CheckpointMeta)> {
    let (header, tensors) = read_container(path)?;
    Ok((tensors, header.metadata))
}
