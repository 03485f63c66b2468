//! Model checkpoint: `MDCA1`, a version byte, a little-endian u32 header
//! length, a JSON header, raw little-endian f64 blobs in header order, and a
//! CRC-32 over everything between the version byte and the checksum.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::components::{extract_components, ComponentMeta};
use super::{StackedParams, TrainConfig};
use crate::acap::{FeatureScaler, S_BLOCK_RAW};
use crate::error::FormatError;
use crate::mesh::{TriangleMesh, Vec3};
use crate::network::{AEBlockParams, GraphConvParams};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MDCA1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vertex_count: usize,
    face_count: usize,
    kz0: usize,
    kz1: usize,
    s_block_convention: u8,
    scaler: FeatureScaler,
    reference_name: String,
    faces: Vec<[usize; 3]>,
    blocks: Vec<BlockMeta>,
    components: Vec<ComponentMeta>,
    blobs: Vec<BlobMeta>,
}

#[derive(Serialize, Deserialize)]
struct BlockMeta {
    kz: usize,
    radius: f64,
    centers: Vec<usize>,
    /// One `0`/`1` character per mask entry.
    mask: String,
}

#[derive(Serialize, Deserialize)]
struct BlobMeta {
    name: String,
    len: usize,
}

const TENSOR_NAMES: [&str; 7] =
    ["enc.w_point", "enc.w_neighbor", "enc.b", "c", "dec.w_point", "dec.w_neighbor", "dec.b"];

/// Component metadata is recomputed from the model so the header always
/// agrees with the parameters.
pub fn model_to_bytes(model: &StackedParams) -> Vec<u8> {
    let set = extract_components(model, &model.graph(), model.config.probe_level1, model.config.probe_level2);
    let mut blobs: Vec<(String, Vec<f64>)> = Vec::new();
    blobs.push(("reference".into(), model.reference.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect()));
    for (b, ae) in model.blocks().enumerate() {
        for (name, t) in TENSOR_NAMES.iter().zip(ae.tensors()) {
            blobs.push((format!("block{b}.{name}"), t.to_vec()));
        }
    }
    let header = Header {
        config: model.config.clone(),
        vertex_count: model.vertex_count(),
        face_count: model.reference.face_count(),
        kz0: model.ae0.kz,
        kz1: model.second.first().map_or(model.config.kz1, |a| a.kz),
        s_block_convention: S_BLOCK_RAW,
        scaler: model.scaler,
        reference_name: model.reference.name.clone(),
        faces: model.reference.faces.clone(),
        blocks: model
            .blocks()
            .map(|ae| BlockMeta {
                kz: ae.kz,
                radius: ae.radius,
                centers: ae.centers.clone(),
                mask: ae.mask.iter().map(|&m| if m != 0 { '1' } else { '0' }).collect(),
            })
            .collect(),
        components: set.components.iter().map(ComponentMeta::from).collect(),
        blobs: blobs.iter().map(|(name, v)| BlobMeta { name: name.clone(), len: v.len() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 64 + blobs.iter().map(|b| b.1.len() * 8).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, values) in &blobs {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[CHECKPOINT_MAGIC.len() + 1..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<StackedParams, FormatError> {
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or(FormatError::BadMagic)?;
    let (&version, rest) = rest.split_first().ok_or(FormatError::Truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version { found: version, supported: CHECKPOINT_VERSION });
    }
    if rest.len() < 8 {
        return Err(FormatError::Checksum { stored: 0, computed: crc32fast::hash(rest) });
    }
    let (payload, tail) = rest.split_at(rest.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let header_len = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
    let body = &payload[4..];
    if body.len() < header_len {
        return Err(FormatError::Truncated);
    }
    let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| FormatError::Header(e.to_string()))?;
    if header.s_block_convention != S_BLOCK_RAW {
        return Err(FormatError::Convention(header.s_block_convention));
    }
    let mut data = &body[header_len..];
    let expected: usize = header.blobs.iter().map(|b| b.len * 8).sum();
    if data.len() != expected {
        return Err(FormatError::Header(format!("blob section is {} bytes, header declares {expected}", data.len())));
    }
    let mut take = |len: usize| -> Vec<f64> {
        let (chunk, rest) = data.split_at(len * 8);
        data = rest;
        chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    };
    let v = header.vertex_count;
    let mut blob_iter = header.blobs.iter();
    let mut next_blob = |expected_name: &str, expected_len: usize| -> Result<Vec<f64>, FormatError> {
        let meta = blob_iter.next().ok_or_else(|| FormatError::Header(format!("missing blob {expected_name}")))?;
        if meta.name != expected_name || meta.len != expected_len {
            return Err(FormatError::Header(format!(
                "blob {} ({}) where {expected_name} ({expected_len}) expected",
                meta.name, meta.len
            )));
        }
        Ok(take(meta.len))
    };
    let positions: Vec<Vec3> =
        next_blob("reference", 3 * v)?.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect();
    let mut reference = TriangleMesh::new(positions, header.faces);
    reference.name = header.reference_name;
    if reference.face_count() != header.face_count {
        return Err(FormatError::Header("face count mismatch".into()));
    }
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for (b, meta) in header.blocks.iter().enumerate() {
        let width = meta.kz * v * crate::acap::MU;
        let mut t = Vec::with_capacity(7);
        for (name, len) in TENSOR_NAMES.iter().zip([81, 81, 9, width, 81, 81, 9]) {
            t.push(next_blob(&format!("block{b}.{name}"), len)?);
        }
        let mask: Vec<u8> = meta
            .mask
            .bytes()
            .map(|c| match c {
                b'0' => Ok(0),
                b'1' => Ok(1),
                other => Err(FormatError::Header(format!("bad mask character {:?}", other as char))),
            })
            .collect::<Result<_, _>>()?;
        if mask.len() != meta.kz * v || meta.centers.len() != meta.kz || meta.centers.iter().any(|&c| c >= v) {
            return Err(FormatError::Header(format!("block {b} mask or centers malformed")));
        }
        let mut t = t.into_iter();
        let mut conv = || GraphConvParams {
            w_point: t.next().expect("7 tensors"),
            w_neighbor: t.next().expect("7 tensors"),
            b: t.next().expect("7 tensors"),
        };
        let conv_enc = conv();
        let c = t.next().expect("7 tensors");
        let conv_dec = GraphConvParams {
            w_point: t.next().expect("7 tensors"),
            w_neighbor: t.next().expect("7 tensors"),
            b: t.next().expect("7 tensors"),
        };
        blocks.push(AEBlockParams {
            conv_enc,
            c,
            conv_dec,
            kz: meta.kz,
            vertex_count: v,
            radius: meta.radius,
            centers: meta.centers.clone(),
            mask,
        });
    }
    if blocks.is_empty() {
        return Err(FormatError::Header("no blocks".into()));
    }
    let ae0 = blocks.remove(0);
    Ok(StackedParams { config: header.config, ae0, second: blocks, scaler: header.scaler, reference })
}

pub fn save_model(model: &StackedParams, path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, model_to_bytes(model)).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(path: &Path) -> Result<StackedParams, FormatError> {
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    model_from_bytes(&bytes)
}

/// Component metadata stored in a checkpoint header, without decoding.
pub fn checkpoint_components(bytes: &[u8]) -> Result<Vec<ComponentMeta>, FormatError> {
    model_from_bytes(bytes)?;
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(&bytes[10..10 + header_len]).map_err(|e| FormatError::Header(e.to_string()))?;
    Ok(header.components)
}
