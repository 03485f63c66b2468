//! Binary cache of scaled ACAP features.
//!
//! Layout: `ACAPF01\n`, little-endian u32 `N`, `V`, `mu`, one convention flag
//! byte, `N*V*mu` little-endian f64 in shape-major then vertex-major order,
//! and a JSON trailer `{"scaler": ...}` running to end of file.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AcapFeature, FeatureScaler, MU};
use crate::error::FormatError;

pub const CACHE_MAGIC: &[u8; 8] = b"ACAPF01\n";

/// Convention flag: the s block holds raw upper-triangular entries of `S`.
pub const S_BLOCK_RAW: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub features: Vec<AcapFeature>,
    pub scaler: FeatureScaler,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    scaler: FeatureScaler,
}

impl FeatureCache {
    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let n = self.features.len();
        let v = self.features.first().map_or(0, AcapFeature::vertex_count);
        if self.features.iter().any(|f| f.vertex_count() != v) {
            return Err(FormatError::Header("features differ in vertex count".into()));
        }
        let mut out = Vec::with_capacity(8 + 13 + n * v * MU * 8 + 256);
        out.extend_from_slice(CACHE_MAGIC);
        for dim in [n, v, MU] {
            let dim = u32::try_from(dim).map_err(|_| FormatError::Header(format!("dimension {dim} too large")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        out.push(S_BLOCK_RAW);
        for f in &self.features {
            for x in f.flat() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        serde_json::to_writer(&mut out, &Trailer { scaler: self.scaler })
            .map_err(|e| FormatError::Header(e.to_string()))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let rest = bytes.strip_prefix(CACHE_MAGIC.as_slice()).ok_or(FormatError::BadMagic)?;
        if rest.len() < 13 {
            return Err(FormatError::Truncated);
        }
        let dim = |k: usize| u32::from_le_bytes(rest[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
        let (n, v, mu) = (dim(0), dim(1), dim(2));
        if mu != MU {
            return Err(FormatError::Header(format!("expected {MU} channels, found {mu}")));
        }
        if rest[12] != S_BLOCK_RAW {
            return Err(FormatError::Convention(rest[12]));
        }
        let body = &rest[13..];
        let floats = n
            .checked_mul(v)
            .and_then(|x| x.checked_mul(MU * 8))
            .ok_or_else(|| FormatError::Header("dimensions overflow".into()))?;
        if body.len() < floats {
            return Err(FormatError::Truncated);
        }
        let mut values = body[..floats].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let features = (0..n)
            .map(|_| {
                AcapFeature::new(
                    (0..v).map(|_| std::array::from_fn(|_| values.next().expect("length checked"))).collect(),
                )
            })
            .collect();
        let trailer: Trailer =
            serde_json::from_slice(&body[floats..]).map_err(|e| FormatError::Header(format!("trailer: {e}")))?;
        Ok(Self { features, scaler: trailer.scaler })
    }
}

pub fn write_feature_cache(path: &Path, cache: &FeatureCache) -> Result<(), FormatError> {
    let io = |source| FormatError::Io { path: path.to_path_buf(), source };
    let bytes = cache.to_bytes()?;
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureCache, FormatError> {
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    FeatureCache::from_bytes(&bytes)
}
