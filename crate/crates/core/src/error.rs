use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: face has {count} vertices, only triangles are supported")]
    NonTriangularFace { line: usize, count: usize },
    #[error("vertex index {index} out of range for {vertex_count} vertices{}", .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    IndexOutOfRange { index: usize, vertex_count: usize, line: Option<usize> },
    #[error("empty mesh")]
    EmptyMesh,
    #[error("vertex {vertex} has a non-finite position")]
    NonFinitePosition { vertex: usize },
    #[error("face {face} repeats a vertex")]
    DegenerateFace { face: usize },
    #[error("edge ({a}, {b}) is shared by more than two faces")]
    NonManifoldEdge { a: usize, b: usize },
    #[error("vertex {vertex} is unreachable from vertex {from}")]
    Unreachable { from: usize, vertex: usize },
    #[error("mesh {index} does not share the reference connectivity")]
    ConnectivityMismatch { index: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum AcapError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("vertex {vertex}: deformation gradient normal matrix is singular")]
    SingularNormalMatrix { vertex: usize },
    #[error("vertex {vertex}: deformation gradient has non-positive determinant {det:e}")]
    NonPositiveDeterminant { vertex: usize, det: f64 },
    #[error("need at least {needed} shapes, got {got}")]
    TooFewShapes { needed: usize, got: usize },
    #[error("reference index {index} out of range for {count} shapes")]
    BadReference { index: usize, count: usize },
    #[error("feature has {got} vertices, expected {expected}")]
    FeatureSize { expected: usize, got: usize },
    #[error("reconstruction system is rank deficient (mesh disconnected at vertex {vertex})")]
    RankDeficient { vertex: usize },
    #[error("anchor vertex {anchor} out of range")]
    BadAnchor { anchor: usize },
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: u8, supported: u8 },
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported s-block convention flag {0}")]
    Convention(u8),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{ground} ground shapes but {recon} reconstructions")]
    CountMismatch { ground: usize, recon: usize },
    #[error("shape {index}: reconstruction does not share the ground connectivity")]
    Connectivity { index: usize },
    #[error("shape {index}: ground feature has zero norm")]
    ZeroNorm { index: usize },
    #[error("shape {index}: feature sizes differ")]
    FeatureSize { index: usize },
    #[error("shape {index}: edge ({a}, {b}) has zero ground length")]
    ZeroEdge { index: usize, a: usize, b: usize },
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Error)]
pub enum EditError {
    #[error(transparent)]
    Acap(#[from] AcapError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("no level {level} latent {index} in block {ae}")]
    BadIndex { level: u8, ae: usize, index: usize },
    #[error("weight for level {level} block {ae} latent {index} is not finite")]
    NonFiniteWeight { level: u8, ae: usize, index: usize },
    #[error("constraint {index}: {message}")]
    BadConstraint { index: usize, message: String },
    #[error("no usable constraints")]
    NoConstraints,
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("{path}: {message}")]
    File { path: std::path::PathBuf, message: String },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("shape index {index} out of range for {count} shapes")]
    Index { index: usize, count: usize },
}
