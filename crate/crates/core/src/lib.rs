//! Multiscale localized deformation components for collections of meshes
//! that share one connectivity.

pub mod acap;
pub mod datagen;
pub mod editing;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod network;
pub mod obj;
pub mod pipeline;
pub mod stacked;

pub use acap::{encode_dataset, AcapEncoder, AcapFeature, FeatureScaler, MU};
pub use error::{AcapError, ConfigError, EditError, EvalError, FormatError, MeshError, MetricsError};
pub use mesh::{Adjacency, CotanWeights, GeodesicCache, GeodesicField, TriangleMesh, Vec3};
pub use obj::{load_obj, save_obj};
