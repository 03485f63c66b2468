//! Train/test splits and held-out evaluation of a trained model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::acap::AcapFeature;
use crate::editing::Editor;
use crate::error::{ConfigError, EvalError};
use crate::mesh::TriangleMesh;
use crate::metrics::EvalReport;
use crate::stacked::{reconstruct_feature, StackedParams};

/// Which shapes train the model; the rest are held out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    /// Fraction of shapes used for training, spread evenly over the indices.
    Ratio(f64),
    /// Every n-th shape, starting with shape 0.
    EveryNth(usize),
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::EveryNth(10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitRule {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            SplitRule::Ratio(r) if !(r > 0.0 && r < 1.0) => {
                Err(ConfigError::Invalid(format!("split ratio {r} must lie strictly between 0 and 1")))
            }
            SplitRule::EveryNth(0) => Err(ConfigError::Invalid("every-nth split needs n >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Partition of `0..count`. Shape 0 always trains.
    pub fn partition(&self, count: usize) -> Result<Split, ConfigError> {
        self.validate()?;
        let train: Vec<usize> = match *self {
            SplitRule::EveryNth(n) => (0..count).step_by(n).collect(),
            SplitRule::Ratio(r) => {
                if count < 2 {
                    return Err(ConfigError::Invalid(format!("cannot split {count} shapes by ratio")));
                }
                let k = ((r * count as f64).round() as usize).clamp(1, count - 1);
                (0..k).map(|j| j * count / k).collect()
            }
        };
        let test = (0..count).filter(|i| !train.contains(i)).collect();
        Ok(Split { train, test })
    }
}

impl fmt::Display for SplitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitRule::Ratio(r) => write!(f, "ratio:{r}"),
            SplitRule::EveryNth(n) => write!(f, "every-nth:{n}"),
        }
    }
}

impl FromStr for SplitRule {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Invalid(format!("split rule `{s}` is not ratio:<r> or every-nth:<n>"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let rule = match kind {
            "ratio" => SplitRule::Ratio(value.parse().map_err(|_| bad())?),
            "every-nth" => SplitRule::EveryNth(value.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl Serialize for SplitRule {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

pub fn select<T: Clone>(items: &[T], indices: &[usize]) -> Result<Vec<T>, EvalError> {
    indices.iter().map(|&i| items.get(i).cloned().ok_or(EvalError::Index { index: i, count: items.len() })).collect()
}

/// A shape passed through the model: reconstructed feature and mesh.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub feature: AcapFeature,
    pub mesh: TriangleMesh,
}

/// Runs each scaled feature through the model and back to positions. Mesh
/// names are left to the caller.
pub fn reconstruct_shapes(model: &StackedParams, features: &[AcapFeature]) -> Result<Vec<Reconstruction>, EvalError> {
    let editor = Editor::new(model)?;
    let graph = model.graph();
    features
        .iter()
        .map(|x| {
            let feature = reconstruct_feature(model, x, &graph);
            let mesh = editor.mesh_from_feature(&feature)?;
            Ok(Reconstruction { feature, mesh })
        })
        .collect()
}

/// Evaluation of the shapes at `indices`, given every mesh of the dataset and
/// its scaled features.
pub fn evaluate_shapes(
    model: &StackedParams,
    meshes: &[TriangleMesh],
    features: &[AcapFeature],
    indices: &[usize],
) -> Result<EvalReport, EvalError> {
    let ground = select(meshes, indices)?;
    let x = select(features, indices)?;
    let recon = reconstruct_shapes(model, &x)?;
    let (xhat, recon_meshes): (Vec<AcapFeature>, Vec<TriangleMesh>) =
        recon.into_iter().map(|r| (r.feature, r.mesh)).unzip();
    Ok(EvalReport::compute(&ground, &recon_meshes, &x, &xhat)?)
}
