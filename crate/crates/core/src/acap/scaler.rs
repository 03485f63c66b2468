use serde::{Deserialize, Serialize};

use super::{AcapFeature, MU};

/// Largest magnitude a scaled feature entry reaches on the fitting set.
pub const FEATURE_BOUND: f64 = 0.95;

/// Identity deformation in packed form: `r = 0`, `S = I` (S11, S22, S33 = 1).
pub const IDENTITY_FEATURE: [f64; MU] = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];

/// Blocks whose deviations never exceed this are rounding noise around the
/// identity and stay unscaled.
pub const MIN_EXTENT: f64 = 1e-10;

/// Observed range of one channel block, as deviations from the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockRange {
    pub min: f64,
    pub max: f64,
}

impl BlockRange {
    fn factor(&self) -> f64 {
        let extent = self.min.abs().max(self.max.abs());
        if extent > MIN_EXTENT {
            FEATURE_BOUND / extent
        } else {
            1.0
        }
    }
}

/// Linear map of the rotation block (channels 0..3) and the stretch block
/// (channels 3..9) into `[-0.95, 0.95]`, one factor per block.
///
/// The map is anchored at the identity deformation, so the reference shape
/// encodes to the zero feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub rotation: BlockRange,
    pub stretch: BlockRange,
}

impl FeatureScaler {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a AcapFeature>) -> Self {
        let mut rot = BlockRange { min: 0.0, max: 0.0 };
        let mut st = BlockRange { min: 0.0, max: 0.0 };
        for f in features {
            for row in f.rows() {
                for (c, &value) in row.iter().enumerate() {
                    let dev = value - IDENTITY_FEATURE[c];
                    let block = if c < 3 { &mut rot } else { &mut st };
                    block.min = block.min.min(dev);
                    block.max = block.max.max(dev);
                }
            }
        }
        Self { rotation: rot, stretch: st }
    }

    /// Scale factor applied to deviations in channel `c`.
    pub fn factor(&self, c: usize) -> f64 {
        if c < 3 {
            self.rotation.factor()
        } else {
            self.stretch.factor()
        }
    }

    pub fn forward_row(&self, row: &[f64; MU]) -> [f64; MU] {
        std::array::from_fn(|c| (row[c] - IDENTITY_FEATURE[c]) * self.factor(c))
    }

    pub fn inverse_row(&self, row: &[f64; MU]) -> [f64; MU] {
        std::array::from_fn(|c| row[c] / self.factor(c) + IDENTITY_FEATURE[c])
    }

    /// Deviation from the identity in raw ACAP units for a scaled-space delta.
    pub fn inverse_delta_row(&self, row: &[f64; MU]) -> [f64; MU] {
        std::array::from_fn(|c| row[c] / self.factor(c))
    }

    pub fn forward(&self, raw: &AcapFeature) -> AcapFeature {
        AcapFeature::new(raw.rows().iter().map(|r| self.forward_row(r)).collect())
    }

    pub fn inverse(&self, scaled: &AcapFeature) -> AcapFeature {
        AcapFeature::new(scaled.rows().iter().map(|r| self.inverse_row(r)).collect())
    }
}
