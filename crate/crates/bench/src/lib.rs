//! Shared fixtures for the benchmarks.

use meshmodes::datagen::{gen_bar_dataset, BarDataset, BarSpec};
use meshmodes::stacked::{StackedParams, TrainConfig};
use meshmodes::{encode_dataset, AcapFeature, FeatureScaler};

pub struct Fixture {
    pub data: BarDataset,
    pub features: Vec<AcapFeature>,
    pub scaler: FeatureScaler,
}

impl Fixture {
    /// Default bar with `count` shapes, encoded against shape 0.
    pub fn bar(count: usize) -> Self {
        let data = gen_bar_dataset(&BarSpec::default(), count).expect("default spec is valid");
        let enc = encode_dataset(&data.meshes, 0).expect("bar shapes encode");
        Self { data, features: enc.features, scaler: enc.scaler }
    }

    /// Untrained model at the default configuration.
    pub fn model(&self) -> StackedParams {
        StackedParams::init(&TrainConfig::default(), &self.data.meshes[0], self.scaler)
    }
}
