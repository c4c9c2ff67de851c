//! A small conv + fc classifier on Gaussian blobs, for end-to-end runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{gaussian_blobs, Dataset};
use crate::error::Result;
use crate::finetune::{train, AccumulatorInit, EpochMetrics, TrainOptions, TrainState};
use crate::layers::{Activation, FeatureShape, Model, ModelLayer};
use crate::tensor::{DenseMatrix, LayerDescriptor};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub spread: f64,
    pub input: FeatureShape,
    /// Output channels of the 3x3 conv.
    pub filters: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { seed: 0, classes: 3, per_class: 60, spread: 2.0, input: FeatureShape::new(6, 6, 3), filters: 8 }
    }
}

pub fn toy_dataset(cfg: &ToyConfig) -> Result<Dataset> {
    gaussian_blobs(cfg.per_class, cfg.classes, cfg.input.len(), cfg.spread, cfg.seed)
}

/// `conv 3x3 -> relu -> fc`, He-initialized from `cfg.seed`.
pub fn toy_model(cfg: &ToyConfig) -> Result<Model> {
    let (h, w) = (cfg.input.height - 2, cfg.input.width - 2);
    let conv = LayerDescriptor::conv(3, 3, cfg.input.channels, cfg.filters, h, w, 1).named("conv1").with_bias(true);
    let fc = LayerDescriptor::fc(h * w * cfg.filters, cfg.classes).named("fc2").with_bias(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut he = |rows: usize, cols: usize| {
        let dist = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("positive variance");
        DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng) as f32)
    };
    let wc = he(conv.group_rows(), conv.group_cols())?;
    let wf = he(fc.group_rows(), fc.group_cols())?;
    Ok(Model {
        input: Some(cfg.input),
        layers: vec![
            ModelLayer::dense(conv, vec![wc], Some(vec![0.0; cfg.filters]), Activation::Relu)?,
            ModelLayer::dense(fc, vec![wf], Some(vec![0.0; cfg.classes]), Activation::None)?,
        ],
    })
}

/// Trains the dense weights of `model`; factors, if any, are ignored.
pub fn pretrain(model: &Model, data: &Dataset, opts: TrainOptions) -> Result<(Model, Vec<EpochMetrics>)> {
    let dense = Model {
        input: model.input,
        layers: model.layers.iter().map(|l| ModelLayer { factors: None, ..l.clone() }).collect(),
    };
    let mut state = TrainState::from_model(&dense, AccumulatorInit::Stored, opts)?;
    let metrics = train(&mut state, data, None)?;
    Ok((state.to_model()?, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::evaluate;

    #[test]
    fn toy_shapes_chain() {
        let cfg = ToyConfig::default();
        let m = toy_model(&cfg).unwrap();
        assert_eq!(m.validate_chain().unwrap(), FeatureShape::flat(3));
        assert_eq!(toy_dataset(&cfg).unwrap().dim, 108);
    }

    #[test]
    fn pretraining_learns_the_blobs() {
        let cfg = ToyConfig::default();
        let data = toy_dataset(&cfg).unwrap();
        let opts = TrainOptions { epochs: 5, lr: 0.01, ..TrainOptions::default() };
        let (m, metrics) = pretrain(&toy_model(&cfg).unwrap(), &data, opts.clone()).unwrap();
        assert!(metrics.last().unwrap().loss < metrics[0].loss);
        let st = TrainState::from_model(&m, AccumulatorInit::Stored, opts).unwrap();
        assert!(evaluate(&st, &data).unwrap().1 > 0.9);
    }
}
