//! The full network: adapter → slot attention → slot decoder → classifier.
//!
//! Parameters are split in two sets. `theta` holds the adapter, slot
//! attention module and slot decoder (the part merged across adaptation
//! branches); `head` holds the classifier.

use ndarray::{s, Array2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::head::{
    bce_with_logits, combine, Adapter, AdaptedFeatureMap, Classifier, CombinedRepresentation,
    DensePrediction, HeadConfig, LossBreakdown,
};
use crate::nn::Builder;
use crate::params::ParameterSet;
use crate::slot::{
    reconstruction_loss_grad, reconstruction_loss_matrix, PositionGrid, SlotConfig,
    SlotDecodeResult, SlotDecoder, SlotEncoder, SlotState,
};

/// Name prefixes of the mergeable subnetwork.
pub const THETA_PREFIXES: [&str; 3] = ["adapter.", "slot.", "decoder."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_channels: usize,
    pub slots: SlotConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            slots: SlotConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseTrfModel {
    pub adapter: Adapter,
    pub encoder: SlotEncoder,
    pub decoder: SlotDecoder,
    pub classifier: Classifier,
    pub config: ModelConfig,
}

/// Intermediate results of one forward pass.
pub struct ForwardPass {
    pub adapted: AdaptedFeatureMap,
    pub slots: SlotState,
    pub decode: SlotDecodeResult,
    pub combined: CombinedRepresentation,
    pub prediction: DensePrediction,
}

/// Which parameter groups receive gradients in a joint step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub theta: bool,
    pub head: bool,
}

impl DenseTrfModel {
    pub fn new(config: ModelConfig) -> Self {
        Self::build(config, 0, 0).0
    }

    fn build(config: ModelConfig, theta_seed: u64, head_seed: u64) -> (Self, ParameterSet, ParameterSet) {
        let sc = &config.slots;
        let mut rng = ChaCha8Rng::seed_from_u64(theta_seed);
        let mut b = Builder::new(&mut rng);
        let adapter = Adapter::declare(
            &mut b,
            config.feature_channels,
            config.head.adapter_hidden,
            sc.adapted_dim,
        );
        let encoder = SlotEncoder::declare(&mut b, sc);
        let decoder = SlotDecoder::declare(&mut b, sc, config.feature_channels);
        let theta = b.params;

        let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
        let mut b = Builder::new(&mut rng);
        let in_dim = if config.head.concat {
            sc.adapted_dim + config.feature_channels + sc.num_slots
        } else {
            sc.adapted_dim
        };
        let classifier = Classifier::declare(
            &mut b,
            in_dim,
            config.head.classifier_hidden,
            config.head.num_classes,
        );
        let head = b.params;
        let model = Self {
            adapter,
            encoder,
            decoder,
            classifier,
            config,
        };
        (model, theta, head)
    }

    pub fn init_theta(&self, seed: u64) -> ParameterSet {
        Self::build(self.config.clone(), seed, 0).1
    }

    pub fn init_head(&self, seed: u64) -> ParameterSet {
        Self::build(self.config.clone(), 0, seed).2
    }

    pub fn classifier_input_channels(&self) -> usize {
        self.init_head(0).tensor(self.classifier.mlp.fc1.weight).shape()[0]
    }

    pub fn check_theta(&self, theta: &ParameterSet) -> Result<()> {
        self.init_theta(0).check_compatible(theta)
    }

    pub fn check_head(&self, head: &ParameterSet) -> Result<()> {
        self.init_head(0).check_compatible(head)
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.channels() != self.config.feature_channels {
            return Err(Error::Shape(format!(
                "model expects {} feature channels, got {}",
                self.config.feature_channels,
                features.channels()
            )));
        }
        Ok(())
    }

    /// Slot-attention path only: adapter, encoder and decoder.
    pub fn encode_decode(
        &self,
        theta: &ParameterSet,
        features: &FeatureMap,
        positions: &PositionGrid,
        slot_seed: u64,
    ) -> Result<(AdaptedFeatureMap, SlotState, SlotDecodeResult)> {
        self.check_features(features)?;
        let adapted = self.adapter.adapt(theta, features)?;
        let inputs = self.encoder_inputs(theta, &adapted)?;
        let init = self.encoder.init_slots(theta, slot_seed);
        let slots = self.encoder.iterate(theta, &init, inputs.view())?;
        let decode = self.decoder.decode(theta, &slots, positions)?;
        Ok((adapted, slots, decode))
    }

    pub fn forward(
        &self,
        theta: &ParameterSet,
        head: &ParameterSet,
        features: &FeatureMap,
        slot_seed: u64,
    ) -> Result<ForwardPass> {
        let positions = PositionGrid::sinusoidal(features.height(), features.width());
        let (adapted, slots, decode) = self.encode_decode(theta, features, &positions, slot_seed)?;
        let combined = self.combined(&adapted, &decode)?;
        let prediction = self
            .classifier
            .classify(head, &combined, features.source_image_shape())?;
        Ok(ForwardPass {
            adapted,
            slots,
            decode,
            combined,
            prediction,
        })
    }

    fn encoder_inputs(&self, theta: &ParameterSet, adapted: &AdaptedFeatureMap) -> Result<Array2<f64>> {
        self.encoder
            .with_positions(theta, adapted.data.view(), adapted.height, adapted.width)
    }

    fn combined(&self, adapted: &AdaptedFeatureMap, decode: &SlotDecodeResult) -> Result<CombinedRepresentation> {
        if self.config.head.concat {
            combine(adapted, decode)
        } else {
            Ok(CombinedRepresentation::adapted_only(adapted))
        }
    }

    /// Reconstruction loss; when `grads` is given, its gradient w.r.t. `theta`
    /// is accumulated there.
    pub fn recon_step(
        &self,
        theta: &ParameterSet,
        grads: Option<&mut ParameterSet>,
        features: &FeatureMap,
        positions: &PositionGrid,
        slot_seed: u64,
    ) -> Result<f64> {
        self.check_features(features)?;
        let target = features.to_matrix();
        let (adapted, a_trace) = self.adapter.forward(theta, features)?;
        let inputs = self.encoder_inputs(theta, &adapted)?;
        let init = self.encoder.init_slots(theta, slot_seed);
        let (slots, e_trace) = self.encoder.forward(theta, &init, inputs.view())?;
        let d_trace = self.decoder.forward(theta, &slots, positions)?;
        let recon = &d_trace.result().reconstruction;
        let loss = reconstruction_loss_matrix(&target, recon)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("reconstruction loss".into()));
        }
        if let Some(grads) = grads {
            let d_recon = reconstruction_loss_grad(&target, recon);
            let d_slots = self
                .decoder
                .backward(theta, grads, &slots, &d_trace, d_recon.view(), None);
            let d_adapted = self.encoder.backward(theta, grads, &e_trace, d_slots.view());
            self.encoder
                .with_positions_backward(grads, d_adapted.view(), adapted.height, adapted.width);
            self.adapter.backward(theta, grads, &a_trace, d_adapted.view());
        }
        Ok(loss)
    }

    /// `BCE + λ · L_recon` for one sample, with optional gradient accumulation.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_step(
        &self,
        theta: &ParameterSet,
        head: &ParameterSet,
        grads: Option<(&mut ParameterSet, &mut ParameterSet)>,
        trainable: Trainable,
        features: &FeatureMap,
        labels: ArrayView3<u8>,
        lambda: f64,
        slot_seed: u64,
    ) -> Result<LossBreakdown> {
        self.check_features(features)?;
        let positions = PositionGrid::sinusoidal(features.height(), features.width());
        let target = features.to_matrix();
        let (adapted, a_trace) = self.adapter.forward(theta, features)?;
        let inputs = self.encoder_inputs(theta, &adapted)?;
        let init = self.encoder.init_slots(theta, slot_seed);
        let (slots, e_trace) = self.encoder.forward(theta, &init, inputs.view())?;
        let d_trace = self.decoder.forward(theta, &slots, &positions)?;
        let decode = d_trace.result();
        let combined = self.combined(&adapted, decode)?;
        let grid = (features.height(), features.width());
        let (pred, c_trace) =
            self.classifier
                .forward(head, &combined, features.source_image_shape())?;
        let (bce, d_logits) = bce_with_logits(pred.logits.view(), labels)?;
        let recon = reconstruction_loss_matrix(&target, &decode.reconstruction)?;
        let loss = LossBreakdown::new(bce, recon, lambda);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("joint loss".into()));
        }

        let Some((g_theta, g_head)) = grads else {
            return Ok(loss);
        };
        if !trainable.theta && !trainable.head {
            return Ok(loss);
        }
        let mut scratch;
        let head_grads = if trainable.head {
            g_head
        } else {
            scratch = head.zeros_like();
            &mut scratch
        };
        let dz = self
            .classifier
            .backward(head, head_grads, &c_trace, grid, d_logits.view());
        if !trainable.theta {
            return Ok(loss);
        }

        let (ca, cr) = (combined.adapted_channels, combined.recon_channels);
        let mut d_adapted = dz.slice(s![.., 0..ca]).to_owned();
        let mut d_recon = if lambda != 0.0 {
            reconstruction_loss_grad(&target, &decode.reconstruction) * lambda
        } else {
            Array2::zeros(decode.reconstruction.raw_dim())
        };
        let d_masks = if self.config.head.concat {
            d_recon += &dz.slice(s![.., ca..ca + cr]);
            Some(dz.slice(s![.., ca + cr..]).t().to_owned())
        } else {
            None
        };
        let d_slots = self.decoder.backward(
            theta,
            g_theta,
            &slots,
            &d_trace,
            d_recon.view(),
            d_masks.as_ref().map(|m| m.view()),
        );
        let d_inputs = self.encoder.backward(theta, g_theta, &e_trace, d_slots.view());
        self.encoder
            .with_positions_backward(g_theta, d_inputs.view(), adapted.height, adapted.width);
        d_adapted += &d_inputs;
        self.adapter.backward(theta, g_theta, &a_trace, d_adapted.view());
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny(concat: bool) -> ModelConfig {
        ModelConfig {
            feature_channels: 4,
            slots: SlotConfig {
                num_slots: 2,
                slot_dim: 8,
                num_iterations: 2,
                adapted_dim: 3,
                mlp_hidden: 6,
            },
            head: HeadConfig {
                adapter_hidden: 5,
                classifier_hidden: 5,
                num_classes: 1,
                concat,
            },
        }
    }

    #[test]
    fn theta_holds_exactly_the_mergeable_groups() {
        let model = DenseTrfModel::new(tiny(true));
        let theta = model.init_theta(1);
        assert!(theta
            .names()
            .all(|n| THETA_PREFIXES.iter().any(|p| n.starts_with(p))));
        assert!(model.init_head(1).names().all(|n| n.starts_with("head.")));
    }

    #[test]
    fn classifier_width_follows_concat_flag() {
        assert_eq!(DenseTrfModel::new(tiny(true)).classifier_input_channels(), 3 + 4 + 2);
        assert_eq!(DenseTrfModel::new(tiny(false)).classifier_input_channels(), 3);
    }

    #[test]
    fn forward_shapes() {
        let model = DenseTrfModel::new(tiny(true));
        let theta = model.init_theta(2);
        let head = model.init_head(3);
        let f = FeatureMap::new(Array3::from_shape_fn((2, 2, 4), |(i, j, c)| (i + 2 * j + c) as f32 * 0.1), 4).unwrap();
        let out = model.forward(&theta, &head, &f, 0).unwrap();
        assert_eq!(out.prediction.logits.dim(), (8, 8, 1));
        assert_eq!(out.combined.channels(), 9);
    }

    #[test]
    fn lambda_zero_decouples_decoder_from_reconstruction() {
        // with concat off and λ = 0 nothing downstream reads the decoder
        let model = DenseTrfModel::new(tiny(false));
        let theta = model.init_theta(4);
        let head = model.init_head(5);
        let f = FeatureMap::new(Array3::from_shape_fn((2, 2, 4), |(i, j, c)| ((i * 3 + j + c) % 5) as f32 * 0.2), 4).unwrap();
        let labels = Array3::from_shape_fn((8, 8, 1), |(y, x, _)| ((y + x) % 2) as u8);
        let mut gt = theta.zeros_like();
        let mut gh = head.zeros_like();
        let all = Trainable { theta: true, head: true };
        model
            .joint_step(&theta, &head, Some((&mut gt, &mut gh)), all, &f, labels.view(), 0.0, 0)
            .unwrap();
        for (name, t) in gt.iter() {
            if name.starts_with("decoder.") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}
