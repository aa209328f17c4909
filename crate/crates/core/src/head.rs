//! Feature adapter, slot-conditioned representation, per-pixel classifier
//! and the joint BCE + reconstruction objective.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{sigmoid, Builder, Mlp, MlpCache};
use crate::params::ParameterSet;
use crate::slot::{reconstruction_loss_matrix, SlotDecodeResult};

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub adapter_hidden: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
    /// Feed `[F_a | F̂ | m_1..m_K]` to the classifier; `false` feeds `F_a` only.
    pub concat: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            adapter_hidden: 128,
            classifier_hidden: 128,
            num_classes: 2,
            concat: true,
        }
    }
}

/// `F_a = g(F)`, one row per location.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedFeatureMap {
    pub data: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Adapter {
    pub mlp: Mlp,
}

pub struct AdapterTrace {
    input: Array2<f64>,
    cache: MlpCache,
}

impl Adapter {
    pub fn declare<R: Rng>(b: &mut Builder<'_, R>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            mlp: b.mlp("adapter", in_dim, hidden, out_dim),
        }
    }

    pub fn adapt(&self, p: &ParameterSet, features: &FeatureMap) -> Result<AdaptedFeatureMap> {
        self.forward(p, features).map(|(a, _)| a)
    }

    pub fn forward(&self, p: &ParameterSet, features: &FeatureMap) -> Result<(AdaptedFeatureMap, AdapterTrace)> {
        let input = features.to_matrix();
        let expected = p.mat(self.mlp.fc1.weight).nrows();
        if input.ncols() != expected {
            return Err(Error::Shape(format!(
                "adapter expects {expected} channels, features have {}",
                input.ncols()
            )));
        }
        let (data, cache) = self.mlp.forward(p, input.view());
        ensure_finite(data.iter(), "adapter output")?;
        let adapted = AdaptedFeatureMap {
            data,
            height: features.height(),
            width: features.width(),
        };
        Ok((adapted, AdapterTrace { input, cache }))
    }

    pub fn backward(&self, p: &ParameterSet, grads: &mut ParameterSet, trace: &AdapterTrace, d_out: ArrayView2<f64>) {
        // the backbone is frozen, so the input gradient is dropped
        let _ = self.mlp.backward(p, grads, trace.input.view(), &trace.cache, d_out);
    }
}

/// Per-location concatenation `[f_ada | f_recon | m_1 .. m_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedRepresentation {
    pub data: Array2<f64>,
    pub adapted_channels: usize,
    pub recon_channels: usize,
    pub mask_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl CombinedRepresentation {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Only the adapted features, for the no-concatenation ablation.
    pub fn adapted_only(adapted: &AdaptedFeatureMap) -> Self {
        Self {
            data: adapted.data.clone(),
            adapted_channels: adapted.data.ncols(),
            recon_channels: 0,
            mask_channels: 0,
            height: adapted.height,
            width: adapted.width,
        }
    }
}

pub fn combine(adapted: &AdaptedFeatureMap, decode: &SlotDecodeResult) -> Result<CombinedRepresentation> {
    if adapted.height != decode.height || adapted.width != decode.width {
        return Err(Error::Shape(format!(
            "adapted grid {}×{} vs decoded grid {}×{}",
            adapted.height, adapted.width, decode.height, decode.width
        )));
    }
    let n = adapted.data.nrows();
    let (ca, cr, k) = (
        adapted.data.ncols(),
        decode.reconstruction.ncols(),
        decode.num_slots(),
    );
    let mut data = Array2::zeros((n, ca + cr + k));
    data.slice_mut(s![.., 0..ca]).assign(&adapted.data);
    data.slice_mut(s![.., ca..ca + cr]).assign(&decode.reconstruction);
    data.slice_mut(s![.., ca + cr..]).assign(&decode.masks.t());
    Ok(CombinedRepresentation {
        data,
        adapted_channels: ca,
        recon_channels: cr,
        mask_channels: k,
        height: adapted.height,
        width: adapted.width,
    })
}

/// Logits at input resolution, `Hi × Wi × C_cls`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePrediction {
    pub logits: Array3<f64>,
    pub grid_logits: Array3<f64>,
}

impl DensePrediction {
    pub fn class_count(&self) -> usize {
        self.logits.dim().2
    }

    /// Binary masks per class, `σ(logit) > 0.5`.
    pub fn threshold(&self) -> Array3<bool> {
        self.logits.mapv(|v| sigmoid(v) > 0.5)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    pub mlp: Mlp,
}

pub struct ClassifierTrace {
    input: Array2<f64>,
    cache: MlpCache,
}

impl Classifier {
    pub fn declare<R: Rng>(b: &mut Builder<'_, R>, in_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            mlp: b.mlp("head", in_dim, hidden, classes),
        }
    }

    pub fn classify(
        &self,
        p: &ParameterSet,
        combined: &CombinedRepresentation,
        out_shape: (usize, usize),
    ) -> Result<DensePrediction> {
        self.forward(p, combined, out_shape).map(|(d, _)| d)
    }

    pub fn forward(
        &self,
        p: &ParameterSet,
        combined: &CombinedRepresentation,
        out_shape: (usize, usize),
    ) -> Result<(DensePrediction, ClassifierTrace)> {
        let (h, w) = (combined.height, combined.width);
        check_upsample_shape((h, w), out_shape)?;
        let expected = p.mat(self.mlp.fc1.weight).nrows();
        if combined.channels() != expected {
            return Err(Error::Shape(format!(
                "classifier expects {expected} channels, got {}",
                combined.channels()
            )));
        }
        let (flat, cache) = self.mlp.forward(p, combined.data.view());
        ensure_finite(flat.iter(), "classifier logits")?;
        let c = flat.ncols();
        let grid_logits = flat.into_shape_with_order((h, w, c)).expect("grid layout");
        let logits = upsample_bilinear(grid_logits.view(), out_shape.0, out_shape.1);
        let trace = ClassifierTrace {
            input: combined.data.clone(),
            cache,
        };
        Ok((DensePrediction { logits, grid_logits }, trace))
    }

    /// Takes the gradient w.r.t. the full-resolution logits; returns the
    /// gradient w.r.t. the combined representation.
    pub fn backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        trace: &ClassifierTrace,
        grid: (usize, usize),
        d_logits: ArrayView3<f64>,
    ) -> Array2<f64> {
        let d_grid = upsample_bilinear_adjoint(d_logits, grid.0, grid.1);
        let c = d_grid.dim().2;
        let d_flat = d_grid
            .into_shape_with_order((grid.0 * grid.1, c))
            .expect("grid layout");
        self.mlp
            .backward(p, grads, trace.input.view(), &trace.cache, d_flat.view())
    }
}

fn check_upsample_shape(grid: (usize, usize), out: (usize, usize)) -> Result<()> {
    if out.0 == 0 || out.1 == 0 || !out.0.is_multiple_of(grid.0) || !out.1.is_multiple_of(grid.1) {
        return Err(Error::Shape(format!(
            "output {}×{} is not an integer multiple of grid {}×{}",
            out.0, out.1, grid.0, grid.1
        )));
    }
    Ok(())
}

/// Source taps and weight of the second tap for each output index,
/// half-pixel centres without corner alignment.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(grid: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = grid.dim();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let top = grid[[y0, x0, ch]] * (1.0 - lx) + grid[[y0, x1, ch]] * lx;
                let bottom = grid[[y1, x0, ch]] * (1.0 - lx) + grid[[y1, x1, ch]] * lx;
                out[[oy, ox, ch]] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    out
}

/// Transpose of [`upsample_bilinear`].
pub fn upsample_bilinear_adjoint(d_out: ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (out_h, out_w, c) = d_out.dim();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut d = Array3::zeros((h, w, c));
    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let g = d_out[[oy, ox, ch]];
                d[[y0, x0, ch]] += g * (1.0 - ly) * (1.0 - lx);
                d[[y0, x1, ch]] += g * (1.0 - ly) * lx;
                d[[y1, x0, ch]] += g * ly * (1.0 - lx);
                d[[y1, x1, ch]] += g * ly * lx;
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub recon: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(bce: f64, recon: f64, lambda: f64) -> Self {
        Self {
            bce,
            recon,
            lambda,
            total: bce + lambda * recon,
        }
    }
}

pub fn check_labels(labels: ArrayView3<u8>, shape: (usize, usize, usize)) -> Result<()> {
    if labels.dim() != shape {
        return Err(Error::Shape(format!(
            "labels {:?} vs predictions {:?}",
            labels.dim(),
            shape
        )));
    }
    if let Some(v) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::LabelRange(format!("found {v}, labels must be 0 or 1")));
    }
    Ok(())
}

/// Mean sigmoid binary cross-entropy and its gradient w.r.t. the logits.
pub fn bce_with_logits(logits: ArrayView3<f64>, labels: ArrayView3<u8>) -> Result<(f64, Array3<f64>)> {
    check_labels(labels, logits.dim())?;
    let n = logits.len() as f64;
    let mut grad = Array3::zeros(logits.raw_dim());
    let mut total = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&logits)
        .and(&labels)
        .for_each(|g, &x, &y| {
            let y = y as f64;
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            *g = (sigmoid(x) - y) / n;
        });
    Ok((total / n, grad))
}

/// `L = BCE + λ · L_recon`.
pub fn joint_loss(
    pred: &DensePrediction,
    labels: ArrayView3<u8>,
    target: &FeatureMap,
    decode: &SlotDecodeResult,
    lambda: f64,
) -> Result<LossBreakdown> {
    let (bce, _) = bce_with_logits(pred.logits.view(), labels)?;
    let recon = reconstruction_loss_matrix(&target.to_matrix(), &decode.reconstruction)?;
    Ok(LossBreakdown::new(bce, recon, lambda))
}
