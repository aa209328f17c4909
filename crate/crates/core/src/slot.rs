//! Slot Attention encoder, spatial-broadcast slot decoder with alpha masks,
//! the feature reconstruction loss, and decoder-side patch-order permutation.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{
    gelu, gelu_grad, softmax_rows, softmax_rows_backward, Builder, GruCache, GruCell, LayerNorm,
    LayerNormCache, Linear, Mlp, MlpCache,
};
use crate::params::ParameterSet;

/// Width of the sinusoidal 2D positional encoding fed to the decoder.
pub const POS_DIM: usize = 16;
/// Added to attention weights before the per-slot weighted mean.
pub const ATTENTION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub num_iterations: usize,
    pub adapted_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            num_slots: 6,
            slot_dim: 64,
            num_iterations: 3,
            adapted_dim: 64,
            mlp_hidden: 128,
        }
    }
}

impl SlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 2 {
            return Err(Error::Config(format!("num_slots must be >= 2, got {}", self.num_slots)));
        }
        if self.num_iterations < 1 {
            return Err(Error::Config("num_iterations must be >= 1".into()));
        }
        if self.slot_dim < 8 {
            return Err(Error::Config(format!("slot_dim must be >= 8, got {}", self.slot_dim)));
        }
        if self.adapted_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("adapted_dim and mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Slot latents (`K × D_s`) and the last iteration's attention (`K × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub slots: Array2<f64>,
    pub attention: Array2<f64>,
}

impl SlotState {
    pub fn from_slots(slots: Array2<f64>) -> Self {
        let k = slots.nrows();
        Self {
            slots,
            attention: Array2::zeros((k, 0)),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.nrows()
    }

    /// Reorders the slot axis: row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            slots: self.slots.select(Axis(0), perm),
            attention: self.attention.select(Axis(0), perm),
        }
    }
}

/// Positional encodings for an `H × W` grid and the permutation that assigns
/// them to locations on the decoder side.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    embeddings: Array2<f64>,
    permutation: Vec<usize>,
    height: usize,
    width: usize,
}

impl PositionGrid {
    /// Fixed sinusoidal encodings: for each axis, sin/cos at frequencies
    /// `2^f · π`, `f = 0..4`, of the normalised cell centre.
    pub fn sinusoidal(height: usize, width: usize) -> Self {
        let n = height * width;
        let per_axis = POS_DIM / 2;
        let mut embeddings = Array2::zeros((n, POS_DIM));
        for i in 0..height {
            for j in 0..width {
                let row = i * width + j;
                let coords = [(i as f64 + 0.5) / height as f64, (j as f64 + 0.5) / width as f64];
                for (axis, &v) in coords.iter().enumerate() {
                    for f in 0..per_axis / 2 {
                        let angle = (1u32 << f) as f64 * PI * v;
                        embeddings[[row, axis * per_axis + 2 * f]] = angle.sin();
                        embeddings[[row, axis * per_axis + 2 * f + 1]] = angle.cos();
                    }
                }
            }
        }
        Self {
            embeddings,
            permutation: (0..n).collect(),
            height,
            width,
        }
    }

    pub fn with_permutation(&self, permutation: Vec<usize>) -> Result<Self> {
        let n = self.num_locations();
        let mut seen = vec![false; n];
        if permutation.len() != n {
            return Err(Error::Shape(format!("permutation length {} != {n}", permutation.len())));
        }
        for &p in &permutation {
            if p >= n || seen[p] {
                return Err(Error::Shape("permutation is not a bijection".into()));
            }
            seen[p] = true;
        }
        Ok(Self {
            permutation,
            ..self.clone()
        })
    }

    pub fn num_locations(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        Self {
            permutation: inv,
            ..self.clone()
        }
    }

    /// Permutation applying `self` first, then `other`.
    pub fn then(&self, other: &Self) -> Self {
        let permutation = (0..self.permutation.len())
            .map(|i| self.permutation[other.permutation[i]])
            .collect();
        Self {
            permutation,
            ..self.clone()
        }
    }

    /// Decoder input rows: location `n` receives embedding `permutation[n]`.
    pub fn decoder_inputs(&self) -> Array2<f64> {
        self.embeddings.select(Axis(0), &self.permutation)
    }
}

/// Fresh uniformly random assignment of positional encodings to locations.
pub fn permute_patch_order(positions: &PositionGrid, seed: u64) -> PositionGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..positions.num_locations()).collect();
    perm.shuffle(&mut rng);
    PositionGrid {
        permutation: perm,
        ..positions.clone()
    }
}

/// Permutation restricted to non-overlapping `window × window` blocks of the
/// grid: each block's positional encodings are shuffled uniformly among the
/// block's own locations. A window covering the grid is a full permutation.
pub fn permute_within_windows(positions: &PositionGrid, seed: u64, window: usize) -> PositionGrid {
    let (h, w) = (positions.height, positions.width);
    let window = window.max(1);
    if window >= h && window >= w {
        return permute_patch_order(positions, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..h * w).collect();
    for by in (0..h).step_by(window) {
        for bx in (0..w).step_by(window) {
            let cells: Vec<usize> = (by..(by + window).min(h))
                .flat_map(|y| (bx..(bx + window).min(w)).map(move |x| y * w + x))
                .collect();
            let mut shuffled = cells.clone();
            shuffled.shuffle(&mut rng);
            for (&cell, &src) in cells.iter().zip(&shuffled) {
                perm[cell] = src;
            }
        }
    }
    PositionGrid {
        permutation: perm,
        ..positions.clone()
    }
}

/// How decoder positions are permuted during base-branch training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermutationConfig {
    pub enabled: bool,
    /// Block size for [`permute_within_windows`]; `None` permutes the whole grid.
    pub window: Option<usize>,
    /// Chance that a given sample is decoded with permuted positions.
    pub probability: f64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: Some(2),
            probability: 1.0,
        }
    }
}

impl PermutationConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Decoder positions for one sample.
    pub fn sample<R: Rng>(&self, grid: PositionGrid, rng: &mut R) -> PositionGrid {
        // draw both values unconditionally so the stream does not depend on the outcome
        let roll: f64 = rng.gen();
        let seed: u64 = rng.gen();
        if !self.enabled || roll >= self.probability {
            return grid;
        }
        match self.window {
            Some(w) => permute_within_windows(&grid, seed, w),
            None => permute_patch_order(&grid, seed),
        }
    }
}

/// Parameter layout of the Slot Attention module.
#[derive(Debug, Clone)]
pub struct SlotEncoder {
    pub mu: usize,
    pub log_sigma: usize,
    /// Soft position embedding added to the inputs. Always fed the unpermuted
    /// grid.
    pub pos_embed: Linear,
    pub norm_input: LayerNorm,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_q: Linear,
    pub norm_slots: LayerNorm,
    pub gru: GruCell,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
    pub config: SlotConfig,
}

struct IterationCache {
    prev: Array2<f64>,
    ln_slots: LayerNormCache,
    slots_normed: Array2<f64>,
    q: Array2<f64>,
    attn: Array2<f64>,
    col_sum: Array1<f64>,
    weights: Array2<f64>,
    updates: Array2<f64>,
    gru: GruCache,
    ln_mlp: LayerNormCache,
    mlp_in: Array2<f64>,
    mlp: MlpCache,
}

/// Everything the encoder backward pass needs.
pub struct EncoderTrace {
    init: Array2<f64>,
    ln_input: LayerNormCache,
    inputs_normed: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    iterations: Vec<IterationCache>,
}

impl SlotEncoder {
    pub fn declare<R: Rng>(b: &mut Builder<'_, R>, config: &SlotConfig) -> Self {
        let d = config.slot_dim;
        let bound = (6.0 / (1 + d) as f64).sqrt();
        let mu = b.uniform("slot.init.mu", vec![d], bound);
        let log_sigma = b.uniform("slot.init.log_sigma", vec![d], bound);
        Self {
            mu,
            log_sigma,
            pos_embed: b.linear("slot.pos_embed", POS_DIM, config.adapted_dim, true),
            norm_input: b.layer_norm("slot.norm_input", config.adapted_dim),
            to_k: b.linear("slot.to_k", config.adapted_dim, d, false),
            to_v: b.linear("slot.to_v", config.adapted_dim, d, false),
            to_q: b.linear("slot.to_q", d, d, false),
            norm_slots: b.layer_norm("slot.norm_slots", d),
            gru: b.gru("slot.gru", d),
            norm_mlp: b.layer_norm("slot.norm_mlp", d),
            mlp: b.mlp("slot.mlp", d, config.mlp_hidden, d),
            config: config.clone(),
        }
    }

    /// Encoder inputs: features plus the embedded (unpermuted) positions.
    pub fn with_positions(&self, p: &ParameterSet, features: ArrayView2<f64>, height: usize, width: usize) -> Result<Array2<f64>> {
        if features.nrows() != height * width {
            return Err(Error::Shape(format!(
                "{} feature rows for a {height}×{width} grid",
                features.nrows()
            )));
        }
        let grid = PositionGrid::sinusoidal(height, width);
        Ok(&features + &self.pos_embed.forward(p, grid.embeddings().view()))
    }

    /// Gradient of [`SlotEncoder::with_positions`] w.r.t. the embedding;
    /// the feature gradient passes through unchanged.
    pub fn with_positions_backward(&self, grads: &mut ParameterSet, d_inputs: ArrayView2<f64>, height: usize, width: usize) {
        let grid = PositionGrid::sinusoidal(height, width);
        self.pos_embed.backward_params(grads, grid.embeddings().view(), d_inputs);
    }

    /// Samples `K` slots from the learned diagonal Gaussian `N(mu, exp(log_sigma)^2)`.
    pub fn init_slots(&self, p: &ParameterSet, seed: u64) -> SlotState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = p.vector(self.mu);
        let sigma = p.vector(self.log_sigma).mapv(f64::exp);
        let (k, d) = (self.config.num_slots, self.config.slot_dim);
        let slots = Array2::from_shape_fn((k, d), |(_, j)| {
            let eps: f64 = rng.sample(StandardNormal);
            mu[j] + sigma[j] * eps
        });
        SlotState::from_slots(slots)
    }

    /// Runs `T` refinement iterations starting from `state.slots`.
    pub fn iterate(&self, p: &ParameterSet, state: &SlotState, features: ArrayView2<f64>) -> Result<SlotState> {
        self.forward(p, state, features).map(|(s, _)| s)
    }

    pub fn forward(
        &self,
        p: &ParameterSet,
        state: &SlotState,
        features: ArrayView2<f64>,
    ) -> Result<(SlotState, EncoderTrace)> {
        if state.slots.ncols() != self.config.slot_dim {
            return Err(Error::Shape(format!(
                "slot dim {} != configured {}",
                state.slots.ncols(),
                self.config.slot_dim
            )));
        }
        if features.ncols() != self.config.adapted_dim {
            return Err(Error::Shape(format!(
                "feature channels {} != adapted_dim {}",
                features.ncols(),
                self.config.adapted_dim
            )));
        }
        ensure_finite(features.iter(), "slot attention input")?;
        let scale = 1.0 / (self.config.slot_dim as f64).sqrt();
        let (inputs_normed, ln_input) = self.norm_input.forward(p, features);
        let k = self.to_k.forward(p, inputs_normed.view());
        let v = self.to_v.forward(p, inputs_normed.view());

        let mut slots = state.slots.clone();
        let mut iterations = Vec::with_capacity(self.config.num_iterations);
        for _ in 0..self.config.num_iterations {
            let prev = slots;
            let (slots_normed, ln_slots) = self.norm_slots.forward(p, prev.view());
            let q = self.to_q.forward(p, slots_normed.view());
            let logits = k.dot(&q.t()) * scale;
            let attn = softmax_rows(&logits);
            let shifted = &attn + ATTENTION_EPS;
            let col_sum = shifted.sum_axis(Axis(0));
            let weights = &shifted / &col_sum;
            let updates = weights.t().dot(&v);
            let (gru_out, gru) = self.gru.forward(p, updates.view(), prev.view());
            let (mlp_in, ln_mlp) = self.norm_mlp.forward(p, gru_out.view());
            let (mlp_out, mlp) = self.mlp.forward(p, mlp_in.view());
            slots = &gru_out + &mlp_out;
            iterations.push(IterationCache {
                prev,
                ln_slots,
                slots_normed,
                q,
                attn,
                col_sum,
                weights,
                updates,
                gru,
                ln_mlp,
                mlp_in,
                mlp,
            });
        }
        ensure_finite(slots.iter(), "slot attention output")?;
        let attention = iterations
            .last()
            .map(|it| it.attn.t().to_owned())
            .unwrap_or_else(|| Array2::zeros((slots.nrows(), features.nrows())));
        let trace = EncoderTrace {
            init: state.slots.clone(),
            ln_input,
            inputs_normed,
            k,
            v,
            iterations,
        };
        Ok((SlotState { slots, attention }, trace))
    }

    /// Backpropagates `d_slots` (gradient w.r.t. the final slots). Accumulates
    /// parameter gradients, including the initial Gaussian's mean and
    /// log-scale, and returns the gradient w.r.t. the adapted features.
    pub fn backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        trace: &EncoderTrace,
        d_slots: ArrayView2<f64>,
    ) -> Array2<f64> {
        let scale = 1.0 / (self.config.slot_dim as f64).sqrt();
        let mut ds = d_slots.to_owned();
        let mut dk = Array2::zeros(trace.k.raw_dim());
        let mut dv = Array2::zeros(trace.v.raw_dim());

        for it in trace.iterations.iter().rev() {
            // slots = gru_out + mlp(norm_mlp(gru_out))
            let d_mlp_in = self.mlp.backward(p, grads, it.mlp_in.view(), &it.mlp, ds.view());
            let d_gru_out = &ds + &self.norm_mlp.backward(p, grads, &it.ln_mlp, d_mlp_in.view());
            let (d_updates, mut d_prev) =
                self.gru
                    .backward(p, grads, it.updates.view(), it.prev.view(), &it.gru, d_gru_out.view());
            // updates = weights^T v
            let d_weights = trace.v.dot(&d_updates.t());
            dv += &it.weights.dot(&d_updates);
            // weights = (attn + eps) / col_sum
            let mut d_attn = d_weights.clone();
            for kk in 0..d_attn.ncols() {
                let dot: f64 = d_weights
                    .column(kk)
                    .iter()
                    .zip(it.weights.column(kk).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let cs = it.col_sum[kk];
                d_attn.column_mut(kk).mapv_inplace(|g| (g - dot) / cs);
            }
            let d_logits = softmax_rows_backward(&it.attn, &d_attn) * scale;
            dk += &d_logits.dot(&it.q);
            let dq = d_logits.t().dot(&trace.k);
            let d_normed = self.to_q.backward(p, grads, it.slots_normed.view(), dq.view());
            d_prev += &self.norm_slots.backward(p, grads, &it.ln_slots, d_normed.view());
            ds = d_prev;
        }

        // init = mu + exp(log_sigma) * eps
        let mu = p.vector(self.mu);
        let noise = &trace.init - &mu;
        grads.vector_mut(self.mu).scaled_add(1.0, &ds.sum_axis(Axis(0)));
        grads
            .vector_mut(self.log_sigma)
            .scaled_add(1.0, &(&ds * &noise).sum_axis(Axis(0)));

        let mut d_normed = self.to_k.backward(p, grads, trace.inputs_normed.view(), dk.view());
        d_normed += &self.to_v.backward(p, grads, trace.inputs_normed.view(), dv.view());
        self.norm_input.backward(p, grads, &trace.ln_input, d_normed.view())
    }
}

/// Per-slot reconstructions, alpha logits, slot-axis softmax masks and the
/// mask-weighted reconstruction. Locations are flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDecodeResult {
    /// `K × N × C_r`
    pub per_slot_features: Array3<f64>,
    /// `K × N`
    pub alpha_logits: Array2<f64>,
    /// `K × N`, columns sum to one
    pub masks: Array2<f64>,
    /// `N × C_r`
    pub reconstruction: Array2<f64>,
    pub height: usize,
    pub width: usize,
}

impl SlotDecodeResult {
    pub fn num_slots(&self) -> usize {
        self.masks.nrows()
    }

    pub fn num_locations(&self) -> usize {
        self.masks.ncols()
    }

    /// Recombines masks and per-slot features.
    pub fn from_parts(
        per_slot_features: Array3<f64>,
        alpha_logits: Array2<f64>,
        height: usize,
        width: usize,
    ) -> Self {
        let masks = softmax_rows(&alpha_logits.t().to_owned()).t().to_owned();
        let (k, n, c) = per_slot_features.dim();
        let mut reconstruction = Array2::zeros((n, c));
        for slot in 0..k {
            let weighted = &per_slot_features.slice(s![slot, .., ..])
                * &masks.row(slot).insert_axis(Axis(1));
            reconstruction += &weighted;
        }
        Self {
            per_slot_features,
            alpha_logits,
            masks,
            reconstruction,
            height,
            width,
        }
    }

    /// Mask of slot `k` as an `H × W` grid.
    pub fn mask_grid(&self, k: usize) -> Array2<f64> {
        self.masks
            .row(k)
            .to_owned()
            .into_shape_with_order((self.height, self.width))
            .expect("mask length matches grid")
    }
}

/// Spatial-broadcast MLP decoder shared across slots. Outputs `C_r` feature
/// channels plus one alpha logit per slot and location.
#[derive(Debug, Clone)]
pub struct SlotDecoder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub slot_dim: usize,
    pub out_channels: usize,
}

pub struct DecoderTrace {
    positions: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    result: SlotDecodeResult,
}

impl DecoderTrace {
    pub fn result(&self) -> &SlotDecodeResult {
        &self.result
    }
}

impl SlotDecoder {
    pub fn declare<R: Rng>(b: &mut Builder<'_, R>, config: &SlotConfig, out_channels: usize) -> Self {
        Self {
            fc1: b.linear("decoder.fc1", config.slot_dim + POS_DIM, config.mlp_hidden, true),
            fc2: b.linear("decoder.fc2", config.mlp_hidden, out_channels + 1, true),
            slot_dim: config.slot_dim,
            out_channels,
        }
    }

    pub fn decode(&self, p: &ParameterSet, state: &SlotState, positions: &PositionGrid) -> Result<SlotDecodeResult> {
        self.forward(p, state, positions).map(|t| t.result)
    }

    pub fn forward(&self, p: &ParameterSet, state: &SlotState, positions: &PositionGrid) -> Result<DecoderTrace> {
        let k = state.num_slots();
        let n = positions.num_locations();
        let d = self.slot_dim;
        if state.slots.ncols() != d {
            return Err(Error::Shape(format!("slot dim {} != {d}", state.slots.ncols())));
        }
        let pos = positions.decoder_inputs();
        let w1 = p.mat(self.fc1.weight);
        let slot_part = state.slots.dot(&w1.slice(s![0..d, ..]));
        let pos_part = pos.dot(&w1.slice(s![d.., ..])) + p.vector(self.fc1.bias.unwrap());
        let hdim = slot_part.ncols();
        let mut pre = Array2::zeros((k * n, hdim));
        for slot in 0..k {
            let mut block = pre.slice_mut(s![slot * n..(slot + 1) * n, ..]);
            block.assign(&pos_part);
            block += &slot_part.row(slot);
        }
        let hidden = pre.mapv(gelu);
        let out = self.fc2.forward(p, hidden.view());
        ensure_finite(out.iter(), "slot decoder output")?;

        let c = self.out_channels;
        let per_slot = out
            .slice(s![.., 0..c])
            .to_owned()
            .into_shape_with_order((k, n, c))
            .expect("decoder output layout");
        let alpha = out
            .column(c)
            .to_owned()
            .into_shape_with_order((k, n))
            .expect("alpha layout");
        let result = SlotDecodeResult::from_parts(per_slot, alpha, positions.height(), positions.width());
        Ok(DecoderTrace {
            positions: pos,
            pre,
            hidden,
            result,
        })
    }

    /// Backpropagates gradients w.r.t. the reconstruction (`N × C_r`) and the
    /// masks (`K × N`); returns the gradient w.r.t. the slots.
    pub fn backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        state: &SlotState,
        trace: &DecoderTrace,
        d_recon: ArrayView2<f64>,
        d_masks: Option<ArrayView2<f64>>,
    ) -> Array2<f64> {
        let r = &trace.result;
        let (k, n, c) = r.per_slot_features.dim();
        let d = self.slot_dim;

        let mut dm = match d_masks {
            Some(g) => g.to_owned(),
            None => Array2::zeros((k, n)),
        };
        let mut d_out = Array2::zeros((k * n, c + 1));
        for slot in 0..k {
            let feats = r.per_slot_features.slice(s![slot, .., ..]);
            for loc in 0..n {
                let m = r.masks[[slot, loc]];
                let mut dot = 0.0;
                for ch in 0..c {
                    let g = d_recon[[loc, ch]];
                    d_out[[slot * n + loc, ch]] = m * g;
                    dot += g * feats[[loc, ch]];
                }
                dm[[slot, loc]] += dot;
            }
        }
        // masks = softmax over slots of alpha
        let d_alpha = softmax_rows_backward(&r.masks.t().to_owned(), &dm.t().to_owned());
        for slot in 0..k {
            for loc in 0..n {
                d_out[[slot * n + loc, c]] = d_alpha[[loc, slot]];
            }
        }

        let mut d_hidden = self.fc2.backward(p, grads, trace.hidden.view(), d_out.view());
        ndarray::Zip::from(&mut d_hidden)
            .and(&trace.pre)
            .for_each(|g, &z| *g *= gelu_grad(z));

        let hdim = d_hidden.ncols();
        let mut d_slot_part = Array2::zeros((k, hdim));
        let mut d_pos_part = Array2::zeros((n, hdim));
        for slot in 0..k {
            let block = d_hidden.slice(s![slot * n..(slot + 1) * n, ..]);
            d_slot_part.row_mut(slot).assign(&block.sum_axis(Axis(0)));
            d_pos_part += &block;
        }
        {
            let mut gw = grads.mat_mut(self.fc1.weight);
            ndarray::linalg::general_mat_mul(
                1.0,
                &state.slots.t(),
                &d_slot_part,
                1.0,
                &mut gw.slice_mut(s![0..d, ..]),
            );
            ndarray::linalg::general_mat_mul(
                1.0,
                &trace.positions.t(),
                &d_pos_part,
                1.0,
                &mut gw.slice_mut(s![d.., ..]),
            );
        }
        grads
            .vector_mut(self.fc1.bias.unwrap())
            .scaled_add(1.0, &d_pos_part.sum_axis(Axis(0)));
        d_slot_part.dot(&p.mat(self.fc1.weight).slice(s![0..d, ..]).t())
    }
}

/// Mean squared error between the target features and the reconstruction.
pub fn reconstruction_loss(target: &FeatureMap, result: &SlotDecodeResult) -> Result<f64> {
    reconstruction_loss_matrix(&target.to_matrix(), &result.reconstruction)
}

pub fn reconstruction_loss_matrix(target: &Array2<f64>, recon: &Array2<f64>) -> Result<f64> {
    if target.dim() != recon.dim() {
        return Err(Error::Shape(format!(
            "target {:?} vs reconstruction {:?}",
            target.dim(),
            recon.dim()
        )));
    }
    let sq: f64 = target.iter().zip(recon.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / target.len() as f64)
}

/// Gradient of [`reconstruction_loss_matrix`] w.r.t. the reconstruction.
pub fn reconstruction_loss_grad(target: &Array2<f64>, recon: &Array2<f64>) -> Array2<f64> {
    let n = target.len() as f64;
    (recon - target) * (2.0 / n)
}
