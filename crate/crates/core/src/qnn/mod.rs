//! Desk-scale quantized network used as the attack victim.
//!
//! Weights are stored as 8-bit two's-complement codes with one symmetric
//! scale per layer. Inference and backpropagation run in `f64` on the
//! dequantized weights; biases stay in floating point and are not part of
//! the attack surface.

mod checkpoint;
mod dataset;
mod layer;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{load_digits_csv, Batch};
pub use layer::{Activation, Layer, LayerKind};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("bad dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Address of one stored weight bit. Bit 7 is the sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BitLocation {
    pub layer: usize,
    pub weight_index: usize,
    pub bit: u8,
}

impl BitLocation {
    pub const fn new(layer: usize, weight_index: usize, bit: u8) -> Self {
        Self {
            layer,
            weight_index,
            bit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlipDirection {
    ZeroToOne,
    OneToZero,
}

impl FlipDirection {
    pub fn from_current(bit_value: bool) -> Self {
        if bit_value {
            FlipDirection::OneToZero
        } else {
            FlipDirection::ZeroToOne
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FlipDirection::ZeroToOne => "0to1",
            FlipDirection::OneToZero => "1to0",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "0to1" => Some(FlipDirection::ZeroToOne),
            "1to0" => Some(FlipDirection::OneToZero),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitGradient {
    pub location: BitLocation,
    /// `|dL/dw| * scale * 2^bit`
    pub magnitude: f64,
    pub ascent_flip_direction: FlipDirection,
}

/// Place value of a bit in an 8-bit two's-complement code.
pub fn place_value(bit: u8) -> f64 {
    if bit == 7 {
        -128.0
    } else {
        (1u32 << bit) as f64
    }
}

/// Symmetric per-tensor quantization with `scale = max|v| / 127`.
pub fn quantize(values: &[f64]) -> (Vec<i8>, f64) {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return (vec![0; values.len()], 1.0);
    }
    let scale = max / 127.0;
    let codes = values
        .iter()
        .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (codes, scale)
}

pub fn dequantize(codes: &[i8], scale: f64) -> Vec<f64> {
    codes.iter().map(|&c| c as f64 * scale).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    layers: Vec<Layer>,
    num_classes: usize,
}

/// Per-layer dequantized weights, the point at which gradients are taken.
pub type FloatWeights = Vec<Vec<f64>>;

impl QuantizedModel {
    pub fn new(layers: Vec<Layer>, num_classes: usize) -> Result<Self, QnnError> {
        if layers.is_empty() {
            return Err(QnnError::Shape("model has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.codes.len() != l.weight_count() {
                return Err(QnnError::Shape(format!(
                    "layer {i}: {} codes for {} weights",
                    l.codes.len(),
                    l.weight_count()
                )));
            }
            if l.bias.len() != l.bias_len() {
                return Err(QnnError::Shape(format!("layer {i}: bias length")));
            }
            if let LayerKind::Conv2d {
                kernel, in_h, in_w, ..
            } = l.kind
            {
                if kernel == 0 || kernel > in_h || kernel > in_w {
                    return Err(QnnError::Shape(format!("layer {i}: kernel too large")));
                }
            }
            if !(l.scale.is_finite() && l.scale > 0.0) {
                return Err(QnnError::Shape(format!("layer {i}: scale must be positive")));
            }
            if i > 0 && layers[i - 1].output_len() != l.input_len() {
                return Err(QnnError::Shape(format!(
                    "layer {i} expects {} inputs, previous layer produces {}",
                    l.input_len(),
                    layers[i - 1].output_len()
                )));
            }
        }
        if layers.last().unwrap().output_len() != num_classes {
            return Err(QnnError::Shape("last layer width != num_classes".into()));
        }
        Ok(Self {
            layers,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(Layer::weight_count).sum()
    }

    pub fn total_bits(&self) -> usize {
        self.total_weights() * 8
    }

    pub fn layer_weight_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::weight_count).collect()
    }

    pub fn code(&self, layer: usize, index: usize) -> i8 {
        self.layers[layer].codes[index]
    }

    pub fn set_code(&mut self, layer: usize, index: usize, code: i8) {
        self.layers[layer].codes[index] = code;
    }

    pub fn bit(&self, loc: BitLocation) -> bool {
        (self.layers[loc.layer].codes[loc.weight_index] as u8 >> loc.bit) & 1 == 1
    }

    pub fn contains(&self, loc: BitLocation) -> bool {
        loc.layer < self.layers.len()
            && loc.weight_index < self.layers[loc.layer].weight_count()
            && loc.bit < 8
    }

    /// Inverts one stored bit; applying twice is the identity.
    pub fn flip_bit(&mut self, loc: BitLocation) {
        let c = &mut self.layers[loc.layer].codes[loc.weight_index];
        *c = (*c as u8 ^ (1u8 << loc.bit)) as i8;
    }

    /// All weight codes, layer-major.
    pub fn bit_tensor(&self) -> Vec<i8> {
        self.layers.iter().flat_map(|l| l.codes.iter().copied()).collect()
    }

    pub fn hamming_distance(&self, other: &QuantizedModel) -> u32 {
        self.bit_tensor()
            .iter()
            .zip(other.bit_tensor())
            .map(|(a, b)| (*a as u8 ^ b as u8).count_ones())
            .sum()
    }

    pub fn dequantize(&self) -> FloatWeights {
        self.layers.iter().map(Layer::dequantized).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), QnnError> {
        if batch.dim() != self.input_len() {
            return Err(QnnError::Shape(format!(
                "batch has {} features, model expects {}",
                batch.dim(),
                self.input_len()
            )));
        }
        Ok(())
    }

    fn check_weights(&self, w: &FloatWeights) -> Result<(), QnnError> {
        if w.len() != self.layers.len()
            || w.iter().zip(&self.layers).any(|(w, l)| w.len() != l.weight_count())
        {
            return Err(QnnError::Shape("float weights do not match layers".into()));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Batch) -> Result<Vec<Vec<f64>>, QnnError> {
        self.forward_with(&self.dequantize(), batch)
    }

    /// Forward pass at explicit float weights (same architecture).
    pub fn forward_with(
        &self,
        weights: &FloatWeights,
        batch: &Batch,
    ) -> Result<Vec<Vec<f64>>, QnnError> {
        self.check_batch(batch)?;
        self.check_weights(weights)?;
        Ok((0..batch.len())
            .map(|i| self.forward_sample(weights, batch.sample(i)))
            .collect())
    }

    fn forward_sample(&self, weights: &FloatWeights, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, w) in self.layers.iter().zip(weights) {
            let mut z = vec![0.0; l.output_len()];
            l.affine(w, &h, &mut z);
            for v in &mut z {
                *v = l.activation.apply(*v);
            }
            h = z;
        }
        h
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64, QnnError> {
        self.loss_with(&self.dequantize(), batch)
    }

    /// Mean cross-entropy at explicit float weights.
    pub fn loss_with(&self, weights: &FloatWeights, batch: &Batch) -> Result<f64, QnnError> {
        let logits = self.forward_with(weights, batch)?;
        self.check_labels(batch)?;
        let total: f64 = logits
            .iter()
            .zip(batch.labels())
            .map(|(z, &y)| cross_entropy(z, y))
            .sum();
        Ok(total / batch.len().max(1) as f64)
    }

    fn check_labels(&self, batch: &Batch) -> Result<(), QnnError> {
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= self.num_classes) {
            return Err(QnnError::Shape(format!("label {bad} out of range")));
        }
        Ok(())
    }

    pub fn accuracy(&self, batch: &Batch) -> Result<f64, QnnError> {
        let logits = self.forward(batch)?;
        let correct = logits
            .iter()
            .zip(batch.labels())
            .filter(|(z, &y)| argmax(z) == y)
            .count();
        Ok(correct as f64 / batch.len().max(1) as f64)
    }

    pub fn loss_and_weight_grad(&self, batch: &Batch) -> Result<(f64, FloatWeights), QnnError> {
        self.loss_and_grad_with(&self.dequantize(), batch)
    }

    /// Mean cross-entropy and its exact gradient w.r.t. the float weights.
    pub fn loss_and_grad_with(
        &self,
        weights: &FloatWeights,
        batch: &Batch,
    ) -> Result<(f64, FloatWeights), QnnError> {
        self.check_batch(batch)?;
        self.check_weights(weights)?;
        self.check_labels(batch)?;
        let n = batch.len().max(1) as f64;
        let mut grads: FloatWeights = self.layers.iter().map(|l| vec![0.0; l.weight_count()]).collect();
        let mut loss = 0.0;
        for i in 0..batch.len() {
            // keep inputs, pre-activations and outputs of every layer
            let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
            let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
            let mut h = batch.sample(i).to_vec();
            for (l, w) in self.layers.iter().zip(weights) {
                let mut z = vec![0.0; l.output_len()];
                l.affine(w, &h, &mut z);
                let a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
                inputs.push(h);
                pre.push(z);
                h = a;
            }
            let y = batch.labels()[i];
            loss += cross_entropy(&h, y);
            let mut da = softmax(&h);
            da[y] -= 1.0;
            da.iter_mut().for_each(|v| *v /= n);
            for li in (0..self.layers.len()).rev() {
                let l = &self.layers[li];
                let z = &pre[li];
                let out = if li + 1 < self.layers.len() {
                    &inputs[li + 1]
                } else {
                    &h
                };
                let dz: Vec<f64> = da
                    .iter()
                    .zip(z)
                    .zip(out)
                    .map(|((g, &zv), &av)| g * l.activation.derivative(zv, av))
                    .collect();
                if li == 0 {
                    l.backward(&weights[li], &inputs[li], &dz, &mut grads[li], None);
                } else {
                    let mut dx = vec![0.0; l.input_len()];
                    l.backward(&weights[li], &inputs[li], &dz, &mut grads[li], Some(&mut dx));
                    da = dx;
                }
            }
        }
        Ok((loss / n, grads))
    }

    /// Loss-ascending bit flips ranked by first-order magnitude.
    ///
    /// Sorted descending by magnitude, ties broken by `(layer, weight_index,
    /// bit)` ascending. Bits whose flip would not increase the loss to first
    /// order (including zero gradient) are left out.
    pub fn bit_gradients(&self, batch: &Batch) -> Result<Vec<BitGradient>, QnnError> {
        let (_, grads) = self.loss_and_weight_grad(batch)?;
        let mut out = Vec::new();
        for (li, (l, g)) in self.layers.iter().zip(&grads).enumerate() {
            for (k, (&code, &gw)) in l.codes.iter().zip(g).enumerate() {
                out.extend(eligible_bits(li, k, code, gw, l.scale));
            }
        }
        sort_ranked(&mut out);
        Ok(out)
    }
}

/// Eligible loss-ascending bit flips of one weight.
pub(crate) fn eligible_bits(
    layer: usize,
    index: usize,
    code: i8,
    grad: f64,
    scale: f64,
) -> impl Iterator<Item = BitGradient> {
    (0..8u8).filter_map(move |b| {
        let set = (code as u8 >> b) & 1 == 1;
        let delta = place_value(b) * if set { -1.0 } else { 1.0 };
        if grad * delta <= 0.0 {
            return None;
        }
        Some(BitGradient {
            location: BitLocation::new(layer, index, b),
            magnitude: grad.abs() * scale * (1u32 << b) as f64,
            ascent_flip_direction: FlipDirection::from_current(set),
        })
    })
}

pub(crate) fn sort_ranked(v: &mut [BitGradient]) {
    v.sort_by(|a, b| match b.magnitude.total_cmp(&a.magnitude) {
        Ordering::Equal => a.location.cmp(&b.location),
        o => o,
    });
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}
