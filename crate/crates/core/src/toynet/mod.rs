//! Small two-head 2D segmentation network.
//!
//! A stack of same-padded `k x k` convolutions with ReLU feeds a `1 x 1`
//! convolution with two output channels: channel 0 is the lesion
//! segmentation, channel 1 predicts the ILP map. Both go through a sigmoid.
//! Training minimises `GDL(seg) + λ BCE(ilp)` averaged over the batch.

mod layers;
mod predict;
mod train;

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{generalized_dice_loss, soft_bce_loss, LossConfig};
use crate::math::sigmoid;

pub use layers::{ConvLayer, FeatureMap};
pub use predict::{predict_slice, predict_volume};
pub use train::{train, EpochRecord, TrainConfig, TrainSample};

/// How the ILP information enters training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IlpMode {
    /// Segmentation loss only.
    #[default]
    None,
    /// ILP map as auxiliary target of the second head.
    Supervision,
    /// ILP map as an extra input channel (no auxiliary loss).
    Input,
    /// Trained like `None`; predictions are multiplied by the ILP map.
    Postprocess,
    /// Supervision with the ILP function shifted by the given HU offset.
    Shifted(f64),
}

impl IlpMode {
    /// Modes that train the ILP head.
    pub fn supervises_ilp(self) -> bool {
        matches!(self, IlpMode::Supervision | IlpMode::Shifted(_))
    }

    pub fn input_channels(self) -> usize {
        if self == IlpMode::Input {
            2
        } else {
            1
        }
    }

    pub fn needs_ilp_function(self) -> bool {
        !matches!(self, IlpMode::None)
    }

    pub fn label(self) -> alloc::string::String {
        use alloc::format;
        match self {
            IlpMode::None => "none".into(),
            IlpMode::Supervision => "supervision".into(),
            IlpMode::Input => "input".into(),
            IlpMode::Postprocess => "postprocess".into(),
            IlpMode::Shifted(d) => format!("shifted({d:+})"),
        }
    }
}

/// Network architecture.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NetSpec {
    pub input_channels: usize,
    pub hidden_channels: Vec<usize>,
    pub kernel: usize,
    /// HU inputs are fed as `(hu - input_center) / input_scale`.
    pub input_center: f64,
    pub input_scale: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec { input_channels: 1, hidden_channels: vec![8, 16], kernel: 3, input_center: 100.0, input_scale: 100.0 }
    }
}

/// Output channels of the final layer.
pub const HEADS: usize = 2;

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.input_channels == 1 || self.input_channels == 2) {
            return Err(Error::InvalidParameter("input_channels must be 1 or 2".into()));
        }
        if self.hidden_channels.is_empty() || self.hidden_channels.contains(&0) {
            return Err(Error::InvalidParameter("need at least one non-empty hidden layer".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter("kernel size must be odd".into()));
        }
        if !(self.input_scale > 0.0 && self.input_center.is_finite()) {
            return Err(Error::InvalidParameter("input normalisation must have a positive scale".into()));
        }
        Ok(())
    }

    /// Layer shapes `(out, in, kernel)` in evaluation order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_channels.len() + 1);
        let mut prev = self.input_channels;
        for &c in &self.hidden_channels {
            shapes.push((c, prev, self.kernel));
            prev = c;
        }
        shapes.push((HEADS, prev, 1));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|&(o, i, k)| o * i * k * k + o).sum()
    }

    #[inline]
    pub fn normalize(&self, hu: f64) -> f64 {
        (hu - self.input_center) / self.input_scale
    }
}

/// Weights of every layer; the last layer is the two-channel head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub spec: NetSpec,
    pub layers: Vec<ConvLayer>,
    pub seed: u64,
}

/// Fan-in scaled uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// zero biases.
pub fn init(spec: &NetSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(o, i, k)| {
            let mut layer = ConvLayer::zeros(o, i, k);
            let bound = libm::sqrt(6.0 / layer.fan_in() as f64);
            layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
            layer
        })
        .collect();
    Ok(NetParams { spec: spec.clone(), layers, seed })
}

impl NetParams {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::num_params).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::ShapeMismatch { expected: self.num_params(), actual: values.len() });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&values[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Checks that the layer table is consistent with `spec`.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::InvalidParameter("layer count does not match spec".into()));
        }
        for (l, &(o, i, k)) in self.layers.iter().zip(&shapes) {
            if (l.out_channels, l.in_channels, l.kernel) != (o, i, k)
                || l.weights.len() != o * i * k * k
                || l.bias.len() != o
            {
                return Err(Error::InvalidParameter("layer shape does not match spec".into()));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(())
    }
}

/// Activations kept for the backward pass.
struct Trace {
    /// Input of each layer (post-ReLU for hidden layers).
    inputs: Vec<FeatureMap>,
    seg: Vec<f64>,
    ilp: Vec<f64>,
}

fn run(params: &NetParams, patch: &FeatureMap) -> Result<Trace> {
    if patch.channels != params.spec.input_channels {
        return Err(Error::ShapeMismatch { expected: params.spec.input_channels, actual: patch.channels });
    }
    if patch.data.len() != patch.channels * patch.plane_len() || patch.plane_len() == 0 {
        return Err(Error::ShapeMismatch { expected: patch.channels * patch.plane_len(), actual: patch.data.len() });
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut current = patch.clone();
    let last = params.layers.len() - 1;
    for (idx, layer) in params.layers.iter().enumerate() {
        let mut out = layer.forward(&current);
        if idx < last {
            out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(core::mem::replace(&mut current, out));
    }
    let seg = current.channel(0).iter().map(|&z| sigmoid(z)).collect();
    let ilp = current.channel(1).iter().map(|&z| sigmoid(z)).collect();
    Ok(Trace { inputs, seg, ilp })
}

/// Segmentation and ILP probabilities for a `[C, H, W]` patch.
pub fn forward(params: &NetParams, patch: &FeatureMap) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = run(params, patch)?;
    Ok((t.seg, t.ilp))
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub patch: FeatureMap,
    /// Binary lesion mask, one value per pixel.
    pub seg_gt: Vec<f64>,
    pub ilp_target: Option<Vec<f64>>,
}

/// Batch-averaged loss terms and parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub seg: f64,
    /// Unweighted ILP cross-entropy (0 when no target was given).
    pub ilp: f64,
    /// Gradient in [`NetParams::flatten`] order.
    pub gradient: Vec<f64>,
}

/// λ actually applied in a mode.
pub fn effective_lambda(mode: IlpMode, loss: &LossConfig) -> f64 {
    if mode.supervises_ilp() {
        loss.lambda
    } else {
        0.0
    }
}

/// Loss and reverse-mode gradient over a batch.
pub fn loss_and_grad(params: &NetParams, batch: &[BatchItem], mode: IlpMode, loss: &LossConfig) -> Result<BatchLoss> {
    loss.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lambda = effective_lambda(mode, loss);
    let mut gradient = vec![0.0; params.num_params()];
    let (mut total, mut seg_sum, mut ilp_sum) = (0.0, 0.0, 0.0);
    let inv_batch = 1.0 / batch.len() as f64;

    for item in batch {
        if mode.supervises_ilp() && item.ilp_target.is_none() {
            return Err(Error::MissingIlpTarget);
        }
        let trace = run(params, &item.patch)?;
        let seg = generalized_dice_loss(&trace.seg, &item.seg_gt, loss.epsilon)?;
        let ilp = match &item.ilp_target {
            Some(target) => Some(soft_bce_loss(&trace.ilp, target, loss.prob_clamp)?),
            None => None,
        };
        let ilp_value = ilp.as_ref().map_or(0.0, |l| l.value);
        seg_sum += seg.value;
        ilp_sum += ilp_value;
        total += if lambda == 0.0 { seg.value } else { seg.value + lambda * ilp_value };

        // dL/dlogit through the sigmoids
        let (h, w) = (item.patch.height, item.patch.width);
        let mut g = FeatureMap::zeros(HEADS, h, w);
        for (k, (d, &p)) in seg.gradient.iter().zip(&trace.seg).enumerate() {
            g.data[k] = inv_batch * d * p * (1.0 - p);
        }
        if lambda != 0.0 {
            let ilp = ilp.expect("supervised modes carry a target");
            let plane = h * w;
            for (k, (d, &p)) in ilp.gradient.iter().zip(&trace.ilp).enumerate() {
                g.data[plane + k] = inv_batch * lambda * d * p * (1.0 - p);
            }
        }
        backprop(params, &trace, g, &mut gradient);
    }
    Ok(BatchLoss { total: total * inv_batch, seg: seg_sum * inv_batch, ilp: ilp_sum * inv_batch, gradient })
}

fn backprop(params: &NetParams, trace: &Trace, mut grad_out: FeatureMap, gradient: &mut [f64]) {
    let offsets: Vec<usize> = params
        .layers
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.num_params();
            Some(start)
        })
        .collect();
    for idx in (0..params.layers.len()).rev() {
        let layer = &params.layers[idx];
        let input = &trace.inputs[idx];
        let slot = &mut gradient[offsets[idx]..offsets[idx] + layer.num_params()];
        match layer.backward(input, &grad_out, slot, idx > 0) {
            Some(mut g_in) => {
                // ReLU: inputs of hidden layers are post-activation
                for (g, &a) in g_in.data.iter_mut().zip(&input.data) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                grad_out = g_in;
            }
            None => break,
        }
    }
}
