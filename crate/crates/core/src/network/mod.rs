//! Feed-forward layer stacks: construction, inference, fault-space census and
//! the binary model format.

mod builder;
mod engine;
mod model_file;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activations::{Activation, ActivationKind, Granularity};
use crate::error::{Error, Result};
use crate::numerics::{window_extent, BufferId, BufferKind, FixedPoint32, FixedTensor, Tensor};

pub use builder::{LayerSpec, ModelSpec, NetworkBuilder};
pub use engine::{DecodedNetwork, Gradients, SampleTrace};
pub use model_file::{from_bytes, load, save, to_bytes, word_offset, MAGIC, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn has_parameters(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![outputs, inputs],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![out_channels, in_channels, kernel_h, kernel_w],
            _ => vec![0],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { outputs, .. } => vec![outputs],
            LayerKind::Conv2d { out_channels, .. } => vec![out_channels],
            _ => vec![0],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::shape("layer input", input, &self.weight_shape());
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::shape("dense input", input, &[inputs]));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad());
                }
                let h = window_extent(input[1], kernel_h, stride, padding).ok_or_else(bad)?;
                let w = window_extent(input[2], kernel_w, stride, padding).ok_or_else(bad)?;
                Ok(vec![out_channels, h, w])
            }
            LayerKind::MaxPool2d { window, stride } => {
                if input.len() != 3 || window == 0 {
                    return Err(Error::shape("maxpool2d input", input, &[window, stride]));
                }
                let h = window_extent(input[1], window, stride, 0);
                let w = window_extent(input[2], window, stride, 0);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(Error::shape("maxpool2d input", input, &[window, stride])),
                }
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: FixedTensor,
    pub bias: FixedTensor,
    pub activation: Activation,
}

impl Layer {
    /// A parameter-free layer (pooling or flatten).
    pub fn structural(kind: LayerKind) -> Self {
        Layer {
            kind,
            weights: FixedTensor::empty(),
            bias: FixedTensor::empty(),
            activation: Activation::Identity,
        }
    }

    pub fn buffer(&self, kind: BufferKind) -> &[FixedPoint32] {
        match kind {
            BufferKind::Weight => self.weights.words(),
            BufferKind::Bias => self.bias.words(),
            BufferKind::Bound => self.activation.bound_words(),
        }
    }

    pub fn buffer_mut(&mut self, kind: BufferKind) -> &mut [FixedPoint32] {
        match kind {
            BufferKind::Weight => self.weights.words_mut(),
            BufferKind::Bias => self.bias.words_mut(),
            BufferKind::Bound => self.activation.bound_words_mut(),
        }
    }
}

/// One entry of the fault-space census.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub buffer_id: BufferId,
    pub element_count: usize,
    pub bits_total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    output_shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Validates shapes, parameter buffers and activation placement.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        let last_param = layers
            .iter()
            .rposition(|l| l.kind.has_parameters())
            .ok_or_else(|| Error::Config("a network needs a dense or conv2d layer".into()))?;
        let mut output_shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for (idx, layer) in layers.iter().enumerate() {
            let out = layer.kind.output_shape(&shape)?;
            let invalid = |reason: String| Error::InvalidLayer { index: idx, reason };
            if layer.kind.has_parameters() {
                if layer.weights.shape() != layer.kind.weight_shape() {
                    return Err(Error::shape("weights", layer.weights.shape(), &layer.kind.weight_shape()));
                }
                if layer.bias.shape() != layer.kind.bias_shape() {
                    return Err(Error::shape("bias", layer.bias.shape(), &layer.kind.bias_shape()));
                }
                if idx == last_param && layer.activation != Activation::Identity {
                    return Err(invalid("the output layer must use the identity activation".into()));
                }
                if let Activation::FitRelu { slope, .. } = layer.activation {
                    if !(slope > 0.0 && slope.is_finite()) {
                        return Err(invalid(format!("slope must be positive, got {slope}")));
                    }
                }
                if let Activation::FitRelu { granularity, bounds, .. }
                | Activation::FitReluNaive { granularity, bounds } = &layer.activation
                {
                    let expected = bound_shape(&out, *granularity);
                    if bounds.shape() != expected {
                        return Err(Error::shape("bounds", bounds.shape(), &expected));
                    }
                }
            } else {
                if !layer.weights.is_empty() || !layer.bias.is_empty() {
                    return Err(invalid("pooling and flatten layers carry no parameters".into()));
                }
                if layer.activation != Activation::Identity {
                    return Err(invalid("pooling and flatten layers carry no activation".into()));
                }
            }
            output_shapes.push(out.clone());
            shape = out;
        }
        Ok(Network {
            input_shape,
            layers,
            output_shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.output_shapes.last().expect("non-empty")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&Layer> {
        self.layers.get(index).ok_or(Error::InvalidLayer {
            index,
            reason: format!("network has {} layers", self.layers.len()),
        })
    }

    /// Per-sample output shape of layer `index`.
    pub fn layer_output_shape(&self, index: usize) -> &[usize] {
        &self.output_shapes[index]
    }

    /// Per-sample input shape of layer `index`.
    pub fn layer_input_shape(&self, index: usize) -> &[usize] {
        if index == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[index - 1]
        }
    }

    /// Indices of parametric layers other than the output layer: the layers
    /// whose activations count as neurons.
    pub fn hidden_layers(&self) -> Vec<usize> {
        let params: Vec<usize> = (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.has_parameters())
            .collect();
        params[..params.len() - 1].to_vec()
    }

    pub fn output_layer(&self) -> usize {
        *(0..self.layers.len())
            .filter(|&i| self.layers[i].kind.has_parameters())
            .collect::<Vec<_>>()
            .last()
            .expect("validated")
    }

    /// Checks that `index` names a hidden parametric layer.
    pub fn check_hidden(&self, index: usize) -> Result<()> {
        self.layer(index)?;
        if self.hidden_layers().contains(&index) {
            Ok(())
        } else {
            Err(Error::InvalidLayer {
                index,
                reason: "not a hidden dense/conv2d layer".into(),
            })
        }
    }

    /// Total activation elements across hidden layers (per sample).
    pub fn neuron_count(&self) -> usize {
        self.hidden_layers()
            .iter()
            .map(|&i| self.output_shapes[i].iter().product::<usize>())
            .sum()
    }

    /// Total number of stored per-neuron bounds.
    pub fn bound_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l.activation.kind(),
                    ActivationKind::Fitrelu | ActivationKind::FitreluNaive
                )
            })
            .map(|l| l.activation.bound_words().len())
            .sum()
    }

    pub fn has_kind(&self, kind: ActivationKind) -> bool {
        self.hidden_layers()
            .iter()
            .any(|&i| self.layers[i].activation.kind() == kind)
    }

    /// Replace the activation of layer `index`, re-validating the network.
    pub fn set_activation(&mut self, index: usize, activation: Activation) -> Result<()> {
        self.layer(index)?;
        let mut layers = self.layers.clone();
        layers[index].activation = activation;
        *self = Network::new(self.input_shape.clone(), layers)?;
        Ok(())
    }

    /// Copy of this network with every hidden activation set to plain ReLU.
    /// Weights and biases are untouched.
    pub fn with_relu_activations(&self) -> Network {
        let mut net = self.clone();
        for i in self.hidden_layers() {
            net.layers[i].activation = Activation::Relu;
        }
        net
    }

    pub fn buffer(&self, id: BufferId) -> Option<&[FixedPoint32]> {
        self.layers.get(id.layer).map(|l| l.buffer(id.kind))
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> Option<&mut [FixedPoint32]> {
        self.layers.get_mut(id.layer).map(|l| l.buffer_mut(id.kind))
    }

    /// Every fault-injectable buffer, ordered by layer then weight, bias,
    /// bound. Empty buffers are omitted.
    pub fn parameter_census(&self) -> Vec<CensusEntry> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            for kind in [BufferKind::Weight, BufferKind::Bias, BufferKind::Bound] {
                let n = l.buffer(kind).len();
                if n > 0 {
                    out.push(CensusEntry {
                        buffer_id: BufferId::new(layer, kind),
                        element_count: n,
                        bits_total: 32 * n as u64,
                    });
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_census().iter().map(|e| e.element_count).sum()
    }

    /// SHA-256 over the raw words of the selected buffer kinds, in census order.
    pub fn digest(&self, kinds: &[BufferKind]) -> String {
        let mut h = Sha256::new();
        for (layer, l) in self.layers.iter().enumerate() {
            for &kind in kinds {
                h.update((layer as u32).to_le_bytes());
                h.update([kind as u8]);
                for w in l.buffer(kind) {
                    h.update(w.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of the accuracy parameters (all weights and biases).
    pub fn weights_digest(&self) -> String {
        self.digest(&[BufferKind::Weight, BufferKind::Bias])
    }

    pub fn buffer_digest(&self, id: BufferId) -> String {
        let mut h = Sha256::new();
        for w in self.buffer(id).unwrap_or(&[]) {
            h.update(w.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn decoded(&self) -> DecodedNetwork {
        DecodedNetwork::new(self)
    }

    /// Logits for one sample (shape `input_shape`) or a batch
    /// (shape `[n, input_shape..]`).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (batch, batched) = self.batch_of(input)?;
        let logits = self.decoded().forward_batch(input.data(), batch);
        if batched {
            let mut shape = vec![batch];
            shape.extend_from_slice(self.output_shape());
            Tensor::new(shape, logits)
        } else {
            Tensor::new(self.output_shape().to_vec(), logits)
        }
    }

    /// Arg-max class of one sample.
    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        let (batch, _) = self.batch_of(input)?;
        if batch != 1 {
            return Err(Error::shape("predict", input.shape(), &self.input_shape));
        }
        Ok(argmax(self.forward(input)?.data()))
    }

    /// Arg-max class of every sample of a batch.
    pub fn predict_batch(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let (batch, _) = self.batch_of(inputs)?;
        Ok(self.decoded().predict_batch(inputs.data(), batch))
    }

    fn batch_of(&self, input: &Tensor) -> Result<(usize, bool)> {
        let s = input.shape();
        if s == self.input_shape.as_slice() {
            Ok((1, false))
        } else if s.len() == self.input_shape.len() + 1 && s[1..] == self.input_shape[..] {
            Ok((s[0], true))
        } else {
            Err(Error::shape("forward input", s, &self.input_shape))
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shape of a layer's bound tensor for a given output shape.
pub fn bound_shape(output_shape: &[usize], granularity: Granularity) -> Vec<usize> {
    match granularity {
        Granularity::Element => output_shape.to_vec(),
        Granularity::Channel => vec![output_shape[0]],
    }
}

/// Elements per channel of an output shape (1 for flat outputs).
pub fn spatial_extent(output_shape: &[usize]) -> usize {
    output_shape[1..].iter().product::<usize>().max(1)
}

#[cfg(test)]
mod tests;
