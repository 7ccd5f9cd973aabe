use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, Network};
use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::numerics::{FixedPoint32, FixedTensor};

/// One layer of an architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        outputs: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

/// Architecture description as found in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// He-initialized network with ReLU on every hidden layer.
    pub fn build(&self, seed: u64) -> Result<Network> {
        let mut b = NetworkBuilder::new(&self.input_shape);
        for l in &self.layers {
            b = match *l {
                LayerSpec::Dense { outputs } => b.dense(outputs),
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => b.conv2d(out_channels, kernel, stride, padding),
                LayerSpec::Maxpool2d { window, stride } => b.maxpool2d(window, stride),
                LayerSpec::Flatten => b.flatten(),
            };
        }
        b.build(seed)
    }
}

/// Incrementally assembles a network, tracking the running shape.
#[derive(Debug)]
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    kinds: Vec<LayerKind>,
    shape: Vec<usize>,
    error: Option<Error>,
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        NetworkBuilder {
            input_shape: input_shape.to_vec(),
            kinds: Vec::new(),
            shape: input_shape.to_vec(),
            error: None,
        }
    }

    fn push(mut self, kind: LayerKind) -> Self {
        if self.error.is_some() {
            return self;
        }
        match kind.output_shape(&self.shape) {
            Ok(s) => {
                self.shape = s;
                self.kinds.push(kind);
            }
            Err(e) => self.error = Some(e),
        }
        self
    }

    pub fn dense(self, outputs: usize) -> Self {
        let inputs = if self.shape.len() == 1 { self.shape[0] } else { 0 };
        self.push(LayerKind::Dense { inputs, outputs })
    }

    pub fn conv2d(self, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let in_channels = self.shape.first().copied().unwrap_or(0);
        self.push(LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        })
    }

    pub fn maxpool2d(self, window: usize, stride: usize) -> Self {
        self.push(LayerKind::MaxPool2d { window, stride })
    }

    pub fn flatten(self) -> Self {
        self.push(LayerKind::Flatten)
    }

    pub fn build(self, seed: u64) -> Result<Network> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last_param = self.kinds.iter().rposition(|k| k.has_parameters());
        let mut layers = Vec::with_capacity(self.kinds.len());
        for (i, kind) in self.kinds.iter().enumerate() {
            if !kind.has_parameters() {
                layers.push(Layer::structural(*kind));
                continue;
            }
            let wshape = kind.weight_shape();
            let fan_in: usize = wshape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let n: usize = wshape.iter().product();
            let words = (0..n)
                .map(|_| FixedPoint32::encode(normal.sample(&mut rng)))
                .collect::<Result<Vec<_>>>()?;
            let bshape = kind.bias_shape();
            let bias = vec![FixedPoint32::ZERO; bshape[0]];
            layers.push(Layer {
                kind: *kind,
                weights: FixedTensor::new(wshape, words)?,
                bias: FixedTensor::new(bshape, bias)?,
                activation: if Some(i) == last_param {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            });
        }
        Network::new(self.input_shape, layers)
    }
}
