//! Bound initialization from fault-free activations.

use rayon::prelude::*;

use super::{Activation, Granularity};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{bound_shape, spatial_extent, Network};
use crate::numerics::{FixedPoint32, FixedTensor};

/// Bound given to neurons that never fire on the calibration set.
pub const CALIBRATION_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub layer: usize,
    pub values: FixedTensor,
}

/// Per-neuron bounds for every hidden layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundStore {
    pub granularity: Granularity,
    pub layers: Vec<LayerBounds>,
}

impl BoundStore {
    /// Bounds currently stored in a network's FitReLU activations.
    pub fn from_network(net: &Network) -> Result<Self> {
        let mut granularity = Granularity::Element;
        let mut layers = Vec::new();
        for i in net.hidden_layers() {
            match &net.layers()[i].activation {
                Activation::FitRelu {
                    granularity: g,
                    bounds,
                    ..
                }
                | Activation::FitReluNaive {
                    granularity: g,
                    bounds,
                } => {
                    granularity = *g;
                    layers.push(LayerBounds {
                        layer: i,
                        values: bounds.clone(),
                    });
                }
                _ => {
                    return Err(Error::Stage(format!(
                        "layer {i} has no per-neuron bounds; run modify/calibrate first"
                    )))
                }
            }
        }
        Ok(BoundStore {
            granularity,
            layers,
        })
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.values.words().iter().map(|w| w.decode()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.values().sum::<f64>() / self.count().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.values().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Replaces each covered layer's activation with FitReLU using these
    /// bounds. Weights and biases are not touched.
    pub fn install(&self, net: &Network, slope: f64) -> Result<Network> {
        self.install_with(net, |bounds| Activation::FitRelu {
            slope,
            granularity: self.granularity,
            bounds,
        })
    }

    /// Same as [`install`](Self::install) but with hard per-neuron bounds.
    pub fn install_naive(&self, net: &Network) -> Result<Network> {
        self.install_with(net, |bounds| Activation::FitReluNaive {
            granularity: self.granularity,
            bounds,
        })
    }

    fn install_with(
        &self,
        net: &Network,
        make: impl Fn(FixedTensor) -> Activation,
    ) -> Result<Network> {
        let mut out = net.clone();
        for lb in &self.layers {
            out.set_activation(lb.layer, make(lb.values.clone()))?;
        }
        Ok(out)
    }
}

/// Per-element maxima of the ReLU outputs of every hidden layer, over the
/// dataset, with the network evaluated under plain ReLU semantics. Returned
/// in hidden-layer order. Never-active elements report 0.
pub fn neuron_maxima(net: &Network, dataset: &Dataset) -> Result<Vec<(usize, Vec<f64>)>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.sample_shape() != net.input_shape() {
        return Err(Error::shape("calibration input", dataset.sample_shape(), net.input_shape()));
    }
    let hidden = net.hidden_layers();
    let decoded = net.with_relu_activations().decoded();
    let zero: Vec<Vec<f64>> = hidden
        .iter()
        .map(|&i| vec![0.0; net.layer_output_shape(i).iter().product()])
        .collect();
    let merge = |mut a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| {
        for (x, y) in a.iter_mut().zip(b) {
            for (p, q) in x.iter_mut().zip(y) {
                *p = p.max(q);
            }
        }
        a
    };
    let maxima = (0..dataset.len())
        .into_par_iter()
        .fold(
            || zero.clone(),
            |mut acc, s| {
                let trace = decoded.forward_traced(dataset.sample(s));
                for (slot, &i) in acc.iter_mut().zip(&hidden) {
                    for (m, &v) in slot.iter_mut().zip(&trace.acts[i + 1]) {
                        *m = m.max(v);
                    }
                }
                acc
            },
        )
        .reduce(|| zero.clone(), merge);
    Ok(hidden.into_iter().zip(maxima).collect())
}

/// Per-neuron bounds: each neuron's maximum fault-free ReLU output over the
/// dataset, floored at [`CALIBRATION_FLOOR`].
pub fn calibrate_bounds(
    net: &Network,
    dataset: &Dataset,
    granularity: Granularity,
) -> Result<BoundStore> {
    let mut layers = Vec::new();
    for (layer, maxima) in neuron_maxima(net, dataset)? {
        let shape = net.layer_output_shape(layer);
        let values: Vec<f64> = match granularity {
            Granularity::Element => maxima,
            Granularity::Channel => maxima
                .chunks(spatial_extent(shape))
                .map(|c| c.iter().copied().fold(0.0, f64::max))
                .collect(),
        };
        let words = values
            .iter()
            .map(|&v| FixedPoint32::encode_positive(v.max(CALIBRATION_FLOOR)))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerBounds {
            layer,
            values: FixedTensor::new(bound_shape(shape, granularity), words)?,
        });
    }
    Ok(BoundStore {
        granularity,
        layers,
    })
}

/// One bound per hidden layer: the largest activation of any neuron in it.
pub fn calibrate_global_bounds(net: &Network, dataset: &Dataset) -> Result<Vec<(usize, f64)>> {
    Ok(neuron_maxima(net, dataset)?
        .into_iter()
        .map(|(layer, m)| (layer, m.into_iter().fold(CALIBRATION_FLOOR, f64::max)))
        .collect())
}
