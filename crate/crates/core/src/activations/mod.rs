//! Activation families, their fault-injectable bound storage, and bound
//! calibration.

mod calibrate;
mod functions;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FixedPoint32, FixedTensor};

pub use calibrate::{
    calibrate_bounds, calibrate_global_bounds, neuron_maxima, BoundStore, LayerBounds,
    CALIBRATION_FLOOR,
};
pub use functions::{
    fitrelu, fitrelu_grad_lambda, fitrelu_grad_x, fitrelu_naive, gbrelu, gbrelu_raw, logistic,
    relu, GbMode, GATE_SATURATION,
};

/// Default FitReLU slope.
pub const DEFAULT_SLOPE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Relu,
    Gbrelu,
    FitreluNaive,
    Fitrelu,
}

/// What one bound parameter covers in a conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One bound per output element (channel x spatial position).
    #[default]
    Element,
    /// One bound per output channel.
    Channel,
}

/// Declarative description of an activation, as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationConfig {
    pub kind: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<GbMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
}

impl ActivationConfig {
    pub fn relu() -> Self {
        ActivationConfig {
            kind: ActivationKind::Relu,
            mode: None,
            global_bound: None,
            slope: None,
        }
    }

    pub fn gbrelu(bound: f64, mode: GbMode) -> Self {
        ActivationConfig {
            kind: ActivationKind::Gbrelu,
            mode: Some(mode),
            global_bound: Some(bound),
            slope: None,
        }
    }

    pub fn fitrelu(slope: f64) -> Self {
        ActivationConfig {
            kind: ActivationKind::Fitrelu,
            mode: None,
            global_bound: None,
            slope: Some(slope),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.slope {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Config(format!("slope k must be positive, got {k}")));
            }
        }
        if let Some(b) = self.global_bound {
            if b.is_nan() || b <= 0.0 {
                return Err(Error::Config(format!("global bound must be positive, got {b}")));
            }
        }
        match self.kind {
            ActivationKind::Gbrelu if self.global_bound.is_none() => {
                Err(Error::Config("gbrelu requires a global_bound".into()))
            }
            ActivationKind::Gbrelu if self.mode.is_none() => {
                Err(Error::Config("gbrelu requires a mode".into()))
            }
            _ => Ok(()),
        }
    }
}

/// An activation together with its stored (fault-injectable) parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    GbRelu {
        mode: GbMode,
        bound: FixedPoint32,
    },
    FitReluNaive {
        granularity: Granularity,
        bounds: FixedTensor,
    },
    FitRelu {
        slope: f64,
        granularity: Granularity,
        bounds: FixedTensor,
    },
}

impl Activation {
    /// A GBReLU whose bound is quantized to the nearest positive word.
    pub fn gbrelu(bound: f64, mode: GbMode) -> Result<Self> {
        ActivationConfig::gbrelu(bound, mode).validate()?;
        Ok(Activation::GbRelu {
            mode,
            bound: FixedPoint32::encode_positive(bound)?,
        })
    }

    pub fn kind(&self) -> ActivationKind {
        match self {
            Activation::Identity => ActivationKind::Identity,
            Activation::Relu => ActivationKind::Relu,
            Activation::GbRelu { .. } => ActivationKind::Gbrelu,
            Activation::FitReluNaive { .. } => ActivationKind::FitreluNaive,
            Activation::FitRelu { .. } => ActivationKind::Fitrelu,
        }
    }

    pub fn config(&self) -> ActivationConfig {
        match self {
            Activation::Identity | Activation::Relu | Activation::FitReluNaive { .. } => {
                ActivationConfig {
                    kind: self.kind(),
                    mode: None,
                    global_bound: None,
                    slope: None,
                }
            }
            Activation::GbRelu { mode, bound } => ActivationConfig::gbrelu(bound.decode(), *mode),
            Activation::FitRelu { slope, .. } => ActivationConfig::fitrelu(*slope),
        }
    }

    pub fn granularity(&self) -> Granularity {
        match self {
            Activation::FitReluNaive { granularity, .. } | Activation::FitRelu { granularity, .. } => {
                *granularity
            }
            _ => Granularity::Element,
        }
    }

    pub fn slope(&self) -> Option<f64> {
        match self {
            Activation::FitRelu { slope, .. } => Some(*slope),
            _ => None,
        }
    }

    /// Stored activation parameter words (empty when there are none).
    pub fn bound_words(&self) -> &[FixedPoint32] {
        match self {
            Activation::GbRelu { bound, .. } => std::slice::from_ref(bound),
            Activation::FitReluNaive { bounds, .. } | Activation::FitRelu { bounds, .. } => {
                bounds.words()
            }
            _ => &[],
        }
    }

    pub fn bound_words_mut(&mut self) -> &mut [FixedPoint32] {
        match self {
            Activation::GbRelu { bound, .. } => std::slice::from_mut(bound),
            Activation::FitReluNaive { bounds, .. } | Activation::FitRelu { bounds, .. } => {
                bounds.words_mut()
            }
            _ => &mut [],
        }
    }

    pub fn decode(&self) -> ActivationEval {
        let (kind, slope, mode) = match self {
            Activation::FitRelu { slope, .. } => (self.kind(), *slope, GbMode::SquashToZero),
            Activation::GbRelu { mode, .. } => (self.kind(), 0.0, *mode),
            _ => (self.kind(), 0.0, GbMode::SquashToZero),
        };
        ActivationEval {
            kind,
            slope,
            mode,
            per_channel: self.granularity() == Granularity::Channel,
            bounds: self.bound_words().iter().map(|w| w.decode()).collect(),
        }
    }
}

/// An activation with its parameters decoded to `f64`, ready for evaluation.
#[derive(Debug, Clone)]
pub struct ActivationEval {
    kind: ActivationKind,
    slope: f64,
    mode: GbMode,
    per_channel: bool,
    bounds: Vec<f64>,
}

impl ActivationEval {
    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    #[inline]
    fn bound_index(&self, i: usize, spatial: usize) -> usize {
        if self.per_channel {
            i / spatial
        } else {
            i
        }
    }

    /// Apply to one sample's pre-activations. `spatial` is the number of
    /// elements per channel (1 for dense layers).
    pub fn forward(&self, pre: &[f64], out: &mut [f64], spatial: usize) {
        match self.kind {
            ActivationKind::Identity => out.copy_from_slice(pre),
            ActivationKind::Relu => {
                for (o, &x) in out.iter_mut().zip(pre) {
                    *o = relu(x);
                }
            }
            ActivationKind::Gbrelu => {
                let l = self.bounds[0];
                for (o, &x) in out.iter_mut().zip(pre) {
                    *o = gbrelu_raw(x, l, self.mode);
                }
            }
            ActivationKind::FitreluNaive => {
                for (i, (o, &x)) in out.iter_mut().zip(pre).enumerate() {
                    let l = self.bounds[self.bound_index(i, spatial)];
                    *o = gbrelu_raw(x, l, GbMode::SquashToZero);
                }
            }
            ActivationKind::Fitrelu => {
                let k = self.slope;
                for (i, (o, &x)) in out.iter_mut().zip(pre).enumerate() {
                    let l = self.bounds[self.bound_index(i, spatial)];
                    *o = fitrelu(x, l, k);
                }
            }
        }
    }

    /// Vector-Jacobian product: writes `∂L/∂pre` and, for FitReLU, adds
    /// `∂L/∂λ` into `grad_bounds`.
    pub fn backward(
        &self,
        pre: &[f64],
        grad_out: &[f64],
        grad_pre: &mut [f64],
        grad_bounds: Option<&mut [f64]>,
        spatial: usize,
    ) {
        match self.kind {
            ActivationKind::Identity => grad_pre.copy_from_slice(grad_out),
            ActivationKind::Relu => {
                for ((g, &x), &go) in grad_pre.iter_mut().zip(pre).zip(grad_out) {
                    *g = if x > 0.0 { go } else { 0.0 };
                }
            }
            ActivationKind::Gbrelu | ActivationKind::FitreluNaive => {
                for (i, ((g, &x), &go)) in grad_pre.iter_mut().zip(pre).zip(grad_out).enumerate() {
                    let l = if self.kind == ActivationKind::Gbrelu {
                        self.bounds[0]
                    } else {
                        self.bounds[self.bound_index(i, spatial)]
                    };
                    // Both modes are flat above the bound.
                    *g = if x > 0.0 && x <= l { go } else { 0.0 };
                }
            }
            ActivationKind::Fitrelu => {
                let k = self.slope;
                let mut gb = grad_bounds;
                for (i, ((g, &x), &go)) in grad_pre.iter_mut().zip(pre).zip(grad_out).enumerate() {
                    let bi = self.bound_index(i, spatial);
                    let l = self.bounds[bi];
                    *g = go * fitrelu_grad_x(x, l, k);
                    if let Some(gb) = gb.as_deref_mut() {
                        gb[bi] += go * fitrelu_grad_lambda(x, l, k);
                    }
                }
            }
        }
    }
}
