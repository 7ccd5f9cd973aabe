//! Fixed-point storage, tensors, and bit-level fault primitives.

mod fixed;
mod tensor;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fixed::{
    decode_all, decode_fixed, encode_all, encode_fixed, flip_bit, FixedPoint32, FRACTION_BITS,
};
pub use tensor::{
    add, conv2d, conv2d_sample, conv2d_sample_backward, matmul, maxpool2d, maxpool2d_sample,
    strides, window_extent, ConvGeometry, Tensor,
};

/// A shaped buffer of fixed-point words. This is how every parameter lives in
/// memory, so it is also what faults are injected into.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FixedTensor {
    shape: Vec<usize>,
    words: Vec<FixedPoint32>,
}

impl FixedTensor {
    pub fn new(shape: Vec<usize>, words: Vec<FixedPoint32>) -> Result<Self> {
        if shape.iter().product::<usize>() != words.len() {
            return Err(Error::shape("fixed tensor", &shape, &[words.len()]));
        }
        Ok(FixedTensor { shape, words })
    }

    pub fn empty() -> Self {
        FixedTensor {
            shape: vec![0],
            words: Vec::new(),
        }
    }

    pub fn encode(t: &Tensor) -> Result<Self> {
        Ok(FixedTensor {
            shape: t.shape().to_vec(),
            words: encode_all(t.data())?,
        })
    }

    pub fn decode(&self) -> Tensor {
        Tensor::new(self.shape.clone(), decode_all(&self.words)).expect("shape invariant")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[FixedPoint32] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [FixedPoint32] {
        &mut self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Flip one stored bit in place.
    pub fn flip(&mut self, element_index: usize, bit_position: u32) -> Result<()> {
        let len = self.words.len();
        let w = self
            .words
            .get_mut(element_index)
            .ok_or_else(|| Error::shape("flip", &[element_index], &[len]))?;
        *w = w.flip_bit(bit_position)?;
        Ok(())
    }
}

/// Which parameter buffer of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Weight,
    Bias,
    /// Activation parameters: per-neuron λ or a global GBReLU bound.
    Bound,
}

impl BufferKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BufferKind::Weight => "weight",
            BufferKind::Bias => "bias",
            BufferKind::Bound => "bound",
        }
    }
}

/// Identifies one fault-injectable buffer in a network. Orders by layer, then
/// weight < bias < bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId {
    pub layer: usize,
    pub kind: BufferKind,
}

impl BufferId {
    pub fn new(layer: usize, kind: BufferKind) -> Self {
        BufferId { layer, kind }
    }
}

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.as_str())
    }
}

impl FromStr for BufferId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let rest = s
            .strip_prefix("layer")
            .ok_or_else(|| format!("buffer id {s:?} must start with \"layer\""))?;
        let (idx, kind) = rest
            .split_once('.')
            .ok_or_else(|| format!("buffer id {s:?} has no kind suffix"))?;
        let layer = idx
            .parse()
            .map_err(|_| format!("bad layer index in buffer id {s:?}"))?;
        let kind = match kind {
            "weight" => BufferKind::Weight,
            "bias" => BufferKind::Bias,
            "bound" => BufferKind::Bound,
            other => return Err(format!("unknown buffer kind {other:?}")),
        };
        Ok(BufferId { layer, kind })
    }
}

impl Serialize for BufferId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BufferId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One flipped bit: which buffer, which word, which bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitFlipEvent {
    pub target_id: BufferId,
    pub element_index: usize,
    pub bit_position: u32,
}

impl fmt::Display for BitFlipEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{}",
            self.target_id, self.element_index, self.bit_position
        )
    }
}
