//! Binary model format. All multi-byte values are little-endian.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "FTAC"
//! 4       4   u32     format version (1)
//! 8       4   u32     input rank r
//! 12      4*r u32     input extents
//! ..      4   u32     layer count L
//! ..      60*L        layer table, one fixed-size entry per layer:
//!           u32 kind            0 dense, 1 conv2d, 2 maxpool2d, 3 flatten
//!           u32 x 6 geometry    dense: inputs, outputs
//!                               conv2d: in_ch, out_ch, kh, kw, stride, padding
//!                               maxpool2d: window, stride (unused slots are 0)
//!           u32 activation      0 identity, 1 relu, 2 gbrelu, 3 fitrelu_naive, 4 fitrelu
//!           u32 mode            gbrelu: 0 squash_to_zero, 1 clamp_to_bound
//!           u32 granularity     0 element, 1 channel
//!           u64 slope           f64 bit pattern (0 unless fitrelu)
//!           u32 weight words, u32 bias words, u32 activation words
//! ..      parameter blocks, layer by layer: weight words, bias words,
//!         activation words, each word a raw Q15.16 u32
//! ```
//!
//! Because every parameter is one aligned 32-bit word, a fault event's
//! element index maps to a fixed file offset (see [`word_offset`]).

use std::path::Path;

use super::{bound_shape, Layer, LayerKind, Network};
use crate::activations::{Activation, GbMode, Granularity};
use crate::error::{Error, Result};
use crate::numerics::{BufferId, BufferKind, FixedPoint32, FixedTensor};

pub const MAGIC: [u8; 4] = *b"FTAC";
pub const VERSION: u32 = 1;
const ENTRY_BYTES: usize = 60;

fn kind_code(kind: &LayerKind) -> (u32, [u32; 6]) {
    match *kind {
        LayerKind::Dense { inputs, outputs } => (0, [inputs as u32, outputs as u32, 0, 0, 0, 0]),
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => (
            1,
            [
                in_channels as u32,
                out_channels as u32,
                kernel_h as u32,
                kernel_w as u32,
                stride as u32,
                padding as u32,
            ],
        ),
        LayerKind::MaxPool2d { window, stride } => (2, [window as u32, stride as u32, 0, 0, 0, 0]),
        LayerKind::Flatten => (3, [0; 6]),
    }
}

fn activation_code(a: &Activation) -> (u32, u32, u32, f64) {
    let gran = |g: &Granularity| match g {
        Granularity::Element => 0,
        Granularity::Channel => 1,
    };
    match a {
        Activation::Identity => (0, 0, 0, 0.0),
        Activation::Relu => (1, 0, 0, 0.0),
        Activation::GbRelu { mode, .. } => (
            2,
            match mode {
                GbMode::SquashToZero => 0,
                GbMode::ClampToBound => 1,
            },
            0,
            0.0,
        ),
        Activation::FitReluNaive { granularity, .. } => (3, 0, gran(granularity), 0.0),
        Activation::FitRelu {
            slope, granularity, ..
        } => (4, 0, gran(granularity), *slope),
    }
}

fn header_len(net: &Network) -> usize {
    16 + 4 * net.input_shape().len() + ENTRY_BYTES * net.layers().len()
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(net) + 4 * net.parameter_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.input_shape().len() as u32).to_le_bytes());
    for &d in net.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        let (code, geo) = kind_code(&l.kind);
        let (act, mode, gran, slope) = activation_code(&l.activation);
        for v in [code].iter().chain(&geo).chain(&[act, mode, gran]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&slope.to_bits().to_le_bytes());
        for n in [l.weights.len(), l.bias.len(), l.activation.bound_words().len()] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
    }
    for l in net.layers() {
        for kind in [BufferKind::Weight, BufferKind::Bias, BufferKind::Bound] {
            for w in l.buffer(kind) {
                out.extend_from_slice(&w.to_bits().to_le_bytes());
            }
        }
    }
    out
}

/// Byte offset of one parameter word inside the file written for `net`.
pub fn word_offset(net: &Network, id: BufferId, element_index: usize) -> Option<usize> {
    let mut off = header_len(net);
    for (i, l) in net.layers().iter().enumerate() {
        for kind in [BufferKind::Weight, BufferKind::Bias, BufferKind::Bound] {
            let n = l.buffer(kind).len();
            if i == id.layer && kind == id.kind {
                return (element_index < n).then_some(off + 4 * element_index);
            }
            off += 4 * n;
        }
    }
    None
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::TruncatedHeader(format!("missing {what}")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::TruncatedHeader(format!("missing {what}")))
    }

    fn words(&mut self, n: usize, layer: usize, block: &'static str) -> Result<Vec<FixedPoint32>> {
        let available = self.bytes.len() - self.pos;
        let bytes = self.take(4 * n).ok_or(Error::TruncatedBlock {
            layer,
            block,
            needed: 4 * n,
            available,
        })?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| FixedPoint32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

struct Entry {
    kind: LayerKind,
    act: u32,
    mode: u32,
    gran: u32,
    slope: f64,
    counts: [usize; 3],
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4)
        .ok_or_else(|| Error::TruncatedHeader("missing magic".into()))?
        .try_into()
        .unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let rank = r.u32("input rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::MalformedModel(format!("implausible input rank {rank}")));
    }
    let input_shape = (0..rank)
        .map(|_| r.u32("input extent").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u32("layer count")? as usize;
    if count.saturating_mul(ENTRY_BYTES) > bytes.len() {
        return Err(Error::TruncatedHeader(format!("layer table for {count} layers")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let code = r.u32("layer kind")?;
        let mut g = [0usize; 6];
        for v in g.iter_mut() {
            *v = r.u32("layer geometry")? as usize;
        }
        let kind = match code {
            0 => LayerKind::Dense {
                inputs: g[0],
                outputs: g[1],
            },
            1 => LayerKind::Conv2d {
                in_channels: g[0],
                out_channels: g[1],
                kernel_h: g[2],
                kernel_w: g[3],
                stride: g[4],
                padding: g[5],
            },
            2 => LayerKind::MaxPool2d {
                window: g[0],
                stride: g[1],
            },
            3 => LayerKind::Flatten,
            other => return Err(Error::MalformedModel(format!("unknown layer kind {other}"))),
        };
        let act = r.u32("activation kind")?;
        let mode = r.u32("activation mode")?;
        let gran = r.u32("granularity")?;
        let slope = f64::from_bits(r.u64("slope")?);
        let mut counts = [0usize; 3];
        for c in counts.iter_mut() {
            *c = r.u32("block size")? as usize;
        }
        entries.push(Entry {
            kind,
            act,
            mode,
            gran,
            slope,
            counts,
        });
    }

    // Shapes are needed to rebuild bound tensors, so walk them as we go.
    let mut shape = input_shape.clone();
    let mut layers = Vec::with_capacity(count);
    for (i, e) in entries.iter().enumerate() {
        let out_shape = e.kind.output_shape(&shape)?;
        let weights = r.words(e.counts[0], i, "weight")?;
        let bias = r.words(e.counts[1], i, "bias")?;
        let act_words = r.words(e.counts[2], i, "activation")?;
        let malformed = |what: String| Error::MalformedModel(format!("layer {i}: {what}"));
        let granularity = match e.gran {
            0 => Granularity::Element,
            1 => Granularity::Channel,
            g => return Err(malformed(format!("unknown granularity {g}"))),
        };
        let bounds = || FixedTensor::new(bound_shape(&out_shape, granularity), act_words.clone());
        let activation = match e.act {
            0 | 1 if !act_words.is_empty() => {
                return Err(malformed("activation without parameters has a parameter block".into()))
            }
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => {
                if act_words.len() != 1 {
                    return Err(malformed("gbrelu needs exactly one bound word".into()));
                }
                let mode = match e.mode {
                    0 => GbMode::SquashToZero,
                    1 => GbMode::ClampToBound,
                    m => return Err(malformed(format!("unknown gbrelu mode {m}"))),
                };
                Activation::GbRelu {
                    mode,
                    bound: act_words[0],
                }
            }
            3 => Activation::FitReluNaive {
                granularity,
                bounds: bounds()?,
            },
            4 => Activation::FitRelu {
                slope: e.slope,
                granularity,
                bounds: bounds()?,
            },
            a => return Err(malformed(format!("unknown activation kind {a}"))),
        };
        let (weights, bias) = if e.kind.has_parameters() {
            (
                FixedTensor::new(e.kind.weight_shape(), weights)?,
                FixedTensor::new(e.kind.bias_shape(), bias)?,
            )
        } else if weights.is_empty() && bias.is_empty() {
            (FixedTensor::empty(), FixedTensor::empty())
        } else {
            return Err(malformed("parameter-free layer has parameter blocks".into()));
        };
        layers.push(Layer {
            kind: e.kind,
            weights,
            bias,
            activation,
        });
        shape = out_shape;
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedModel(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Network::new(input_shape, layers)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
