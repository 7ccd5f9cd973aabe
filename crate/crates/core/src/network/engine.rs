//! Per-sample forward and reverse passes over decoded (f64) parameters.
//!
//! Each layer exposes a forward map and its vector-Jacobian product; the
//! network-level backward pass simply walks the layers in reverse.

use rayon::prelude::*;

use super::{argmax, spatial_extent, LayerKind, Network};
use crate::activations::{ActivationEval, ActivationKind};
use crate::numerics::{conv2d_sample, conv2d_sample_backward, maxpool2d_sample, ConvGeometry};

/// Samples per parallel work item in batched inference.
const PAR_CHUNK: usize = 32;

#[derive(Debug, Clone)]
struct DecodedLayer {
    kind: LayerKind,
    in_shape: Vec<usize>,
    in_len: usize,
    out_len: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    act: ActivationEval,
    spatial: usize,
    geo: Option<ConvGeometry>,
    bound_len: usize,
}

/// A network with every parameter decoded from fixed point once, so many
/// samples can be pushed through cheaply.
#[derive(Debug, Clone)]
pub struct DecodedNetwork {
    layers: Vec<DecodedLayer>,
    input_len: usize,
    output_len: usize,
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of layer `i`.
    pub acts: Vec<Vec<f64>>,
    /// Pre-activation values of parametric layers (empty otherwise).
    pub pres: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

impl SampleTrace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("non-empty")
    }
}

/// Parameter gradients laid out like the network's buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub bounds: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        let l = net.layers();
        Gradients {
            weights: l.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: l.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            bounds: l
                .iter()
                .map(|l| vec![0.0; l.activation.bound_words().len()])
                .collect(),
        }
    }

    fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.bounds.iter_mut())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let others = other
            .weights
            .iter()
            .chain(other.bias.iter())
            .chain(other.bounds.iter());
        for (a, b) in self.buffers_mut().zip(others) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.buffers_mut() {
            for x in buf.iter_mut() {
                *x *= factor;
            }
        }
    }
}

impl DecodedNetwork {
    pub fn new(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let in_shape = net.layer_input_shape(i).to_vec();
                let out_shape = net.layer_output_shape(i).to_vec();
                let geo = match l.kind {
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                        padding,
                    } => Some(ConvGeometry {
                        in_channels,
                        in_h: in_shape[1],
                        in_w: in_shape[2],
                        out_channels,
                        kernel_h,
                        kernel_w,
                        stride,
                        padding,
                        out_h: out_shape[1],
                        out_w: out_shape[2],
                    }),
                    _ => None,
                };
                DecodedLayer {
                    kind: l.kind,
                    in_len: in_shape.iter().product(),
                    out_len: out_shape.iter().product(),
                    spatial: spatial_extent(&out_shape),
                    in_shape,
                    weights: l.weights.decode().into_data(),
                    bias: l.bias.decode().into_data(),
                    act: l.activation.decode(),
                    geo,
                    bound_len: l.activation.bound_words().len(),
                }
            })
            .collect();
        DecodedNetwork {
            layers,
            input_len: net.input_shape().iter().product(),
            output_len: net.output_shape().iter().product(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    fn layer_forward(
        l: &DecodedLayer,
        input: &[f64],
        pre: &mut [f64],
        out: &mut [f64],
        argmax: &mut [usize],
    ) {
        match l.kind {
            LayerKind::Dense { inputs, outputs } => {
                for o in 0..outputs {
                    let row = &l.weights[o * inputs..(o + 1) * inputs];
                    pre[o] = l.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
                }
                l.act.forward(pre, out, 1);
            }
            LayerKind::Conv2d { out_channels, .. } => {
                let geo = l.geo.as_ref().expect("conv geometry");
                let plane = geo.out_h * geo.out_w;
                for c in 0..out_channels {
                    pre[c * plane..(c + 1) * plane].fill(l.bias[c]);
                }
                conv2d_sample(geo, input, &l.weights, pre);
                l.act.forward(pre, out, l.spatial);
            }
            LayerKind::MaxPool2d { window, stride } => {
                let s = &l.in_shape;
                maxpool2d_sample(input, s[0], s[1], s[2], window, stride, out, argmax);
            }
            LayerKind::Flatten => out.copy_from_slice(input),
        }
    }

    /// Logits of one flat sample.
    pub fn forward_sample(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut pre = Vec::new();
        let mut argmax = Vec::new();
        for l in &self.layers {
            let mut out = vec![0.0; l.out_len];
            if l.kind.has_parameters() {
                pre.resize(l.out_len, 0.0);
            } else if matches!(l.kind, LayerKind::MaxPool2d { .. }) {
                argmax.resize(l.out_len, 0);
            }
            Self::layer_forward(l, &cur, &mut pre, &mut out, &mut argmax);
            cur = out;
        }
        cur
    }

    pub fn forward_traced(&self, input: &[f64]) -> SampleTrace {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut pres = Vec::with_capacity(n);
        let mut argmaxes = Vec::with_capacity(n);
        acts.push(input.to_vec());
        for l in &self.layers {
            let mut out = vec![0.0; l.out_len];
            let mut pre = if l.kind.has_parameters() {
                vec![0.0; l.out_len]
            } else {
                Vec::new()
            };
            let mut argmax = if matches!(l.kind, LayerKind::MaxPool2d { .. }) {
                vec![0; l.out_len]
            } else {
                Vec::new()
            };
            Self::layer_forward(l, acts.last().unwrap(), &mut pre, &mut out, &mut argmax);
            acts.push(out);
            pres.push(pre);
            argmaxes.push(argmax);
        }
        SampleTrace {
            acts,
            pres,
            argmax: argmaxes,
        }
    }

    /// Accumulates the gradients of `grad_logits · logits` into `grads`.
    /// `params` selects weight/bias gradients, `bounds` selects λ gradients.
    pub fn backward(
        &self,
        trace: &SampleTrace,
        grad_logits: &[f64],
        grads: &mut Gradients,
        params: bool,
        bounds: bool,
    ) {
        // Lowest layer that still needs a gradient; no need to go further down.
        let floor = if params {
            0
        } else {
            match self
                .layers
                .iter()
                .position(|l| l.act.kind() == ActivationKind::Fitrelu && l.bound_len > 0)
            {
                Some(i) => i,
                None => return,
            }
        };
        let mut g = grad_logits.to_vec();
        for i in (floor..self.layers.len()).rev() {
            let l = &self.layers[i];
            let input = &trace.acts[i];
            let need_input = i > floor;
            let mut gin = vec![0.0; if need_input { l.in_len } else { 0 }];
            match l.kind {
                LayerKind::Dense { inputs, outputs } => {
                    let mut gp = vec![0.0; outputs];
                    let gb = bounds.then(|| grads.bounds[i].as_mut_slice());
                    l.act.backward(&trace.pres[i], &g, &mut gp, gb, 1);
                    for o in 0..outputs {
                        let go = gp[o];
                        if go == 0.0 {
                            continue;
                        }
                        if params {
                            let gw = &mut grads.weights[i][o * inputs..(o + 1) * inputs];
                            for (w, x) in gw.iter_mut().zip(input) {
                                *w += go * x;
                            }
                            grads.bias[i][o] += go;
                        }
                        if need_input {
                            let row = &l.weights[o * inputs..(o + 1) * inputs];
                            for (gi, w) in gin.iter_mut().zip(row) {
                                *gi += go * w;
                            }
                        }
                    }
                }
                LayerKind::Conv2d { out_channels, .. } => {
                    let geo = l.geo.as_ref().expect("conv geometry");
                    let mut gp = vec![0.0; l.out_len];
                    let gb = bounds.then(|| grads.bounds[i].as_mut_slice());
                    l.act.backward(&trace.pres[i], &g, &mut gp, gb, l.spatial);
                    if params {
                        let plane = geo.out_h * geo.out_w;
                        for c in 0..out_channels {
                            grads.bias[i][c] += gp[c * plane..(c + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    conv2d_sample_backward(
                        geo,
                        input,
                        &l.weights,
                        &gp,
                        need_input.then_some(gin.as_mut_slice()),
                        params.then(|| grads.weights[i].as_mut_slice()),
                    );
                }
                LayerKind::MaxPool2d { .. } => {
                    if need_input {
                        for (o, &src) in trace.argmax[i].iter().enumerate() {
                            gin[src] += g[o];
                        }
                    }
                }
                LayerKind::Flatten => {
                    if need_input {
                        gin.copy_from_slice(&g);
                    }
                }
            }
            g = gin;
        }
    }

    /// Logits for `batch` consecutive samples in `data`.
    pub fn forward_batch(&self, data: &[f64], batch: usize) -> Vec<f64> {
        let (il, ol) = (self.input_len, self.output_len);
        let mut out = vec![0.0; batch * ol];
        out.par_chunks_mut(PAR_CHUNK * ol)
            .zip(data[..batch * il].par_chunks(PAR_CHUNK * il))
            .for_each(|(dst, src)| {
                for (d, s) in dst.chunks_exact_mut(ol).zip(src.chunks_exact(il)) {
                    d.copy_from_slice(&self.forward_sample(s));
                }
            });
        out
    }

    pub fn predict_batch(&self, data: &[f64], batch: usize) -> Vec<usize> {
        self.forward_batch(data, batch)
            .chunks_exact(self.output_len)
            .map(argmax)
            .collect()
    }
}
