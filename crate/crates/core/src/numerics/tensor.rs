//! Dense row-major tensors of `f64` and the handful of kernels the network
//! layers are built from.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return Err(Error::shape("index", index, &self.shape));
        }
        Ok(index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Tensor> {
        let outer = *self.shape.first().unwrap_or(&0);
        if start + count > outer {
            return Err(Error::shape("slice", &[start, count], &self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..(start + count) * inner].to_vec(),
        })
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Elementwise sum of equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape("add", &a.shape, &b.shape));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Output extent of a convolution or pooling window along one axis.
pub fn window_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    /// Input row/column hit by output coordinate `o` and kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Range of output columns whose input column for tap `kx` is in bounds.
    #[inline]
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let mut lo = 0;
        while lo < self.out_w && self.source(lo, kx, self.in_w).is_none() {
            lo += 1;
        }
        let mut hi = self.out_w;
        while hi > lo && self.source(hi - 1, kx, self.in_w).is_none() {
            hi -= 1;
        }
        lo..hi
    }
}

/// Single-sample convolution, accumulating into `out` (length `output_len`).
pub fn conv2d_sample(geo: &ConvGeometry, input: &[f64], kernels: &[f64], out: &mut [f64]) {
    let (ih, iw) = (geo.in_h, geo.in_w);
    let (oh, ow) = (geo.out_h, geo.out_w);
    let (kh, kw) = (geo.kernel_h, geo.kernel_w);
    for o in 0..geo.out_channels {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..geo.in_channels {
            let in_plane = &input[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let w = kernels[((o * geo.in_channels + c) * kh + ky) * kw + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let cols = geo.valid_cols(kx);
                    for oy in 0..oh {
                        let Some(iy) = geo.source(oy, ky, ih) else {
                            continue;
                        };
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        for ox in cols.clone() {
                            let ix = ox * geo.stride + kx - geo.padding;
                            out_row[ox] += w * in_row[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Vector-Jacobian products of [`conv2d_sample`]: accumulates into the input
/// gradient (if given) and the kernel gradient (if given).
pub fn conv2d_sample_backward(
    geo: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernels: Option<&mut [f64]>,
) {
    let (ih, iw) = (geo.in_h, geo.in_w);
    let (oh, ow) = (geo.out_h, geo.out_w);
    let (kh, kw) = (geo.kernel_h, geo.kernel_w);
    for o in 0..geo.out_channels {
        let g_plane = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..geo.in_channels {
            let in_off = c * ih * iw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * geo.in_channels + c) * kh + ky) * kw + kx;
                    let w = kernels[widx];
                    let cols = geo.valid_cols(kx);
                    let mut gw = 0.0;
                    for oy in 0..oh {
                        let Some(iy) = geo.source(oy, ky, ih) else {
                            continue;
                        };
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        let row_off = in_off + iy * iw;
                        for ox in cols.clone() {
                            let ix = ox * geo.stride + kx - geo.padding;
                            let g = g_row[ox];
                            gw += g * input[row_off + ix];
                            if let Some(gi) = grad_input.as_deref_mut() {
                                gi[row_off + ix] += w * g;
                            }
                        }
                    }
                    if let Some(gk) = grad_kernels.as_deref_mut() {
                        gk[widx] += gw;
                    }
                }
            }
        }
    }
}

/// `input [n, c, h, w]`, `kernels [o, c, kh, kw]` -> `[n, o, h', w']`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (is, ks) = (&input.shape, &kernels.shape);
    if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] {
        return Err(Error::shape("conv2d", is, ks));
    }
    let out_h = window_extent(is[2], ks[2], stride, padding);
    let out_w = window_extent(is[3], ks[3], stride, padding);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::shape("conv2d", is, ks));
    };
    let geo = ConvGeometry {
        in_channels: is[1],
        in_h: is[2],
        in_w: is[3],
        out_channels: ks[0],
        kernel_h: ks[2],
        kernel_w: ks[3],
        stride,
        padding,
        out_h,
        out_w,
    };
    let n = is[0];
    let mut out = vec![0.0; n * geo.output_len()];
    for (sample, dst) in input
        .data
        .chunks_exact(geo.input_len().max(1))
        .zip(out.chunks_exact_mut(geo.output_len().max(1)))
        .take(n)
    {
        conv2d_sample(&geo, sample, &kernels.data, dst);
    }
    Tensor::new(vec![n, geo.out_channels, out_h, out_w], out)
}

/// Max pooling over one `[c, h, w]` sample without padding. Writes the flat
/// input index of each maximum into `argmax` (first index wins on ties).
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_sample(
    input: &[f64],
    channels: usize,
    in_h: usize,
    in_w: usize,
    window: usize,
    stride: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let out_h = (in_h - window) / stride + 1;
    let out_w = (in_w - window) / stride + 1;
    for c in 0..channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..window {
                    let row = c * in_h * in_w + (oy * stride + dy) * in_w + ox * stride;
                    for dx in 0..window {
                        let v = input[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                let o = (c * out_h + oy) * out_w + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// `input [n, c, h, w]` -> `[n, c, h', w']`.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let is = &input.shape;
    if is.len() != 4 || window == 0 {
        return Err(Error::shape("maxpool2d", is, &[window, stride]));
    }
    let (Some(oh), Some(ow)) = (
        window_extent(is[2], window, stride, 0),
        window_extent(is[3], window, stride, 0),
    ) else {
        return Err(Error::shape("maxpool2d", is, &[window, stride]));
    };
    let (n, c) = (is[0], is[1]);
    let in_len = c * is[2] * is[3];
    let out_len = c * oh * ow;
    let mut out = vec![0.0; n * out_len];
    let mut argmax = vec![0; out_len];
    for s in 0..n {
        maxpool2d_sample(
            &input.data[s * in_len..(s + 1) * in_len],
            c,
            is[2],
            is[3],
            window,
            stride,
            &mut out[s * out_len..(s + 1) * out_len],
            &mut argmax,
        );
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
                }
            }
        }
        out
    }

    fn naive_conv(input: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
        let (o, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Vec::new();
        for s in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * stride + dy) as isize - pad as isize;
                                    let ix = (x * stride + dx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.get(&[s, ic, iy as usize, ix as usize]).unwrap()
                                        * k.get(&[oc, ic, dy, dx]).unwrap();
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    fn assert_rel_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.get(&[1, 2, 3]).unwrap(), 23.0);
        assert_eq!(t.get(&[0, 1, 0]).unwrap(), 4.0);
        assert!(t.get(&[2, 0, 0]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn additive_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 2, 3], &mut rng);
        assert_eq!(add(&x, &Tensor::zeros_like(&x)).unwrap(), x);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let ones = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&ones, &ones, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(add(&a, &b).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), 1, 0).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), 1, 0).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.random_range(1..=32),
                rng.random_range(1..=32),
                rng.random_range(1..=32),
            );
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert_rel_close(matmul(&a, &b).unwrap().data(), &naive_matmul(&a, &b), 1e-10);
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let c = rng.random_range(1..=4);
            let o = rng.random_range(1..=4);
            let k = rng.random_range(1..=5);
            let h = rng.random_range(k..=32);
            let w = rng.random_range(k..=32);
            let stride = rng.random_range(1..=3);
            let pad = rng.random_range(0..=2);
            let input = random(&[2, c, h, w], &mut rng);
            let kern = random(&[o, c, k, k], &mut rng);
            let out = conv2d(&input, &kern, stride, pad).unwrap();
            assert_eq!(out.shape()[2], (h + 2 * pad - k) / stride + 1);
            assert_rel_close(out.data(), &naive_conv(&input, &kern, stride, pad), 1e-10);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geo = ConvGeometry {
            in_channels: 2,
            in_h: 5,
            in_w: 6,
            out_channels: 3,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            padding: 1,
            out_h: window_extent(5, 3, 2, 1).unwrap(),
            out_w: window_extent(6, 2, 2, 1).unwrap(),
        };
        let input: Vec<f64> = (0..geo.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kern: Vec<f64> = (0..3 * 2 * 3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..geo.output_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |inp: &[f64], k: &[f64]| {
            let mut out = vec![0.0; geo.output_len()];
            conv2d_sample(&geo, inp, k, &mut out);
            out.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut gi = vec![0.0; input.len()];
        let mut gk = vec![0.0; kern.len()];
        conv2d_sample_backward(&geo, &input, &kern, &g, Some(&mut gi), Some(&mut gk));
        let h = 1e-6;
        for i in 0..input.len() {
            let mut p = input.clone();
            p[i] += h;
            let mut m = input.clone();
            m[i] -= h;
            let fd = (loss(&p, &kern) - loss(&m, &kern)) / (2.0 * h);
            assert!((fd - gi[i]).abs() < 1e-7, "input {i}: {fd} vs {}", gi[i]);
        }
        for i in 0..kern.len() {
            let mut p = kern.clone();
            p[i] += h;
            let mut m = kern.clone();
            m[i] -= h;
            let fd = (loss(&input, &p) - loss(&input, &m)) / (2.0 * h);
            assert!((fd - gk[i]).abs() < 1e-7, "kernel {i}: {fd} vs {}", gk[i]);
        }
    }

    #[test]
    fn maxpool_picks_window_max() {
        let t = Tensor::new(
            vec![1, 1, 4, 4],
            vec![
                1.0, 2.0, 0.0, 0.0, //
                3.0, 4.0, 0.0, 9.0, //
                0.0, 0.0, 5.0, 5.0, //
                -1.0, 0.0, 5.0, 5.0,
            ],
        )
        .unwrap();
        let out = maxpool2d(&t, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0, 9.0, 0.0, 5.0]);
    }
}
