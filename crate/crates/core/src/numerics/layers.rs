//! Layers with explicit forward/backward passes.
//!
//! Image activations are `[batch, channels, height, width]`; vector
//! activations are `[batch, features]`. `forward` keeps whatever `backward`
//! needs; `infer` runs the same arithmetic without keeping anything.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::gemm;
use super::Tensor;
use crate::{Error, Result};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 kernel, stride 1, zero padding 1.
    Conv2d { in_ch: usize, out_ch: usize, bias: bool },
    Relu,
    MaxPool2x2,
    GlobalAvgPool,
    Linear { inputs: usize, outputs: usize, bias: bool },
}

impl LayerKind {
    fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::Relu => "Relu",
            LayerKind::MaxPool2x2 => "MaxPool2x2",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Linear { .. } => "Linear",
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Conv { input: Vec<f64>, in_shape: [usize; 4] },
    Relu { input: Vec<f64>, shape: Vec<usize> },
    Pool { argmax: Vec<usize>, in_shape: [usize; 4] },
    Gap { in_shape: [usize; 4] },
    Linear { input: Tensor },
}

#[derive(Debug, Clone)]
pub struct Layer {
    kind: LayerKind,
    params: Vec<Param>,
    cache: Option<Cache>,
}

const K3: usize = 9;

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected rank-4 input, got {:?}", t.shape()))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, f] => Ok([n, f]),
        _ => Err(Error::shape(op, format!("expected rank-2 input, got {:?}", t.shape()))),
    }
}

impl Layer {
    /// Convolution from a `[out, in, 3, 3]` weight and optional `[out]` bias.
    pub fn conv2d(name: &str, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let [out_ch, in_ch, kh, kw] = dims4("Layer::conv2d", &weight)?;
        if kh != 3 || kw != 3 {
            return Err(Error::shape("Layer::conv2d", "kernel must be 3x3"));
        }
        let mut params = vec![Param::new(format!("{name}.weight"), weight)];
        if let Some(b) = &bias {
            if b.shape() != [out_ch] {
                return Err(Error::shape("Layer::conv2d", format!("bias shape {:?}", b.shape())));
            }
        }
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            params.push(Param::new(format!("{name}.bias"), b));
        }
        Ok(Layer {
            kind: LayerKind::Conv2d {
                in_ch,
                out_ch,
                bias: has_bias,
            },
            params,
            cache: None,
        })
    }

    /// Affine map from an `[out, in]` weight and optional `[out]` bias.
    pub fn linear(name: &str, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let [outputs, inputs] = dims2("Layer::linear", &weight)?;
        if let Some(b) = &bias {
            if b.shape() != [outputs] {
                return Err(Error::shape("Layer::linear", format!("bias shape {:?}", b.shape())));
            }
        }
        let has_bias = bias.is_some();
        let mut params = vec![Param::new(format!("{name}.weight"), weight)];
        if let Some(b) = bias {
            params.push(Param::new(format!("{name}.bias"), b));
        }
        Ok(Layer {
            kind: LayerKind::Linear {
                inputs,
                outputs,
                bias: has_bias,
            },
            params,
            cache: None,
        })
    }

    pub fn relu() -> Self {
        Self::stateless(LayerKind::Relu)
    }

    pub fn max_pool() -> Self {
        Self::stateless(LayerKind::MaxPool2x2)
    }

    pub fn global_avg_pool() -> Self {
        Self::stateless(LayerKind::GlobalAvgPool)
    }

    fn stateless(kind: LayerKind) -> Self {
        Layer {
            kind,
            params: Vec::new(),
            cache: None,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Forward pass that remembers what `backward` needs.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.run(input, true)?;
        self.cache = cache;
        Ok(out)
    }

    /// Forward pass without touching the backward cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.run(input, false)?.0)
    }

    fn run(&self, input: &Tensor, keep: bool) -> Result<(Tensor, Option<Cache>)> {
        match self.kind {
            LayerKind::Conv2d { in_ch, out_ch, bias } => {
                let op = "Conv2d::forward";
                let [n, c, h, w] = dims4(op, input)?;
                if c != in_ch {
                    return Err(Error::shape(op, format!("expected {in_ch} channels, got {c}")));
                }
                let hw = h * w;
                let k = in_ch * K3;
                let per = chunk_len(n, hw);
                let mut cols = vec![0.0; k * per * hw];
                let mut tmp = vec![0.0; out_ch * per * hw];
                let weight = self.params[0].value.data();
                let mut out = vec![0.0; n * out_ch * hw];
                for s0 in (0..n).step_by(per) {
                    let m = per.min(n - s0);
                    let ld = m * hw;
                    for j in 0..m {
                        let s = s0 + j;
                        im2col(&input.data()[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols[j * hw..], ld);
                    }
                    gemm(out_ch, k, ld, weight, (k, 1), &cols, (ld, 1), 0.0, &mut tmp, (ld, 1));
                    for j in 0..m {
                        let y = &mut out[(s0 + j) * out_ch * hw..(s0 + j + 1) * out_ch * hw];
                        for (o, row) in y.chunks_exact_mut(hw).enumerate() {
                            let src = &tmp[o * ld + j * hw..o * ld + (j + 1) * hw];
                            if bias {
                                let b = self.params[1].value.data()[o];
                                row.iter_mut().zip(src).for_each(|(d, v)| *d = v + b);
                            } else {
                                row.copy_from_slice(src);
                            }
                        }
                    }
                }
                let out = Tensor::new([n, out_ch, h, w], out)?;
                let cache = keep.then(|| Cache::Conv {
                    input: input.data().to_vec(),
                    in_shape: [n, c, h, w],
                });
                Ok((out, cache))
            }
            LayerKind::Relu => {
                let out = Tensor::from_fn(input.shape().to_vec(), |i| input.data()[i].max(0.0));
                let cache = keep.then(|| Cache::Relu {
                    input: input.data().to_vec(),
                    shape: input.shape().to_vec(),
                });
                Ok((out, cache))
            }
            LayerKind::MaxPool2x2 => {
                let op = "MaxPool2x2::forward";
                let [n, c, h, w] = dims4(op, input)?;
                if h < 2 || w < 2 {
                    return Err(Error::shape(op, format!("spatial size {h}x{w} below 2x2")));
                }
                let (oh, ow) = (h / 2, w / 2);
                let src = input.data();
                let mut out = Vec::with_capacity(n * c * oh * ow);
                let mut argmax = Vec::with_capacity(if keep { n * c * oh * ow } else { 0 });
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut best = base + 2 * y * w + 2 * x;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * y + dy) * w + 2 * x + dx;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                            out.push(src[best]);
                            if keep {
                                argmax.push(best);
                            }
                        }
                    }
                }
                let out = Tensor::new([n, c, oh, ow], out)?;
                let cache = keep.then(|| Cache::Pool {
                    argmax,
                    in_shape: [n, c, h, w],
                });
                Ok((out, cache))
            }
            LayerKind::GlobalAvgPool => {
                let [n, c, h, w] = dims4("GlobalAvgPool::forward", input)?;
                let hw = h * w;
                let out: Vec<f64> = input
                    .data()
                    .chunks_exact(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect();
                let out = Tensor::new([n, c], out)?;
                Ok((out, keep.then_some(Cache::Gap { in_shape: [n, c, h, w] })))
            }
            LayerKind::Linear {
                inputs,
                outputs,
                bias,
            } => {
                let op = "Linear::forward";
                let [n, f] = dims2(op, input)?;
                if f != inputs {
                    return Err(Error::shape(op, format!("expected {inputs} features, got {f}")));
                }
                let mut out = vec![0.0; n * outputs];
                if bias {
                    let b = self.params[1].value.data();
                    for row in out.chunks_exact_mut(outputs) {
                        row.copy_from_slice(b);
                    }
                }
                gemm(
                    n,
                    inputs,
                    outputs,
                    input.data(),
                    (inputs, 1),
                    self.params[0].value.data(),
                    (1, inputs),
                    if bias { 1.0 } else { 0.0 },
                    &mut out,
                    (outputs, 1),
                );
                let out = Tensor::new([n, outputs], out)?;
                Ok((out, keep.then(|| Cache::Linear { input: input.clone() })))
            }
        }
    }

    /// Gradient w.r.t. the input of the last `forward`; parameter gradients
    /// are accumulated into each `Param::grad`.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        self.backward_inner(grad_out, true)
    }

    /// Accumulates parameter gradients only; the input gradient is skipped
    /// where that saves work.
    pub fn backward_params(&mut self, grad_out: &Tensor) -> Result<()> {
        self.backward_inner(grad_out, false).map(drop)
    }

    fn backward_inner(&mut self, grad_out: &Tensor, need_input: bool) -> Result<Tensor> {
        let label = self.kind.label();
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache(label))?;
        match (self.kind, cache) {
            (LayerKind::Conv2d { in_ch, out_ch, bias }, Cache::Conv { input, in_shape }) => {
                let [n, c, h, w] = *in_shape;
                let hw = h * w;
                let k = in_ch * K3;
                expect_shape(label, grad_out, &[n, out_ch, h, w])?;
                let g = grad_out.data();
                let (weight_part, bias_part) = self.params.split_at_mut(1);
                if bias {
                    let db = bias_part[0].grad.data_mut();
                    for s in 0..n {
                        for (o, row) in g[s * out_ch * hw..(s + 1) * out_ch * hw]
                            .chunks_exact(hw)
                            .enumerate()
                        {
                            db[o] += row.iter().sum::<f64>();
                        }
                    }
                }
                let weight = &weight_part[0].value;
                let dw = &mut weight_part[0].grad;
                let per = chunk_len(n, hw);
                let mut dx = vec![0.0; n * c * hw];
                let mut cols = vec![0.0; k * per * hw];
                let mut gc = vec![0.0; out_ch * per * hw];
                let mut dcols = vec![0.0; if need_input { k * per * hw } else { 0 }];
                for s0 in (0..n).step_by(per) {
                    let m = per.min(n - s0);
                    let ld = m * hw;
                    // Columns are recomputed rather than cached to keep memory per layer small.
                    for j in 0..m {
                        let s = s0 + j;
                        im2col(&input[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols[j * hw..], ld);
                        for o in 0..out_ch {
                            gc[o * ld + j * hw..o * ld + (j + 1) * hw]
                                .copy_from_slice(&g[(s * out_ch + o) * hw..(s * out_ch + o + 1) * hw]);
                        }
                    }
                    gemm(out_ch, ld, k, &gc, (ld, 1), &cols, (1, ld), 1.0, dw.data_mut(), (k, 1));
                    if need_input {
                        gemm(k, out_ch, ld, weight.data(), (1, k), &gc, (ld, 1), 0.0, &mut dcols, (ld, 1));
                        for j in 0..m {
                            let s = s0 + j;
                            col2im(&dcols[j * hw..], c, h, w, ld, &mut dx[s * c * hw..(s + 1) * c * hw]);
                        }
                    }
                }
                Tensor::new([n, c, h, w], dx)
            }
            (LayerKind::Relu, Cache::Relu { input, shape }) => {
                expect_shape(label, grad_out, shape)?;
                let data = grad_out
                    .data()
                    .iter()
                    .zip(input)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(shape.clone(), data)
            }
            (LayerKind::MaxPool2x2, Cache::Pool { argmax, in_shape }) => {
                let [n, c, h, w] = *in_shape;
                expect_shape(label, grad_out, &[n, c, h / 2, w / 2])?;
                let mut dx = vec![0.0; n * c * h * w];
                for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                    dx[idx] += g;
                }
                Tensor::new(in_shape.to_vec(), dx)
            }
            (LayerKind::GlobalAvgPool, Cache::Gap { in_shape }) => {
                let [n, c, h, w] = *in_shape;
                expect_shape(label, grad_out, &[n, c])?;
                let hw = h * w;
                let mut dx = Vec::with_capacity(n * c * hw);
                for &g in grad_out.data() {
                    let v = g / hw as f64;
                    dx.extend(core::iter::repeat_n(v, hw));
                }
                Tensor::new(in_shape.to_vec(), dx)
            }
            (
                LayerKind::Linear {
                    inputs,
                    outputs,
                    bias,
                },
                Cache::Linear { input },
            ) => {
                let n = input.shape()[0];
                expect_shape(label, grad_out, &[n, outputs])?;
                let g = grad_out.data();
                let (weight_part, bias_part) = self.params.split_at_mut(1);
                gemm(
                    outputs,
                    n,
                    inputs,
                    g,
                    (1, outputs),
                    input.data(),
                    (inputs, 1),
                    1.0,
                    weight_part[0].grad.data_mut(),
                    (inputs, 1),
                );
                if bias {
                    let db = bias_part[0].grad.data_mut();
                    for row in g.chunks_exact(outputs) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                let mut dx = vec![0.0; n * inputs];
                gemm(
                    n,
                    outputs,
                    inputs,
                    g,
                    (outputs, 1),
                    weight_part[0].value.data(),
                    (inputs, 1),
                    0.0,
                    &mut dx,
                    (inputs, 1),
                );
                Tensor::new([n, inputs], dx)
            }
            _ => unreachable!("cache variant always matches layer kind"),
        }
    }
}

fn expect_shape(label: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() == shape {
        Ok(())
    } else {
        Err(Error::shape(
            label,
            format!("gradient shape {:?}, expected {:?}", t.shape(), shape),
        ))
    }
}

/// Samples per convolution GEMM: enough spatial columns to amortize the
/// packing cost without a large unfold buffer.
fn chunk_len(n: usize, hw: usize) -> usize {
    (4096 / hw.max(1)).clamp(1, n.max(1))
}

/// Unfold one `[c, h, w]` image into `c·9` rows of `h·w` patch columns,
/// consecutive rows `ld` apart.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64], ld: usize) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 3 + ky) * 3 + kx) * ld..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `[c, h, w]`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, ld: usize, img: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 3 + ky) * 3 + kx) * ld..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut iter = self.layers.iter();
        let Some(first) = iter.next() else {
            return Ok(input.clone());
        };
        let mut x = first.infer(input)?;
        for layer in iter {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Like `backward` but without the gradient w.r.t. the network input.
    pub fn backward_params(&mut self, grad_out: &Tensor) -> Result<()> {
        let Some((first, rest)) = self.layers.split_first_mut() else {
            return Ok(());
        };
        let mut g = grad_out.clone();
        for layer in rest.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        first.backward_params(&g)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn([n, c, h, w], f)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let conv = Layer::conv2d(
            "c",
            Tensor::new([1, 1, 3, 3], k).unwrap(),
            Some(Tensor::zeros([1])),
        )
        .unwrap();
        let x = image(2, 1, 5, 4, |i| (i as f64 * 0.37).sin());
        let y = conv.infer(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut relu = Layer::relu();
        let y = relu
            .forward(&Tensor::new([1, 3], vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let mut relu = Layer::relu();
        relu.forward(&Tensor::new([1, 2], vec![-1.0, 2.0]).unwrap())
            .unwrap();
        let g = relu
            .backward(&Tensor::new([1, 2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn gap_backward_spreads_evenly() {
        let mut gap = Layer::global_avg_pool();
        gap.forward(&image(1, 2, 3, 4, |i| i as f64)).unwrap();
        let g = gap
            .backward(&Tensor::new([1, 2], vec![1.2, -2.4]).unwrap())
            .unwrap();
        assert!(g.data()[..12].iter().all(|&v| v == 1.2 / 12.0));
        assert!(g.data()[12..].iter().all(|&v| v == -2.4 / 12.0));
    }

    #[test]
    fn max_pool_picks_maximum() {
        let pool = Layer::max_pool();
        let x = Tensor::new([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 7.0]).unwrap();
        assert_eq!(pool.infer(&x).unwrap().data(), &[5.0, 8.0]);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut relu = Layer::relu();
        assert!(matches!(
            relu.backward(&Tensor::zeros([1, 1])),
            Err(Error::NoForwardCache("Relu"))
        ));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let lin = Layer::linear("l", Tensor::zeros([2, 3]), None).unwrap();
        let err = lin.infer(&Tensor::zeros([1, 4])).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "Linear::forward", .. }));
        let conv = Layer::conv2d("c", Tensor::zeros([2, 3, 3, 3]), None).unwrap();
        assert!(conv.infer(&Tensor::zeros([1, 2, 4, 4])).is_err());
        assert!(Layer::max_pool().infer(&Tensor::zeros([1, 1, 1, 4])).is_err());
    }

    #[test]
    fn infer_matches_forward_bitwise() {
        let mut conv = Layer::conv2d(
            "c",
            Tensor::from_fn([3, 2, 3, 3], |i| ((i * 7) % 11) as f64 * 0.1 - 0.5),
            Some(Tensor::from_fn([3], |i| i as f64)),
        )
        .unwrap();
        let x = image(2, 2, 6, 5, |i| ((i * 13) % 17) as f64 / 17.0);
        let a = conv.infer(&x).unwrap();
        let b = conv.forward(&x).unwrap();
        assert_eq!(a, b);
    }
}
