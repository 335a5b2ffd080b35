//! Query and key networks.
//!
//! The query side is a convolutional encoder followed by projection heads
//! that share one hidden layer and end in two final layers: the instance
//! branch (MoCo queries) and the group branch (CLD embeddings). The key side
//! is a momentum-tracked copy of the encoder plus hidden and instance layers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{Image, CHANNELS};
use crate::config::ModelConfig;
use crate::math;
use crate::numerics::{Layer, Param, Sequential, Tensor};
use crate::rng::{stream, Tag};
use crate::{Error, Result};

/// Stacks equally sized images into a `[n, 3, h, w]` batch.
pub fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(
                "stack",
                format!("{}x{} image in a {}x{} batch", img.height(), img.width(), h, w),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new([images.len(), CHANNELS, h, w], data)
}

fn kaiming_conv<R: Rng>(rng: &mut R, out_ch: usize, in_ch: usize) -> Tensor {
    let std = math::sqrt(2.0 / (in_ch * 9) as f64);
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn([out_ch, in_ch, 3, 3], |_| normal.sample(rng))
}

fn uniform_linear<R: Rng>(rng: &mut R, name: &str, inputs: usize, outputs: usize, bias: bool) -> Result<Layer> {
    let bound = 1.0 / math::sqrt(inputs as f64);
    let weight = Tensor::from_fn([outputs, inputs], |_| rng.random_range(-bound..bound));
    let bias = bias.then(|| Tensor::from_fn([outputs], |_| rng.random_range(-bound..bound)));
    Layer::linear(name, weight, bias)
}

/// Conv → ReLU → max-pool blocks followed by global average pooling.
#[derive(Debug, Clone)]
pub struct Encoder {
    net: Sequential,
    feature_dim: usize,
}

impl Encoder {
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(3 * widths.len() + 1);
        let mut in_ch = CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            let weight = kaiming_conv(rng, w, in_ch);
            layers.push(Layer::conv2d(&format!("conv{i}"), weight, Some(Tensor::zeros([w])))?);
            layers.push(Layer::relu());
            layers.push(Layer::max_pool());
            in_ch = w;
        }
        layers.push(Layer::global_avg_pool());
        Ok(Encoder {
            net: Sequential::new(layers),
            feature_dim: in_ch,
        })
    }

    /// Wraps hand-built layers; the last layer must produce `[n, feature_dim]`.
    pub fn from_layers(layers: Vec<Layer>, feature_dim: usize) -> Self {
        Encoder {
            net: Sequential::new(layers),
            feature_dim,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        self.net.layers()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.net.forward(batch)
    }

    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.net.infer(batch)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.net.backward(grad)
    }

    /// Parameter gradients only; the image gradient is never formed.
    pub fn backward_params(&mut self, grad: &Tensor) -> Result<()> {
        self.net.backward_params(grad)
    }

    /// Features `[n, s]` for a list of images, without backward caches.
    pub fn encode(&self, images: &[&Image]) -> Result<Tensor> {
        self.infer(&stack(images)?)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.net.params_mut()
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    pub fn clear_cache(&mut self) {
        self.net.clear_cache();
    }
}

/// Divides each row by its L2 norm. Returns the normalized rows and the norms.
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let [n, d] = match *x.shape() {
        [n, d] => [n, d],
        _ => return Err(Error::shape("l2_normalize_rows", format!("{:?}", x.shape()))),
    };
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(n);
    for (i, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let norm = math::norm(row);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm(i));
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward of [`l2_normalize_rows`]: `dx = (dy − y·(y·dy)) / ‖x‖`.
pub fn l2_normalize_backward(y: &Tensor, norms: &[f64], dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::shape(
            "l2_normalize_backward",
            format!("{:?} vs {:?}", y.shape(), dy.shape()),
        ));
    }
    let d = y.shape()[1];
    let mut dx = dy.clone();
    for ((row, yrow), &norm) in dx.data_mut().chunks_exact_mut(d).zip(y.data().chunks_exact(d)).zip(norms) {
        let proj = math::dot(yrow, row);
        for (g, yv) in row.iter_mut().zip(yrow) {
            *g = (*g - yv * proj) / norm;
        }
    }
    Ok(dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Instance,
    Group,
}

#[derive(Debug, Clone)]
struct HeadCache {
    q: Tensor,
    q_norms: Vec<f64>,
    g: Option<(Tensor, Vec<f64>)>,
}

/// Shared hidden layer with separate instance and group output layers.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    hidden: Layer,
    relu: Layer,
    instance: Layer,
    group: Layer,
    cache: Option<HeadCache>,
}

/// Unit embeddings from one training forward pass.
#[derive(Debug, Clone)]
pub struct Projections {
    pub instance: Tensor,
    /// Absent when the group branch was skipped.
    pub group: Option<Tensor>,
}

impl ProjectionHeads {
    pub fn new<R: Rng>(features: usize, hidden: usize, embed: usize, bias: bool, rng: &mut R) -> Result<Self> {
        Ok(ProjectionHeads {
            hidden: uniform_linear(rng, "hidden", features, hidden, bias)?,
            relu: Layer::relu(),
            instance: uniform_linear(rng, "instance", hidden, embed, bias)?,
            group: uniform_linear(rng, "group", hidden, embed, bias)?,
            cache: None,
        })
    }

    pub fn from_layers(hidden: Layer, instance: Layer, group: Layer) -> Self {
        ProjectionHeads {
            hidden,
            relu: Layer::relu(),
            instance,
            group,
            cache: None,
        }
    }

    /// Unit-norm embeddings of one branch, without caches.
    pub fn project(&self, z: &Tensor, branch: Branch) -> Result<Tensor> {
        let h = self.relu.infer(&self.hidden.infer(z)?)?;
        let out = match branch {
            Branch::Instance => self.instance.infer(&h)?,
            Branch::Group => self.group.infer(&h)?,
        };
        Ok(l2_normalize_rows(&out)?.0)
    }

    /// Training forward pass; the group branch is computed when `with_group`.
    pub fn forward(&mut self, z: &Tensor, with_group: bool) -> Result<Projections> {
        let h = self.relu.forward(&self.hidden.forward(z)?)?;
        let (q, q_norms) = l2_normalize_rows(&self.instance.forward(&h)?)?;
        let g = if with_group {
            Some(l2_normalize_rows(&self.group.forward(&h)?)?)
        } else {
            self.group.clear_cache();
            None
        };
        let out = Projections {
            instance: q.clone(),
            group: g.as_ref().map(|(t, _)| t.clone()),
        };
        self.cache = Some(HeadCache { q, q_norms, g });
        Ok(out)
    }

    /// Gradient w.r.t. the encoder features given gradients w.r.t. the unit
    /// embeddings of the last `forward`.
    pub fn backward(&mut self, dq: &Tensor, dg: Option<&Tensor>) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache("ProjectionHeads"))?;
        let dq_raw = l2_normalize_backward(&cache.q, &cache.q_norms, dq)?;
        let mut dh = self.instance.backward(&dq_raw)?;
        match (dg, &cache.g) {
            (Some(dg), Some((g, g_norms))) => {
                let dg_raw = l2_normalize_backward(g, g_norms, dg)?;
                let dh_g = self.group.backward(&dg_raw)?;
                for (a, b) in dh.data_mut().iter_mut().zip(dh_g.data()) {
                    *a += b;
                }
            }
            (None, _) => {}
            (Some(_), None) => return Err(Error::NoForwardCache("ProjectionHeads group branch")),
        }
        let dh = self.relu.backward(&dh)?;
        self.hidden.backward(&dh)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        [&self.hidden, &self.instance, &self.group]
            .into_iter()
            .flat_map(|l| l.params().iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        [&mut self.hidden, &mut self.instance, &mut self.group]
            .into_iter()
            .flat_map(|l| l.params_mut().iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }
}

/// Momentum copy of the encoder, the shared hidden layer and the instance
/// output layer. It never runs a backward pass.
#[derive(Debug, Clone)]
pub struct KeyNetwork {
    encoder: Encoder,
    hidden: Layer,
    relu: Layer,
    instance: Layer,
}

impl KeyNetwork {
    /// Initialized with the query side's parameters.
    pub fn copy_of(encoder: &Encoder, heads: &ProjectionHeads) -> Self {
        let mut encoder = encoder.clone();
        encoder.clear_cache();
        let mut hidden = heads.hidden.clone();
        let mut instance = heads.instance.clone();
        hidden.clear_cache();
        instance.clear_cache();
        for p in encoder.params_mut().chain(hidden.params_mut()).chain(instance.params_mut()) {
            p.zero_grad();
        }
        KeyNetwork {
            encoder,
            hidden,
            relu: Layer::relu(),
            instance,
        }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Unit-norm keys for a `[n, 3, h, w]` batch.
    pub fn keys(&self, batch: &Tensor) -> Result<Tensor> {
        let z = self.encoder.infer(batch)?;
        let h = self.relu.infer(&self.hidden.infer(&z)?)?;
        Ok(l2_normalize_rows(&self.instance.infer(&h)?)?.0)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.encoder
            .params()
            .chain(self.hidden.params())
            .chain(self.instance.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.encoder
            .params_mut()
            .chain(self.hidden.params_mut().iter_mut())
            .chain(self.instance.params_mut().iter_mut())
    }
}

/// `key ← m·key + (1−m)·query`, element-wise.
pub fn ema(key: &mut [f64], query: &[f64], m: f64) {
    for (k, q) in key.iter_mut().zip(query) {
        *k = m * *k + (1.0 - m) * q;
    }
}

/// EMA update of the key network towards the query encoder and heads. With
/// `track_heads == false` the key head is copied from the query head.
pub fn momentum_update(
    key: &mut KeyNetwork,
    encoder: &Encoder,
    heads: &ProjectionHeads,
    m: f64,
    track_heads: bool,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
    }
    let enc_count = encoder.params().count();
    let query: Vec<&Param> = encoder
        .params()
        .chain(heads.hidden.params())
        .chain(heads.instance.params())
        .collect();
    let keys: Vec<&mut Param> = key.params_mut().collect();
    if keys.len() != query.len() {
        return Err(Error::shape(
            "momentum_update",
            format!("{} key parameters vs {} query parameters", keys.len(), query.len()),
        ));
    }
    for (k, q) in keys.iter().zip(&query) {
        if k.value.shape() != q.value.shape() {
            return Err(Error::shape(
                "momentum_update",
                format!("{} {:?} vs {} {:?}", k.name, k.value.shape(), q.name, q.value.shape()),
            ));
        }
    }
    for (i, (k, q)) in keys.into_iter().zip(query).enumerate() {
        let coeff = if i < enc_count || track_heads { m } else { 0.0 };
        ema(k.value.data_mut(), q.value.data(), coeff);
    }
    Ok(())
}

/// Query encoder, projection heads and the key network.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub heads: ProjectionHeads,
    pub key: KeyNetwork,
}

impl Model {
    /// Randomly initialized query side; the key side starts as an exact copy.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0, 0, Tag::Init);
        let encoder = Encoder::new(&cfg.widths, &mut rng)?;
        let heads = ProjectionHeads::new(
            encoder.feature_dim(),
            cfg.hidden_dim,
            cfg.embed_dim,
            cfg.head_bias,
            &mut rng,
        )?;
        let key = KeyNetwork::copy_of(&encoder, &heads);
        Ok(Model { encoder, heads, key })
    }

    /// Trainable parameters in optimizer order.
    pub fn query_params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.encoder.params_mut().chain(self.heads.params_mut())
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.heads.zero_grad();
    }

    /// Every parameter tensor under a stable, unique name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let query = self
            .encoder
            .params()
            .map(|p| (format!("query.encoder.{}", p.name), &p.value));
        let heads = self
            .heads
            .params()
            .map(|p| (format!("query.heads.{}", p.name), &p.value));
        let key_enc = self
            .key
            .encoder
            .params()
            .map(|p| (format!("key.encoder.{}", p.name), &p.value));
        let key_head = self
            .key
            .hidden
            .params()
            .iter()
            .chain(self.key.instance.params())
            .map(|p| (format!("key.heads.{}", p.name), &p.value));
        query.chain(heads).chain(key_enc).chain(key_head).collect()
    }

    /// Mutable counterpart of [`Model::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for p in self.encoder.params_mut() {
            out.push((format!("query.encoder.{}", p.name), &mut p.value));
        }
        for p in self.heads.params_mut() {
            out.push((format!("query.heads.{}", p.name), &mut p.value));
        }
        for p in self.key.encoder.params_mut() {
            out.push((format!("key.encoder.{}", p.name), &mut p.value));
        }
        for p in self
            .key
            .hidden
            .params_mut()
            .iter_mut()
            .chain(self.key.instance.params_mut().iter_mut())
        {
            out.push((format!("key.heads.{}", p.name), &mut p.value));
        }
        out
    }

    /// Names of the trainable parameters, in optimizer order.
    pub fn query_param_names(&self) -> Vec<String> {
        self.encoder
            .params()
            .map(|p| format!("query.encoder.{}", p.name))
            .chain(self.heads.params().map(|p| format!("query.heads.{}", p.name)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            widths: alloc::vec![4, 6],
            hidden_dim: 10,
            embed_dim: 5,
            ..ModelConfig::default()
        }
    }

    fn noise_image(seed: u64, size: usize) -> Image {
        let mut rng = stream(seed, 0, 0, Tag::Views);
        Image::new(size, size, (0..3 * size * size).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn key_starts_as_exact_copy() {
        let m = Model::new(&test_cfg(), 3).unwrap();
        let q: Vec<&Param> = m.encoder.params().chain(m.heads.hidden.params()).chain(m.heads.instance.params()).collect();
        let k: Vec<&Param> = m.key.params().collect();
        assert_eq!(q.len(), k.len());
        for (a, b) in q.iter().zip(&k) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn duplicate_rows_encode_identically() {
        let m = Model::new(&test_cfg(), 1).unwrap();
        let img = noise_image(2, 8);
        let z = m.encoder.encode(&[&img, &img]).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn zero_network_gives_zero_features() {
        let mut rng = stream(0, 0, 0, Tag::Init);
        let mut enc = Encoder::new(&[3, 5], &mut rng).unwrap();
        enc.params_mut().for_each(|p| p.value.fill(0.0));
        let img = Image::filled(8, 8, [0.0; 3]);
        let z = enc.encode(&[&img]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projections_are_unit_norm() {
        let m = Model::new(&test_cfg(), 5).unwrap();
        let imgs: Vec<Image> = (0..4).map(|i| noise_image(i, 8)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let z = m.encoder.encode(&refs).unwrap();
        for branch in [Branch::Instance, Branch::Group] {
            let e = m.heads.project(&z, branch).unwrap();
            for i in 0..4 {
                assert!((math::norm(e.row(i)) - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn bias_free_heads_are_scale_invariant() {
        let mut rng = stream(4, 0, 0, Tag::Init);
        let heads = ProjectionHeads::new(6, 9, 4, false, &mut rng).unwrap();
        let z = Tensor::from_fn([3, 6], |i| ((i * 7) % 5) as f64 - 1.5);
        let z2 = Tensor::from_fn([3, 6], |i| 2.0 * z.data()[i]);
        for branch in [Branch::Instance, Branch::Group] {
            let a = heads.project(&z, branch).unwrap();
            let b = heads.project(&z2, branch).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let x = Tensor::new([2, 2], alloc::vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(l2_normalize_rows(&x).unwrap_err(), Error::ZeroNorm(1));
    }

    #[test]
    fn normalization_gradient() {
        let w = Tensor::from_fn([2, 4], |i| (i as f64 * 0.61).cos());
        let loss = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let t = Tensor::new([2, 4], x.to_vec())?;
            let (y, norms) = l2_normalize_rows(&t)?;
            let l = math::dot(y.data(), w.data());
            let g = l2_normalize_backward(&y, &norms, &w)?;
            Ok((l, g.into_data()))
        };
        let x0: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin() + 0.2).collect();
        assert!(finite_diff_check(loss, &x0, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn ema_endpoints_and_geometric_decay() {
        let mut k = [1.0, -2.0];
        ema(&mut k, &[5.0, 6.0], 1.0);
        assert_eq!(k, [1.0, -2.0]);
        ema(&mut k, &[5.0, 6.0], 0.0);
        assert_eq!(k, [5.0, 6.0]);

        let mut theta = [1.0];
        for _ in 0..1000 {
            ema(&mut theta, &[0.0], 0.999);
        }
        assert!((theta[0] - libm::pow(0.999, 1000.0)).abs() <= 1e-12);
    }

    #[test]
    fn momentum_update_endpoints() {
        let mut m = Model::new(&test_cfg(), 8).unwrap();
        m.encoder.params_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v += 1.0));
        let before: Vec<Tensor> = m.key.params().map(|p| p.value.clone()).collect();
        momentum_update(&mut m.key, &m.encoder, &m.heads, 1.0, true).unwrap();
        let after: Vec<Tensor> = m.key.params().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
        momentum_update(&mut m.key, &m.encoder, &m.heads, 0.0, true).unwrap();
        for (k, q) in m.key.encoder.params().zip(m.encoder.params()) {
            assert_eq!(k.value, q.value);
        }
    }

    #[test]
    fn momentum_update_rejects_mismatched_architectures() {
        let mut a = Model::new(&test_cfg(), 1).unwrap();
        let b = Model::new(
            &ModelConfig {
                widths: alloc::vec![4],
                ..test_cfg()
            },
            1,
        )
        .unwrap();
        assert!(momentum_update(&mut a.key, &b.encoder, &b.heads, 0.5, true).is_err());
    }
}
