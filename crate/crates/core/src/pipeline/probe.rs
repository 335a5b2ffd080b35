//! Downstream recognition: a linear softmax classifier on encoder features,
//! trained either on frozen features or end-to-end with the encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::metrics::{compute_metrics, Metrics};
use crate::augment::Image;
use crate::config::Config;
use crate::data::{subsample_labels, LabeledDataset, Split, FOREGROUND};
use crate::math;
use crate::model::{stack, Encoder};
use crate::numerics::{cosine_lr, Layer, Sgd, Tensor};
use crate::rng::{stream, Tag};
use crate::{Error, Result};

const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Only the classifier is trained, on fixed features.
    Frozen,
    /// Encoder and classifier are trained together.
    EndToEnd,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(Mode::Frozen),
            "end-to-end" => Some(Mode::EndToEnd),
            _ => None,
        }
    }
}

/// Result of one downstream run.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub train: Metrics,
    pub val: Metrics,
    pub test: Metrics,
    pub classifier: Layer,
    /// The encoder after training (unchanged in frozen mode).
    pub encoder: Encoder,
}

/// Centre crops of `crop` pixels (patches larger than `crop` only).
fn crops(images: &[Image], crop: usize) -> Result<Vec<Image>> {
    images.iter().map(|p| p.center_crop(crop)).collect()
}

/// Global-average-pooled encoder features of the centre crops, `[n, s]`.
pub fn extract_features(encoder: &Encoder, images: &[Image], crop: usize, batch: usize) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::invalid("no images to encode"));
    }
    let batch = batch.max(1);
    let mut parts = Vec::new();
    for chunk in images.chunks(batch) {
        let c = crops(chunk, crop)?;
        let refs: Vec<&Image> = c.iter().collect();
        parts.push(encoder.infer(&stack(&refs)?)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Classifier with weights drawn from the probe stream of `seed`.
pub fn init_classifier(features: usize, seed: u64) -> Result<Layer> {
    let mut rng = stream(seed, 0, 0, Tag::Probe);
    let bound = 1.0 / math::sqrt(features as f64);
    let w = Tensor::from_fn([CLASSES, features], |_| rng.random_range(-bound..bound));
    let b = Tensor::from_fn([CLASSES], |_| rng.random_range(-bound..bound));
    Layer::linear("classifier", w, Some(b))
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let n = labels.len();
    if logits.shape() != [n, CLASSES] {
        return Err(Error::shape("softmax_cross_entropy", format!("{:?} for {n} labels", logits.shape())));
    }
    let mut grad = Tensor::zeros([n, CLASSES]);
    let mut loss = 0.0;
    for (i, (row, g)) in logits
        .data()
        .chunks_exact(CLASSES)
        .zip(grad.data_mut().chunks_exact_mut(CLASSES))
        .enumerate()
    {
        let lse = math::log_sum_exp(row);
        let y = labels[i] as usize;
        loss += lse - row[y];
        for c in 0..CLASSES {
            let p = math::exp(row[c] - lse);
            g[c] = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Foreground when its logit is strictly larger.
pub fn predict(logits: &Tensor) -> Vec<u8> {
    logits
        .data()
        .chunks_exact(CLASSES)
        .map(|r| u8::from(r[1] > r[0]) * FOREGROUND)
        .collect()
}

fn check_two_classes(split: &Split) -> Result<()> {
    let (bg, fg) = split.class_counts();
    if bg == 0 || fg == 0 {
        return Err(Error::Insufficient(format!(
            "training subset has a single class ({bg} background, {fg} foreground)"
        )));
    }
    Ok(())
}

fn split_metrics(encoder: &Encoder, classifier: &Layer, split: &Split, crop: usize, batch: usize) -> Result<Metrics> {
    let feats = extract_features(encoder, &split.patches, crop, batch)?;
    compute_metrics(&predict(&classifier.infer(&feats)?), &split.labels)
}

fn batch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, epoch as u64, 1, Tag::Probe));
    order
}

/// Frozen-feature linear probe on the `fraction` label subset.
pub fn linear_probe(encoder: &Encoder, dataset: &LabeledDataset, fraction: f64, cfg: &Config) -> Result<Evaluation> {
    let e = &cfg.eval;
    let data = subsample_labels(dataset, fraction, &mut stream(e.seed, 0, 0, Tag::Subsample))?;
    check_two_classes(&data.train)?;
    let crop = cfg.augment.crop_size;
    let eval_batch = e.probe_batch.max(1);
    let feats = extract_features(encoder, &data.train.patches, crop, eval_batch)?;
    let labels = &data.train.labels;
    let n = labels.len();
    let mut classifier = init_classifier(encoder.feature_dim(), e.seed)?;
    let mut sgd = Sgd::new(e.probe_momentum, e.probe_weight_decay)?;
    let per_epoch = n.div_ceil(e.probe_batch);
    let total = e.probe_epochs * per_epoch;
    let d = encoder.feature_dim();
    for epoch in 0..e.probe_epochs {
        let order = batch_order(n, e.seed, epoch);
        for (b, chunk) in order.chunks(e.probe_batch).enumerate() {
            let mut x = Vec::with_capacity(chunk.len() * d);
            chunk.iter().for_each(|&i| x.extend_from_slice(feats.row(i)));
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = classifier.forward(&Tensor::new([chunk.len(), d], x)?)?;
            let (_, grad) = softmax_cross_entropy(&logits, &y)?;
            classifier.params_mut().iter_mut().for_each(|p| p.zero_grad());
            classifier.backward(&grad)?;
            sgd.step(classifier.params_mut().iter_mut(), cosine_lr(epoch * per_epoch + b, total, e.probe_lr)?)?;
        }
    }
    classifier.clear_cache();
    let train = compute_metrics(&predict(&classifier.infer(&feats)?), labels)?;
    Ok(Evaluation {
        train,
        val: split_metrics(encoder, &classifier, &data.val, crop, eval_batch)?,
        test: split_metrics(encoder, &classifier, &data.test, crop, eval_batch)?,
        classifier,
        encoder: encoder.clone(),
    })
}

/// End-to-end fine-tuning of encoder and classifier on the `fraction`
/// label subset.
pub fn finetune(encoder: &Encoder, dataset: &LabeledDataset, fraction: f64, cfg: &Config) -> Result<Evaluation> {
    let e = &cfg.eval;
    let data = subsample_labels(dataset, fraction, &mut stream(e.seed, 0, 0, Tag::Subsample))?;
    check_two_classes(&data.train)?;
    let crop = cfg.augment.crop_size;
    let inputs = crops(&data.train.patches, crop)?;
    let labels = &data.train.labels;
    let n = labels.len();
    let mut encoder = encoder.clone();
    let mut classifier = init_classifier(encoder.feature_dim(), e.seed)?;
    let mut sgd = Sgd::new(cfg.numerics.sgd_momentum, cfg.numerics.weight_decay)?;
    let batch = e.finetune_batch.max(1);
    let per_epoch = n.div_ceil(batch);
    let total = e.finetune_epochs * per_epoch;
    for epoch in 0..e.finetune_epochs {
        let order = batch_order(n, e.seed, epoch);
        for (b, chunk) in order.chunks(batch).enumerate() {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &inputs[i]).collect();
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let z = encoder.forward(&stack(&imgs)?)?;
            let logits = classifier.forward(&z)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("fine-tuning loss {loss}"),
                });
            }
            encoder.zero_grad();
            classifier.params_mut().iter_mut().for_each(|p| p.zero_grad());
            let dz = classifier.backward(&grad)?;
            encoder.backward_params(&dz)?;
            let lr = cosine_lr(epoch * per_epoch + b, total, e.finetune_lr)?;
            sgd.step(encoder.params_mut().chain(classifier.params_mut().iter_mut()), lr)?;
        }
    }
    encoder.clear_cache();
    encoder.zero_grad();
    classifier.clear_cache();
    let eval_batch = e.probe_batch.max(1);
    Ok(Evaluation {
        train: split_metrics(&encoder, &classifier, &data.train, crop, eval_batch)?,
        val: split_metrics(&encoder, &classifier, &data.val, crop, eval_batch)?,
        test: split_metrics(&encoder, &classifier, &data.test, crop, eval_batch)?,
        classifier,
        encoder,
    })
}

/// Runs the probe or fine-tuning protocol.
pub fn evaluate(encoder: &Encoder, dataset: &LabeledDataset, fraction: f64, mode: Mode, cfg: &Config) -> Result<Evaluation> {
    match mode {
        Mode::Frozen => linear_probe(encoder, dataset, fraction, cfg),
        Mode::EndToEnd => finetune(encoder, dataset, fraction, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    #[test]
    fn cross_entropy_gradient() {
        let labels = [0u8, 1, 1];
        let logits = [0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let err = finite_diff_check(
            |x| {
                let (l, g) = softmax_cross_entropy(&Tensor::new([3, 2], x.to_vec())?, &labels)?;
                Ok((l, g.into_data()))
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn prediction_ties_go_to_background() {
        let t = Tensor::new([3, 2], alloc::vec![1.0, 1.0, 0.0, 2.0, 3.0, -1.0]).unwrap();
        assert_eq!(predict(&t), [0, 1, 0]);
    }
}
