//! Run configuration. Every key has a default; the defaults describe the
//! desk-scale reference pipeline. Sections mirror the crate's modules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub numerics: NumericsConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub contrast: ContrastConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    /// Floating-point width of every computation. Only `f64` is implemented.
    pub precision: Precision,
    /// SGD momentum μ for pretraining and fine-tuning.
    pub sgd_momentum: f64,
    /// Additive weight decay for pretraining and fine-tuning.
    pub weight_decay: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        NumericsConfig {
            precision: Precision::F64,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// How the three views of one input are related.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewStrategy {
    /// Base + color augmentation drawn independently per view, no rotation.
    Independent,
    /// Color shared between the first view and the key view, rotation shared
    /// between the second view and the key view.
    Controlled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side of the square random crop (no resize).
    pub crop_size: usize,
    pub strategy: ViewStrategy,
    pub hflip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    /// Draw rotations from {0°, 90°, 180°, 270°} instead of {90°, 180°, 270°}.
    pub rotation_includes_identity: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 24,
            strategy: ViewStrategy::Controlled,
            hflip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            rotation_includes_identity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each conv → ReLU → max-pool block.
    pub widths: Vec<usize>,
    /// Shared hidden layer of the projection heads.
    pub hidden_dim: usize,
    /// Embedding dimension of both projection branches.
    pub embed_dim: usize,
    pub head_bias: bool,
    /// EMA coefficient of the key network.
    pub momentum: f64,
    /// Momentum-track the key head; otherwise it is copied from the query
    /// head at every update.
    pub momentum_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![8, 16, 32],
            hidden_dim: 128,
            embed_dim: 32,
            head_bias: true,
            momentum: 0.999,
            momentum_heads: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMeansMetric {
    /// Dot-product assignment, normalized-mean centroids.
    Spherical,
    /// Squared-distance assignment, plain-mean centroids.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub tau_q: f64,
    pub tau_g: f64,
    pub lambda: f64,
    /// Local clusters per batch (32 at full scale).
    pub clusters: usize,
    /// Compute the group branch at all. With `false` the group terms are
    /// reported as zero and k-means is skipped.
    pub cld_enabled: bool,
    pub kmeans_iters: usize,
    pub kmeans_metric: KMeansMetric,
    pub queue_size: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau_q: 0.2,
            tau_g: 0.4,
            lambda: 0.25,
            clusters: 8,
            cld_enabled: true,
            kmeans_iters: 10,
            kmeans_metric: KMeansMetric::Spherical,
            queue_size: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub mosaics: usize,
    pub mosaic_size: usize,
    /// Probability that a mosaic contains any animals.
    pub animal_mosaic_prob: f64,
    pub animals_min: usize,
    pub animals_max: usize,
    /// Fraction of a mosaic's animals rendered beneath a tree.
    pub beneath_tree_fraction: f64,
    pub trees: usize,
    pub grass_patches: usize,
    pub tire_marks: usize,
    pub dead_trunks: usize,
    pub animal_len_min: usize,
    pub animal_len_max: usize,
    pub pre_patch: usize,
    pub crops_per_image: usize,
    pub extra_crops_with_animals: usize,
    pub lt_bg_patch: usize,
    pub lt_fg_patch: usize,
    /// Background patches per foreground patch in the training split.
    pub bg_per_fg: usize,
    pub split_train: usize,
    pub split_val: usize,
    pub split_test: usize,
    /// Largest offset of an animal box centre from its foreground patch centre.
    pub fg_jitter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            mosaics: 90,
            mosaic_size: 256,
            animal_mosaic_prob: 0.5,
            animals_min: 3,
            animals_max: 9,
            beneath_tree_fraction: 0.15,
            trees: 7,
            grass_patches: 6,
            tire_marks: 1,
            dead_trunks: 5,
            animal_len_min: 4,
            animal_len_max: 12,
            pre_patch: 32,
            crops_per_image: 15,
            extra_crops_with_animals: 15,
            lt_bg_patch: 64,
            lt_fg_patch: 48,
            bg_per_fg: 18,
            split_train: 8,
            split_val: 1,
            split_test: 1,
            fg_jitter: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Length of the pretraining schedule.
    pub epochs: usize,
    /// Stop after this many epochs (0 = run the whole schedule). The
    /// learning-rate schedule always spans `epochs`, so a stopped run can be
    /// resumed into the identical trajectory.
    pub stop_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 100,
            stop_epoch: 0,
            batch_size: 64,
            lr: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub fraction: f64,
    /// Label fractions swept by the `eval` command.
    pub fractions: Vec<f64>,
    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_batch: usize,
    pub probe_momentum: f64,
    pub probe_weight_decay: f64,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            fraction: 1.0,
            fractions: vec![0.01, 0.1, 0.2, 1.0],
            probe_lr: 30.0,
            probe_epochs: 100,
            probe_batch: 256,
            probe_momentum: 0.9,
            probe_weight_decay: 0.0,
            finetune_lr: 0.01,
            finetune_epochs: 10,
            finetune_batch: 64,
        }
    }
}

/// Named model recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// MoCo only: no group branch weight, independent views.
    Mcc0,
    /// MoCo + cross-level group discrimination, independent views.
    Mcc1,
    /// MoCo + group discrimination + controlled color/rotation views.
    Mcc2,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mcc0" => Some(Preset::Mcc0),
            "mcc1" => Some(Preset::Mcc1),
            "mcc2" => Some(Preset::Mcc2),
            _ => None,
        }
    }

    pub fn apply(self, cfg: &mut Config) {
        match self {
            Preset::Mcc0 => {
                cfg.contrast.lambda = 0.0;
                cfg.augment.strategy = ViewStrategy::Independent;
            }
            Preset::Mcc1 => {
                cfg.contrast.lambda = 0.25;
                cfg.augment.strategy = ViewStrategy::Independent;
            }
            Preset::Mcc2 => {
                cfg.contrast.lambda = 0.25;
                cfg.augment.strategy = ViewStrategy::Controlled;
            }
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

fn probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be at least 1")))
    }
}

impl Config {
    /// Checks cross-field constraints that the type system does not.
    pub fn validate(&self) -> Result<()> {
        let n = &self.numerics;
        if !(0.0..1.0).contains(&n.sgd_momentum) {
            return Err(Error::invalid("numerics.sgd_momentum must lie in [0, 1)"));
        }
        if !(n.weight_decay >= 0.0) {
            return Err(Error::invalid("numerics.weight_decay must be non-negative"));
        }

        let a = &self.augment;
        nonzero("augment.crop_size", a.crop_size)?;
        for (name, p) in [
            ("augment.hflip_prob", a.hflip_prob),
            ("augment.blur_prob", a.blur_prob),
            ("augment.jitter_prob", a.jitter_prob),
            ("augment.grayscale_prob", a.grayscale_prob),
        ] {
            probability(name, p)?;
        }
        positive("augment.blur_sigma_min", a.blur_sigma_min)?;
        if a.blur_sigma_max < a.blur_sigma_min {
            return Err(Error::invalid("augment.blur_sigma_max below blur_sigma_min"));
        }
        for (name, s) in [
            ("augment.brightness", a.brightness),
            ("augment.contrast", a.contrast),
            ("augment.saturation", a.saturation),
        ] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..=0.5).contains(&a.hue) {
            return Err(Error::invalid("augment.hue must lie in [0, 0.5]"));
        }

        let m = &self.model;
        if m.widths.is_empty() || m.widths.contains(&0) {
            return Err(Error::invalid("model.widths must be non-empty and positive"));
        }
        if a.crop_size >> m.widths.len() == 0 {
            return Err(Error::invalid(format!(
                "augment.crop_size {} too small for {} pooling blocks",
                a.crop_size,
                m.widths.len()
            )));
        }
        nonzero("model.hidden_dim", m.hidden_dim)?;
        nonzero("model.embed_dim", m.embed_dim)?;
        probability("model.momentum", m.momentum)?;

        let c = &self.contrast;
        positive("contrast.tau_q", c.tau_q)?;
        positive("contrast.tau_g", c.tau_g)?;
        if !(c.lambda >= 0.0) || !c.lambda.is_finite() {
            return Err(Error::invalid("contrast.lambda must be non-negative"));
        }
        nonzero("contrast.clusters", c.clusters)?;
        nonzero("contrast.kmeans_iters", c.kmeans_iters)?;
        nonzero("contrast.queue_size", c.queue_size)?;

        let d = &self.data;
        nonzero("data.mosaics", d.mosaics)?;
        probability("data.animal_mosaic_prob", d.animal_mosaic_prob)?;
        probability("data.beneath_tree_fraction", d.beneath_tree_fraction)?;
        if d.animals_max < d.animals_min {
            return Err(Error::invalid("data.animals_max below data.animals_min"));
        }
        if d.animal_len_min < 2 || d.animal_len_max < d.animal_len_min {
            return Err(Error::invalid("data.animal_len_min/max must satisfy 2 <= min <= max"));
        }
        for (name, p) in [
            ("data.pre_patch", d.pre_patch),
            ("data.lt_bg_patch", d.lt_bg_patch),
            ("data.lt_fg_patch", d.lt_fg_patch),
        ] {
            nonzero(name, p)?;
            if p > d.mosaic_size {
                return Err(Error::invalid(format!("{name} exceeds data.mosaic_size")));
            }
        }
        if d.lt_fg_patch < d.animal_len_max + 2 * d.fg_jitter {
            return Err(Error::invalid(
                "data.lt_fg_patch must fit the largest animal plus twice fg_jitter",
            ));
        }
        if d.split_train + d.split_val + d.split_test == 0 {
            return Err(Error::invalid("data split ratios are all zero"));
        }

        let t = &self.train;
        nonzero("train.epochs", t.epochs)?;
        nonzero("train.batch_size", t.batch_size)?;
        if t.stop_epoch > t.epochs {
            return Err(Error::invalid("train.stop_epoch beyond train.epochs"));
        }
        if c.cld_enabled && t.batch_size < c.clusters {
            return Err(Error::invalid(format!(
                "train.batch_size {} smaller than contrast.clusters {}",
                t.batch_size, c.clusters
            )));
        }
        positive("train.lr", t.lr)?;

        let e = &self.eval;
        if !(e.fraction > 0.0 && e.fraction <= 1.0) {
            return Err(Error::invalid("eval.fraction must lie in (0, 1]"));
        }
        if e.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::invalid("eval.fractions must lie in (0, 1]"));
        }
        if !(e.probe_lr >= 0.0) || !(e.finetune_lr >= 0.0) {
            return Err(Error::invalid("eval learning rates must be non-negative"));
        }
        nonzero("eval.probe_epochs", e.probe_epochs)?;
        nonzero("eval.probe_batch", e.probe_batch)?;
        nonzero("eval.finetune_epochs", e.finetune_epochs)?;
        nonzero("eval.finetune_batch", e.finetune_batch)?;
        if !(0.0..1.0).contains(&e.probe_momentum) {
            return Err(Error::invalid("eval.probe_momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Epoch at which pretraining stops.
    pub fn stop_epoch(&self) -> usize {
        if self.train.stop_epoch == 0 {
            self.train.epochs
        } else {
            self.train.stop_epoch
        }
    }
}
