use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::state::TrainState;
use crate::augment::{apply, make_controlled_views, make_independent_views, sample_params, Image, Policy};
use crate::config::{Config, ViewStrategy};
use crate::contrast::{total_loss, Embeddings, LossConfig};
use crate::model::{momentum_update, stack};
use crate::numerics::{cosine_lr, Tensor};
use crate::rng::{stream, Tag};
use crate::{Error, Result};

use crate::data::PatchSet;

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub lq1: f64,
    pub lq2: f64,
    pub lg1: f64,
    pub lg2: f64,
    pub lr: f64,
}

/// Mean total loss of every epoch present in `log`, in epoch order.
pub fn epoch_means(log: &[LossRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Whether the group branch contributes to training. A zero weight makes
/// the run identical to one without the branch.
pub fn group_branch_active(cfg: &Config) -> bool {
    cfg.contrast.cld_enabled && cfg.contrast.lambda != 0.0
}

fn key_policy(cfg: &Config) -> Policy {
    match cfg.augment.strategy {
        ViewStrategy::Controlled => Policy::ALL,
        ViewStrategy::Independent => Policy::BASE_COLOR,
    }
}

/// One pass of key encodings that fills the queue before the first step.
fn warm_up(state: &mut TrainState, cfg: &Config, patches: &PatchSet) -> Result<()> {
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut stream(state.seed, 0, 0, Tag::WarmUp));
    let policy = key_policy(cfg);
    for chunk in order.chunks(cfg.train.batch_size) {
        if state.queue.is_full() {
            break;
        }
        let views = chunk
            .iter()
            .map(|&i| {
                let img = &patches.patches[i];
                let mut rng = stream(state.seed, 0, i as u64, Tag::WarmUp);
                let p = sample_params(&mut rng, policy, &cfg.augment, img.height(), img.width())?;
                apply(img, &p)
            })
            .collect::<Result<Vec<Image>>>()?;
        let refs: Vec<&Image> = views.iter().collect();
        let keys = state.model.key.keys(&stack(&refs)?)?;
        state.queue.push(&keys)?;
    }
    Ok(())
}

/// Number of optimizer steps per epoch (the last incomplete batch is dropped).
pub fn batches_per_epoch(patches: usize, batch: usize) -> usize {
    patches / batch
}

/// Runs pretraining from `state` (or a fresh state) up to the configured
/// stop epoch, reporting every step to `observer`.
pub fn pretrain_observed(
    cfg: &Config,
    patches: &PatchSet,
    state: Option<TrainState>,
    mut observer: impl FnMut(&LossRecord),
) -> Result<(TrainState, Vec<LossRecord>)> {
    cfg.validate()?;
    let b = cfg.train.batch_size;
    let steps = batches_per_epoch(patches.len(), b);
    if steps == 0 {
        return Err(Error::Insufficient(format!(
            "{} patches cannot fill one batch of {b}",
            patches.len()
        )));
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg)?,
    };
    if state.epoch == 0 && state.queue.is_empty() {
        warm_up(&mut state, cfg, patches)?;
    }
    let loss_cfg = LossConfig {
        cld_enabled: group_branch_active(cfg),
        ..LossConfig::from(&cfg.contrast)
    };
    let total_steps = cfg.train.epochs * steps;
    let seed = state.seed;
    let mut log = Vec::new();

    for epoch in state.epoch..cfg.stop_epoch() {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut stream(seed, epoch as u64, 0, Tag::Shuffle));
        for (batch, chunk) in order.chunks_exact(b).enumerate() {
            let mut first = Vec::with_capacity(b);
            let mut second = Vec::with_capacity(b);
            let mut positive = Vec::with_capacity(b);
            for &i in chunk {
                let mut rng = stream(seed, epoch as u64, i as u64, Tag::Views);
                let v = match cfg.augment.strategy {
                    ViewStrategy::Controlled => make_controlled_views(&patches.patches[i], &mut rng, &cfg.augment)?,
                    ViewStrategy::Independent => make_independent_views(&patches.patches[i], &mut rng, &cfg.augment)?,
                };
                first.push(v.first);
                second.push(v.second);
                positive.push(v.positive);
            }
            let queries: Vec<&Image> = first.iter().chain(&second).collect();
            let keys_in: Vec<&Image> = positive.iter().collect();

            let model = &mut state.model;
            let z = model.encoder.forward(&stack(&queries)?)?;
            let proj = model.heads.forward(&z, loss_cfg.cld_enabled)?;
            let k_plus = model.key.keys(&stack(&keys_in)?)?;
            let q1 = proj.instance.slice_rows(0, b);
            let q2 = proj.instance.slice_rows(b, 2 * b);
            let groups = proj.group.as_ref().map(|g| (g.slice_rows(0, b), g.slice_rows(b, 2 * b)));
            let emb = Embeddings {
                q1: &q1,
                q2: &q2,
                k_plus: &k_plus,
                g1: groups.as_ref().map(|g| &g.0),
                g2: groups.as_ref().map(|g| &g.1),
            };
            let mut krng = stream(seed, epoch as u64, batch as u64, Tag::KMeansFirst);
            let loss = total_loss(emb, &state.queue, &loss_cfg, &mut krng)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    detail: format!("total loss {}", loss.total),
                });
            }

            let dq = Tensor::concat_rows(&[&loss.dq1, &loss.dq2])?;
            let dg = match (&loss.dg1, &loss.dg2) {
                (Some(a), Some(b)) => Some(Tensor::concat_rows(&[a, b])?),
                _ => None,
            };
            model.zero_grad();
            let dz = model.heads.backward(&dq, dg.as_ref())?;
            model.encoder.backward_params(&dz)?;
            model.encoder.clear_cache();

            let step = epoch * steps + batch;
            let lr = cosine_lr(step, total_steps, cfg.train.lr)?;
            state
                .optimizer
                .step(model.encoder.params_mut().chain(model.heads.params_mut()), lr)
                .map_err(|e| Error::Diverged {
                    epoch,
                    batch,
                    detail: format!("{e}"),
                })?;
            momentum_update(
                &mut model.key,
                &model.encoder,
                &model.heads,
                cfg.model.momentum,
                cfg.model.momentum_heads,
            )?;
            state.queue.push(&k_plus)?;

            let rec = LossRecord {
                epoch,
                batch,
                total: loss.total,
                lq1: loss.lq1,
                lq2: loss.lq2,
                lg1: loss.lg1,
                lg2: loss.lg2,
                lr,
            };
            observer(&rec);
            log.push(rec);
        }
        state.epoch = epoch + 1;
    }
    state.model.zero_grad();
    Ok((state, log))
}

/// [`pretrain_observed`] without an observer.
pub fn pretrain(cfg: &Config, patches: &PatchSet, state: Option<TrainState>) -> Result<(TrainState, Vec<LossRecord>)> {
    pretrain_observed(cfg, patches, state, |_| {})
}
