use rand::Rng;

use super::{cld_batch, infonce_batch, local_kmeans, ClusterResult, KeyQueue};
use crate::config::{ContrastConfig, KMeansMetric};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Loss hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau_q: f64,
    pub tau_g: f64,
    pub lambda: f64,
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub metric: KMeansMetric,
    /// When false the group terms are skipped entirely and reported as zero.
    pub cld_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_q: 0.2,
            tau_g: 0.4,
            lambda: 0.25,
            clusters: 32,
            kmeans_iters: 10,
            metric: KMeansMetric::Spherical,
            cld_enabled: true,
        }
    }
}

impl From<&ContrastConfig> for LossConfig {
    fn from(c: &ContrastConfig) -> Self {
        LossConfig {
            tau_q: c.tau_q,
            tau_g: c.tau_g,
            lambda: c.lambda,
            clusters: c.clusters,
            kmeans_iters: c.kmeans_iters,
            metric: c.kmeans_metric,
            cld_enabled: c.cld_enabled,
        }
    }
}

/// Unit embeddings of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings<'a> {
    pub q1: &'a Tensor,
    pub q2: &'a Tensor,
    pub k_plus: &'a Tensor,
    pub g1: Option<&'a Tensor>,
    pub g2: Option<&'a Tensor>,
}

/// Total objective, its components and gradients w.r.t. every query-side
/// embedding.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub lq1: f64,
    pub lq2: f64,
    pub lg1: f64,
    pub lg2: f64,
    pub dq1: Tensor,
    pub dq2: Tensor,
    pub dg1: Option<Tensor>,
    pub dg2: Option<Tensor>,
    pub clusters: Option<(ClusterResult, ClusterResult)>,
}

/// Recombines logged components exactly as [`total_loss`] does.
pub fn compose(lq1: f64, lq2: f64, lg1: f64, lg2: f64, lambda: f64) -> f64 {
    0.5 * (lq1 + lq2) + lambda * (0.5 * (lg1 + lg2))
}

/// `½[L_q(q₁,k⁺) + L_q(q₂,k⁺)] + λ·½[L_g(g₁,C(g₂)) + L_g(g₂,C(g₁))]`, each
/// term averaged over the batch. Both branches are clustered with `rng`,
/// first branch first.
pub fn total_loss<R: Rng + ?Sized>(
    e: Embeddings<'_>,
    queue: &KeyQueue,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<TotalLoss> {
    let inst1 = infonce_batch(e.q1, e.k_plus, queue, cfg.tau_q)?;
    let inst2 = infonce_batch(e.q2, e.k_plus, queue, cfg.tau_q)?;
    let mut dq1 = inst1.grad;
    let mut dq2 = inst2.grad;
    dq1.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    dq2.data_mut().iter_mut().for_each(|v| *v *= 0.5);

    if !cfg.cld_enabled {
        return Ok(TotalLoss {
            total: compose(inst1.mean, inst2.mean, 0.0, 0.0, cfg.lambda),
            lq1: inst1.mean,
            lq2: inst2.mean,
            lg1: 0.0,
            lg2: 0.0,
            dq1,
            dq2,
            dg1: None,
            dg2: None,
            clusters: None,
        });
    }

    let (g1, g2) = match (e.g1, e.g2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("group embeddings missing while CLD is enabled")),
    };
    let c1 = local_kmeans(g1, cfg.clusters, rng, cfg.kmeans_iters, cfg.metric)?;
    let c2 = local_kmeans(g2, cfg.clusters, rng, cfg.kmeans_iters, cfg.metric)?;
    // L_g(g₁, C(g₂)) and L_g(g₂, C(g₁)).
    let first = cld_batch(g1, g2, &c2, cfg.tau_g)?;
    let second = cld_batch(g2, g1, &c1, cfg.tau_g)?;

    let w = 0.5 * cfg.lambda;
    let mut dg1 = first.grad_self;
    let mut dg2 = second.grad_self;
    for (d, o) in dg1.data_mut().iter_mut().zip(second.grad_other.data()) {
        *d = w * (*d + o);
    }
    for (d, o) in dg2.data_mut().iter_mut().zip(first.grad_other.data()) {
        *d = w * (*d + o);
    }
    Ok(TotalLoss {
        total: compose(inst1.mean, inst2.mean, first.mean, second.mean, cfg.lambda),
        lq1: inst1.mean,
        lq2: inst2.mean,
        lg1: first.mean,
        lg2: second.mean,
        dq1,
        dq2,
        dg1: Some(dg1),
        dg2: Some(dg2),
        clusters: Some((c1, c2)),
    })
}
