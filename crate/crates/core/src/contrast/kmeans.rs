use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::config::KMeansMetric;
use crate::math;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Outcome of clustering one mini-batch of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// `[k, d]`; unit rows for the spherical metric.
    pub centroids: Tensor,
    /// Nearest centroid of every sample.
    pub assignment: Vec<usize>,
    /// Spherical: `Σ (1 − g·c)`; Euclidean: `Σ ‖g − c‖²`.
    pub inertia: f64,
    /// Cluster each sample was averaged into when the centroids were last
    /// recomputed (`None` when its cluster kept a stale centroid). The
    /// centroids are functions of the embeddings through this membership.
    pub members: Vec<Option<usize>>,
    pub iterations: usize,
    pub metric: KMeansMetric,
}

/// State reported to a [`local_kmeans_traced`] observer after every
/// assignment and every centroid update.
#[derive(Debug, Clone, Copy)]
pub struct KMeansStep<'a> {
    pub iteration: usize,
    pub after_update: bool,
    pub assignment: &'a [usize],
    pub centroids: &'a [f64],
    pub inertia: f64,
}

fn score(metric: KMeansMetric, g: &[f64], c: &[f64]) -> f64 {
    match metric {
        KMeansMetric::Spherical => 1.0 - math::dot(g, c),
        KMeansMetric::Euclidean => g.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum(),
    }
}

fn assign(metric: KMeansMetric, g: &[f64], centroids: &[f64], d: usize) -> Vec<usize> {
    g.chunks_exact(d)
        .map(|x| {
            let mut best = 0;
            let mut best_score = f64::INFINITY;
            for (j, c) in centroids.chunks_exact(d).enumerate() {
                let s = score(metric, x, c);
                if s < best_score {
                    best = j;
                    best_score = s;
                }
            }
            best
        })
        .collect()
}

fn inertia(metric: KMeansMetric, g: &[f64], centroids: &[f64], assignment: &[usize], d: usize) -> f64 {
    g.chunks_exact(d)
        .zip(assignment)
        .map(|(x, &j)| score(metric, x, &centroids[j * d..(j + 1) * d]))
        .sum()
}

/// Centroids of the clusters given by `members`. Spherical centroids are the
/// normalized member sums; Euclidean centroids are member means. Clusters
/// with no members, or whose member sum vanishes, keep the row from
/// `fallback`; their members are then reported as `None`.
pub fn centroids_from_members(
    g: &[f64],
    d: usize,
    members: &[usize],
    k: usize,
    metric: KMeansMetric,
    fallback: &[f64],
) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (x, &j) in g.chunks_exact(d).zip(members) {
        counts[j] += 1;
        for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut live = vec![true; k];
    for j in 0..k {
        let row = &mut sums[j * d..(j + 1) * d];
        let scale = match metric {
            KMeansMetric::Spherical => math::norm(row),
            KMeansMetric::Euclidean => counts[j] as f64,
        };
        if counts[j] == 0 || !(scale > 0.0) {
            row.copy_from_slice(&fallback[j * d..(j + 1) * d]);
            live[j] = false;
        } else {
            row.iter_mut().for_each(|v| *v /= scale);
        }
    }
    let membership = members.iter().map(|&j| live[j].then_some(j)).collect();
    (sums, membership)
}

/// Moves, for each empty cluster, the sample farthest from its current
/// centroid (taken from a cluster that keeps at least one other member).
fn reseed_empty(
    metric: KMeansMetric,
    g: &[f64],
    centroids: &[f64],
    assignment: &mut [usize],
    k: usize,
    d: usize,
) {
    let mut counts = vec![0usize; k];
    assignment.iter().for_each(|&j| counts[j] += 1);
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let mut pick = None;
        let mut worst = f64::NEG_INFINITY;
        for (i, x) in g.chunks_exact(d).enumerate() {
            let j = assignment[i];
            if counts[j] < 2 {
                continue;
            }
            let s = score(metric, x, &centroids[j * d..(j + 1) * d]);
            if s > worst {
                worst = s;
                pick = Some(i);
            }
        }
        if let Some(i) = pick {
            counts[assignment[i]] -= 1;
            assignment[i] = empty;
            counts[empty] = 1;
        }
    }
}

/// Local k-means on the rows of `g` (`[n, d]`, n ≥ k).
pub fn local_kmeans<R: Rng + ?Sized>(
    g: &Tensor,
    k: usize,
    rng: &mut R,
    max_iters: usize,
    metric: KMeansMetric,
) -> Result<ClusterResult> {
    local_kmeans_traced(g, k, rng, max_iters, metric, |_| {})
}

/// [`local_kmeans`] reporting every intermediate state to `observer`.
///
/// Initialization picks `k` distinct rows. Each iteration assigns samples to
/// the best centroid, stops if nothing moved, re-seeds empty clusters with
/// the worst-fitting sample of a multi-member cluster and recomputes the
/// centroids. If the iteration budget runs out, a final assignment pass
/// makes the result nearest-centroid consistent.
pub fn local_kmeans_traced<R: Rng + ?Sized>(
    g: &Tensor,
    k: usize,
    rng: &mut R,
    max_iters: usize,
    metric: KMeansMetric,
    mut observer: impl FnMut(&KMeansStep),
) -> Result<ClusterResult> {
    let (n, d) = match *g.shape() {
        [n, d] => (n, d),
        _ => return Err(Error::shape("local_kmeans", format!("{:?}", g.shape()))),
    };
    if k == 0 {
        return Err(Error::invalid("k-means with zero clusters"));
    }
    if n < k {
        return Err(Error::Insufficient(format!("{n} samples for {k} clusters")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("k-means needs at least one iteration"));
    }
    let x = g.data();
    let mut centroids = Vec::with_capacity(k * d);
    for i in index::sample(rng, n, k) {
        centroids.extend_from_slice(&x[i * d..(i + 1) * d]);
    }

    let mut members: Vec<Option<usize>> = vec![None; n];
    let mut previous: Option<Vec<usize>> = None;
    let mut iterations = 0;
    let mut converged = None;
    for it in 0..max_iters {
        let mut a = assign(metric, x, &centroids, d);
        observer(&KMeansStep {
            iteration: it,
            after_update: false,
            assignment: &a,
            centroids: &centroids,
            inertia: inertia(metric, x, &centroids, &a, d),
        });
        if previous.as_deref() == Some(&a[..]) {
            converged = Some(a);
            break;
        }
        iterations = it + 1;
        reseed_empty(metric, x, &centroids, &mut a, k, d);
        let (next, m) = centroids_from_members(x, d, &a, k, metric, &centroids);
        centroids = next;
        members = m;
        observer(&KMeansStep {
            iteration: it,
            after_update: true,
            assignment: &a,
            centroids: &centroids,
            inertia: inertia(metric, x, &centroids, &a, d),
        });
        previous = Some(a);
    }
    let assignment = match converged {
        Some(a) => a,
        None => {
            let a = assign(metric, x, &centroids, d);
            observer(&KMeansStep {
                iteration: iterations,
                after_update: false,
                assignment: &a,
                centroids: &centroids,
                inertia: inertia(metric, x, &centroids, &a, d),
            });
            a
        }
    };
    let inertia = inertia(metric, x, &centroids, &assignment, d);
    Ok(ClusterResult {
        centroids: Tensor::new([k, d], centroids)?,
        assignment,
        inertia,
        members,
        iterations,
        metric,
    })
}
