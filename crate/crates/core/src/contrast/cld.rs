use alloc::vec;
use alloc::vec::Vec;

use super::ClusterResult;
use crate::config::KMeansMetric;
use crate::math;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Group loss for one embedding against the other branch's centroids:
/// `−log( e^{g·c_t/τ} / Σ_j e^{g·c_j/τ} )` with `t` the cluster of the
/// counterpart sample.
///
/// Returns the loss, the gradient with respect to `g` and the gradient with
/// respect to the `[k, d]` centroid matrix.
pub fn cld_loss(g: &[f64], centroids: &Tensor, target: usize, tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (k, d) = match *centroids.shape() {
        [k, d] if d == g.len() => (k, d),
        _ => return Err(Error::shape("cld_loss", "embedding and centroid widths differ")),
    };
    if target >= k {
        return Err(Error::invalid("target cluster out of range"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let logits: Vec<f64> = centroids.data().chunks_exact(d).map(|c| math::dot(g, c) / tau).collect();
    let lse = math::log_sum_exp(&logits);
    let loss = lse - logits[target];

    let mut dg = vec![0.0; d];
    let mut dc = vec![0.0; k * d];
    for (j, (c, &l)) in centroids.data().chunks_exact(d).zip(&logits).enumerate() {
        let w = (math::exp(l - lse) - if j == target { 1.0 } else { 0.0 }) / tau;
        for ((a, cv), (b, gv)) in dg.iter_mut().zip(c).zip(dc[j * d..(j + 1) * d].iter_mut().zip(g)) {
            *a += w * cv;
            *b += w * gv;
        }
    }
    Ok((loss, dg, dc))
}

/// Batch-mean group loss `L_g(g_i, C(g_j))` of one branch against the
/// clustering of the other branch.
#[derive(Debug, Clone)]
pub struct GroupLoss {
    pub mean: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of `mean` w.r.t. this branch's embeddings.
    pub grad_self: Tensor,
    /// Gradient of `mean` w.r.t. the other branch's embeddings, through the
    /// centroids. Cluster memberships are constants.
    pub grad_other: Tensor,
}

pub fn cld_batch(g_self: &Tensor, g_other: &Tensor, other: &ClusterResult, tau: f64) -> Result<GroupLoss> {
    if g_self.shape() != g_other.shape() || g_self.rank() != 2 {
        return Err(Error::shape("cld_batch", "branch embeddings differ in shape"));
    }
    let (n, d) = (g_self.shape()[0], g_self.shape()[1]);
    if other.assignment.len() != n || other.centroids.shape()[1] != d {
        return Err(Error::shape("cld_batch", "clustering does not match the batch"));
    }
    let k = other.centroids.shape()[0];
    let scale = 1.0 / n as f64;
    let mut per_sample = Vec::with_capacity(n);
    let mut grad_self = Vec::with_capacity(n * d);
    let mut dcent = vec![0.0; k * d];
    for i in 0..n {
        let (l, dg, dc) = cld_loss(g_self.row(i), &other.centroids, other.assignment[i], tau)?;
        per_sample.push(l);
        grad_self.extend(dg.into_iter().map(|v| v * scale));
        for (a, b) in dcent.iter_mut().zip(dc) {
            *a += b * scale;
        }
    }
    let mean = per_sample.iter().sum::<f64>() * scale;
    let grad_other = centroid_backward(g_other, other, &dcent)?;
    Ok(GroupLoss {
        mean,
        per_sample,
        grad_self: Tensor::new([n, d], grad_self)?,
        grad_other,
    })
}

/// Pulls a centroid gradient back onto the member embeddings.
fn centroid_backward(g: &Tensor, clusters: &ClusterResult, dcent: &[f64]) -> Result<Tensor> {
    let (n, d) = (g.shape()[0], g.shape()[1]);
    let k = clusters.centroids.shape()[0];
    let mut per_cluster = vec![0.0; k * d];
    match clusters.metric {
        KMeansMetric::Spherical => {
            let mut sums = vec![0.0; k * d];
            for (i, m) in clusters.members.iter().enumerate() {
                if let Some(j) = *m {
                    for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
            }
            for j in 0..k {
                let s = &sums[j * d..(j + 1) * d];
                let norm = math::norm(s);
                if !(norm > 0.0) {
                    continue;
                }
                let c = clusters.centroids.row(j);
                let dc = &dcent[j * d..(j + 1) * d];
                let proj = math::dot(c, dc);
                for ((out, dcv), cv) in per_cluster[j * d..(j + 1) * d].iter_mut().zip(dc).zip(c) {
                    *out = (dcv - cv * proj) / norm;
                }
            }
        }
        KMeansMetric::Euclidean => {
            let mut counts = vec![0usize; k];
            clusters.members.iter().flatten().for_each(|&j| counts[j] += 1);
            for j in 0..k {
                if counts[j] == 0 {
                    continue;
                }
                for (out, dcv) in per_cluster[j * d..(j + 1) * d].iter_mut().zip(&dcent[j * d..(j + 1) * d]) {
                    *out = dcv / counts[j] as f64;
                }
            }
        }
    }
    let mut grad = vec![0.0; n * d];
    for (i, m) in clusters.members.iter().enumerate() {
        if let Some(j) = *m {
            grad[i * d..(i + 1) * d].copy_from_slice(&per_cluster[j * d..(j + 1) * d]);
        }
    }
    Tensor::new([n, d], grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_orthogonal_centroid() {
        let c = Tensor::new([2, 2], alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (l, _, _) = cld_loss(&[1.0, 0.0], &c, 0, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn single_centroid_has_zero_loss() {
        let c = Tensor::new([1, 3], alloc::vec![0.0, 0.6, 0.8]).unwrap();
        let (l, dg, dc) = cld_loss(&[1.0, 0.0, 0.0], &c, 0, 0.4).unwrap();
        assert_eq!(l, 0.0);
        assert!(dg.iter().chain(&dc).all(|v| v.abs() < 1e-15));
    }
}
