use alloc::format;

use crate::data::FOREGROUND;
use crate::{Error, Result};

/// Binary recognition metrics with foreground as the positive class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` when nothing was predicted as foreground.
    pub precision: Option<f64>,
    /// `None` when there is no foreground sample.
    pub recall: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("metrics of an empty set"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        if l > 1 || p > 1 {
            return Err(Error::invalid(format!("non-binary label {l} or prediction {p}")));
        }
        match (p == FOREGROUND, l == FOREGROUND) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        tp,
        fp,
        fn_,
        tn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let l = [0, 1, 1, 0, 1];
        let m = compute_metrics(&l, &l).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (1.0, Some(1.0), Some(1.0)));
    }

    #[test]
    fn counts() {
        let mut p = alloc::vec::Vec::new();
        let mut l = alloc::vec::Vec::new();
        for (pp, ll, n) in [(1, 1, 3), (1, 0, 1), (0, 1, 2), (0, 0, 4)] {
            for _ in 0..n {
                p.push(pp);
                l.push(ll);
            }
        }
        let m = compute_metrics(&p, &l).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-15);
        assert!((m.recall.unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn undefined_precision() {
        let m = compute_metrics(&[0, 0], &[1, 0]).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(compute_metrics(&[2], &[0]).is_err());
    }
}
