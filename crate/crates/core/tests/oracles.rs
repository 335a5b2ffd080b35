//! Independent re-implementations checked against the library.

use aerocon_core::augment::Image;
use aerocon_core::config::KMeansMetric;
use aerocon_core::contrast::{
    cld_loss, compose, infonce, local_kmeans_traced, total_loss, Embeddings, KeyQueue, LossConfig,
};
use aerocon_core::model::{l2_normalize_rows, stack, Encoder};
use aerocon_core::numerics::{Layer, LayerKind, Tensor};
use aerocon_core::pipeline::compute_metrics;
use aerocon_core::rng::{stream, StreamRng, Tag};
use rand::Rng;

fn rng(seed: u64) -> StreamRng {
    stream(seed, 21, 0, Tag::Init)
}

fn random(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn unit_rows(r: &mut StreamRng, n: usize, d: usize) -> Tensor {
    l2_normalize_rows(&random(r, &[n, d])).unwrap().0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 3×3 convolution, stride 1, zero padding 1, by nested loops.
fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: Option<&[f64]>, out_ch: usize) -> Vec<f64> {
    let mut y = vec![0.0; out_ch * h * w];
    for o in 0..out_ch {
        for r in 0..h {
            for col in 0..w {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (r as isize + ky as isize - 1, col as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c + ch) * 3 + ky) * 3 + kx] * x[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                y[(o * h + r) * w + col] = acc;
            }
        }
    }
    y
}

#[test]
fn conv_matches_nested_loops() {
    for case in 0..50 {
        let mut r = rng(case);
        let (c, o) = (r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let weight = random(&mut r, &[o, c, 3, 3]);
        let bias = random(&mut r, &[o]);
        let x = random(&mut r, &[1, c, h, w]);
        let layer = Layer::conv2d("c", weight.clone(), Some(bias.clone())).unwrap();
        let got = layer.infer(&x).unwrap();
        let want = naive_conv(x.data(), c, h, w, weight.data(), Some(bias.data()), o);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn random_kernel_on_five_by_five() {
    let mut r = rng(99);
    let weight = random(&mut r, &[1, 1, 3, 3]);
    let x = random(&mut r, &[1, 1, 5, 5]);
    let got = Layer::conv2d("c", weight.clone(), None).unwrap().infer(&x).unwrap();
    assert_eq!(got.shape(), [1, 1, 5, 5]);
    let want = naive_conv(x.data(), 1, 5, 5, weight.data(), None, 1);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

/// The encoder recomputed from its own weights with plain loops.
fn naive_encoder(enc: &Encoder, img: &[f64], mut h: usize, mut w: usize) -> Vec<f64> {
    let mut x = img.to_vec();
    let mut c = 3;
    for layer in enc.layers() {
        match layer.kind() {
            LayerKind::Conv2d { out_ch, bias, .. } => {
                let p = layer.params();
                let b = bias.then(|| p[1].value.data());
                x = naive_conv(&x, c, h, w, p[0].value.data(), b, out_ch);
                c = out_ch;
            }
            LayerKind::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::MaxPool2x2 => {
                let (oh, ow) = (h / 2, w / 2);
                let mut y = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let at = |dy: usize, dx: usize| x[(ch * h + 2 * r + dy) * w + 2 * col + dx];
                            y[(ch * oh + r) * ow + col] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                        }
                    }
                }
                x = y;
                (h, w) = (oh, ow);
            }
            LayerKind::GlobalAvgPool => {
                x = x.chunks_exact(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
            }
            LayerKind::Linear { .. } => unreachable!("encoder has no linear layer"),
        }
    }
    x
}

fn reference_image() -> Image {
    let data = (0..3 * 32 * 32).map(|i| ((i * 37 % 101) as f64 / 100.0).sin().abs()).collect();
    Image::new(32, 32, data).unwrap()
}

#[test]
fn encoder_matches_reimplementation_and_golden_value() {
    let enc = Encoder::new(&[8, 16, 32], &mut stream(0, 0, 0, Tag::Init)).unwrap();
    let img = reference_image();
    let got = enc.encode(&[&img]).unwrap();
    let want = naive_encoder(&enc, img.data(), 32, 32);
    assert_eq!(got.shape(), [1, 32]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    let sum: f64 = got.data().iter().sum();
    assert!((sum - GOLDEN_FEATURE_SUM).abs() <= 1e-9, "feature sum {sum:.17e}");
}

/// Sum of the reference encoder's features on [`reference_image`].
const GOLDEN_FEATURE_SUM: f64 = 18.619057518565469;

#[test]
fn batch_of_duplicates_gives_identical_rows() {
    let enc = Encoder::new(&[4, 8], &mut stream(3, 0, 0, Tag::Init)).unwrap();
    let img = reference_image();
    let z = enc.infer(&stack(&[&img, &img]).unwrap()).unwrap();
    assert_eq!(z.row(0), z.row(1));
}

fn softmax_ce(logits: &[f64], target: usize) -> f64 {
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[target].exp() / denom).ln()
}

#[test]
fn infonce_matches_softmax_cross_entropy() {
    for case in 0..100 {
        let mut r = rng(1000 + case);
        let d = r.random_range(2..=32);
        let tau = r.random_range(0.05..1.0);
        let q = unit_rows(&mut r, 1, d).into_data();
        let k = unit_rows(&mut r, 1, d).into_data();
        let neg = unit_rows(&mut r, 64, d);
        let (loss, _) = infonce(&q, &k, neg.data(), tau).unwrap();
        let mut logits = vec![dot(&q, &k) / tau];
        logits.extend(neg.data().chunks_exact(d).map(|n| dot(&q, n) / tau));
        assert!((loss - softmax_ce(&logits, 0)).abs() <= 1e-9, "case {case}");
    }
}

#[test]
fn cld_matches_softmax_cross_entropy() {
    for case in 0..100 {
        let mut r = rng(2000 + case);
        let (d, k) = (r.random_range(2..=32), r.random_range(1..=16));
        let tau = r.random_range(0.05..1.0);
        let g = unit_rows(&mut r, 1, d).into_data();
        let c = unit_rows(&mut r, k, d);
        let t = r.random_range(0..k);
        let (loss, _, _) = cld_loss(&g, &c, t, tau).unwrap();
        let logits: Vec<f64> = c.data().chunks_exact(d).map(|row| dot(&g, row) / tau).collect();
        assert!((loss - softmax_ce(&logits, t)).abs() <= 1e-9, "case {case}");
    }
}

#[test]
fn kmeans_trace_on_six_points() {
    let g = Tensor::new(
        [6, 3],
        vec![
            1.0, 0.0, 0.0, 0.96, 0.28, 0.0, 0.8, 0.6, 0.0, 0.0, 0.0, 1.0, 0.0, 0.6, 0.8, 0.28, 0.0, 0.96,
        ],
    )
    .unwrap();
    for seed in 0..20 {
        let mut trace = Vec::new();
        let res = local_kmeans_traced(&g, 2, &mut stream(seed, 0, 0, Tag::KMeansFirst), 10, KMeansMetric::Spherical, |s| {
            trace.push(s.inertia)
        })
        .unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "seed {seed}: {trace:?}");
        for i in 0..6 {
            let own = dot(g.row(i), res.centroids.row(res.assignment[i]));
            for j in 0..2 {
                assert!(own >= dot(g.row(i), res.centroids.row(j)));
            }
        }
    }
}

fn embeddings(seed: u64, b: usize, d: usize) -> [Tensor; 5] {
    let mut r = rng(seed);
    [
        unit_rows(&mut r, b, d),
        unit_rows(&mut r, b, d),
        unit_rows(&mut r, b, d),
        unit_rows(&mut r, b, d),
        unit_rows(&mut r, b, d),
    ]
}

fn loss_with(t: &[Tensor; 5], queue: &KeyQueue, cfg: &LossConfig) -> aerocon_core::contrast::TotalLoss {
    let e = Embeddings {
        q1: &t[0],
        q2: &t[1],
        k_plus: &t[2],
        g1: Some(&t[3]),
        g2: Some(&t[4]),
    };
    total_loss(e, queue, cfg, &mut stream(0, 0, 0, Tag::KMeansFirst)).unwrap()
}

#[test]
fn total_loss_composition() {
    let (b, d) = (2, 3);
    let t = embeddings(5, b, d);
    let mut queue = KeyQueue::new(4, d).unwrap();
    queue.push(&unit_rows(&mut rng(6), 4, d)).unwrap();
    let cfg = LossConfig {
        clusters: 2,
        ..LossConfig::default()
    };

    // Hand computation: with two samples and two clusters every sample is
    // its own cluster, so the centroid of sample i in a branch is the
    // sample itself.
    let tau_q = cfg.tau_q;
    let lq = |q: &Tensor| {
        (0..b)
            .map(|i| {
                let mut logits = vec![dot(q.row(i), t[2].row(i)) / tau_q];
                logits.extend(queue.iter().map(|k| dot(q.row(i), k) / tau_q));
                softmax_ce(&logits, 0)
            })
            .sum::<f64>()
            / b as f64
    };
    let lg = |g: &Tensor, other: &Tensor| {
        (0..b)
            .map(|i| {
                let logits: Vec<f64> = (0..b).map(|j| dot(g.row(i), other.row(j)) / cfg.tau_g).collect();
                softmax_ce(&logits, i)
            })
            .sum::<f64>()
            / b as f64
    };
    let (lq1, lq2) = (lq(&t[0]), lq(&t[1]));
    let (lg1, lg2) = (lg(&t[3], &t[4]), lg(&t[4], &t[3]));
    let got = loss_with(&t, &queue, &cfg);
    for (a, b) in [(got.lq1, lq1), (got.lq2, lq2), (got.lg1, lg1), (got.lg2, lg2)] {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    let want = 0.5 * (lq1 + lq2) + 0.25 * 0.5 * (lg1 + lg2);
    assert!((got.total - want).abs() <= 1e-12);
}

#[test]
fn lambda_zero_and_linearity() {
    let (b, d) = (8, 4);
    let t = embeddings(7, b, d);
    let mut queue = KeyQueue::new(16, d).unwrap();
    queue.push(&unit_rows(&mut rng(8), 16, d)).unwrap();
    let at = |lambda: f64| {
        loss_with(
            &t,
            &queue,
            &LossConfig {
                clusters: 3,
                lambda,
                ..LossConfig::default()
            },
        )
    };
    let zero = at(0.0);
    assert!((zero.total - 0.5 * (zero.lq1 + zero.lq2)).abs() <= 1e-12);
    let moco = 0.5 * (zero.lq1 + zero.lq2);
    let (one, two) = (at(0.25), at(0.5));
    assert_eq!(2.0 * (one.total - moco), two.total - moco);
    assert_eq!(compose(one.lq1, one.lq2, one.lg1, one.lg2, 0.25), one.total);
}

#[test]
fn metrics_match_recount() {
    for case in 0..1000 {
        let mut r = rng(3000 + case);
        let n = r.random_range(1..=50);
        let p: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let l: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let m = compute_metrics(&p, &l).unwrap();
        let mut conf = [[0usize; 2]; 2];
        for (&a, &b) in p.iter().zip(&l) {
            conf[a as usize][b as usize] += 1;
        }
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (conf[1][1], conf[1][0], conf[0][1], conf[0][0]));
        assert_eq!(m.accuracy, (conf[1][1] + conf[0][0]) as f64 / n as f64);
        let pp = conf[1][1] + conf[1][0];
        assert_eq!(m.precision, (pp > 0).then(|| conf[1][1] as f64 / pp as f64));
        let pos = conf[1][1] + conf[0][1];
        assert_eq!(m.recall, (pos > 0).then(|| conf[1][1] as f64 / pos as f64));
    }
}
