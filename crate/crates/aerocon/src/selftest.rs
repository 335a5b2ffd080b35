//! Built-in verification suite: loss oracles, gradient checks, queue and
//! clustering invariants, training determinism, view and dataset contracts
//! and file-format round trips. Every check is deterministic.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use aerocon_core::augment::{make_controlled_views, Image};
use aerocon_core::config::{Config, DataConfig, KMeansMetric};
use aerocon_core::contrast::{cld_loss, compose, infonce, local_kmeans_traced, KeyQueue};
use aerocon_core::data::{extract_lt, generate_mosaics, lt_options, pretraining_set, PatchSet};
use aerocon_core::model::{ema, l2_normalize_backward, l2_normalize_rows};
use aerocon_core::numerics::{finite_diff_check, Layer, Tensor};
use aerocon_core::pipeline::{pretrain, LossRecord, TrainState};
use aerocon_core::rng::{stream, Tag, StreamRng};
use rand::Rng;

use crate::manifest::{Entry, Manifest};
use crate::{checkpoint, embeddings, ppm};

pub type Outcome = Result<String, String>;

/// One named check. `run` returns a short report on success.
pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

pub fn checks() -> Vec<Check> {
    vec![
        Check {
            name: "infonce-oracle",
            run: infonce_oracle,
        },
        Check {
            name: "cld-oracle",
            run: cld_oracle,
        },
        Check {
            name: "gradients",
            run: gradient_suite,
        },
        Check {
            name: "momentum-ema",
            run: momentum_ema,
        },
        Check {
            name: "queue-fifo",
            run: queue_fifo,
        },
        Check {
            name: "kmeans",
            run: kmeans_invariants,
        },
        Check {
            name: "loss-recomposition",
            run: loss_recomposition,
        },
        Check {
            name: "determinism-resume",
            run: determinism_and_resume,
        },
        Check {
            name: "controlled-views",
            run: controlled_views,
        },
        Check {
            name: "dataset-counts",
            run: dataset_counts,
        },
        Check {
            name: "format-round-trips",
            run: format_round_trips,
        },
    ]
}

/// Runs every check, printing one line each and a final count. Returns the
/// number of passed and total checks.
pub fn run_all(out: &mut dyn Write) -> (usize, usize) {
    let all = checks();
    let mut passed = 0;
    for c in &all {
        let start = Instant::now();
        let res = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let _ = match &res {
            Ok(msg) => {
                passed += 1;
                writeln!(out, "PASS {:<20} {secs:7.2}s  {msg}", c.name)
            }
            Err(msg) => writeln!(out, "FAIL {:<20} {secs:7.2}s  {msg}", c.name),
        };
    }
    let _ = writeln!(out, "{passed}/{} checks passed", all.len());
    (passed, all.len())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn unit_vector(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn unit_rows(rng: &mut StreamRng, n: usize, d: usize) -> Tensor {
    let data = (0..n).flat_map(|_| unit_vector(rng, d)).collect();
    Tensor::new([n, d], data).expect("shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of `logits` against class `target`, straight from the
/// softmax definition.
fn naive_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let denom: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[target].exp() / denom).ln()
}

pub fn infonce_oracle() -> Outcome {
    let (d, negatives, tau) = (32, 64, 0.2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut rng = stream(1, 0, case, Tag::Init);
        let q = unit_vector(&mut rng, d);
        let k = unit_vector(&mut rng, d);
        let neg = unit_rows(&mut rng, negatives, d);
        let (loss, _) = infonce(&q, &k, neg.data(), tau).map_err(err)?;
        let mut logits = vec![dot(&q, &k) / tau];
        logits.extend(neg.data().chunks_exact(d).map(|n| dot(&q, n) / tau));
        let diff = (loss - naive_cross_entropy(&logits, 0)).abs();
        ensure(diff <= 1e-9, || format!("case {case}: |Δ| = {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("100 cases, max |Δ| = {worst:.1e}"))
}

pub fn cld_oracle() -> Outcome {
    let (d, k, tau) = (32, 8, 0.4);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut rng = stream(2, 0, case, Tag::Init);
        let g = unit_vector(&mut rng, d);
        let c = unit_rows(&mut rng, k, d);
        let target = rng.random_range(0..k);
        let (loss, _, _) = cld_loss(&g, &c, target, tau).map_err(err)?;
        let logits: Vec<f64> = c.data().chunks_exact(d).map(|r| dot(&g, r) / tau).collect();
        let diff = (loss - naive_cross_entropy(&logits, target)).abs();
        ensure(diff <= 1e-9, || format!("case {case}: |Δ| = {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("100 cases, max |Δ| = {worst:.1e}"))
}

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 10;

/// Gradient check of one layer with respect to its input and parameters
/// under the loss `Σ r ⊙ layer(x)`.
fn layer_gradient(layer: &Layer, input: &Tensor, rng: &mut StreamRng) -> Result<f64, String> {
    let out_shape = layer.infer(input).map_err(err)?.shape().to_vec();
    let r = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));
    let sizes: Vec<usize> = layer.params().iter().map(|p| p.value.len()).collect();
    let mut point = input.data().to_vec();
    layer.params().iter().for_each(|p| point.extend_from_slice(p.value.data()));
    finite_diff_check(
        |x| {
            let mut l = layer.clone();
            let (xin, mut rest) = x.split_at(input.len());
            for (p, &n) in l.params_mut().iter_mut().zip(&sizes) {
                p.value.data_mut().copy_from_slice(&rest[..n]);
                p.zero_grad();
                rest = &rest[n..];
            }
            let y = l.forward(&Tensor::new(input.shape().to_vec(), xin.to_vec())?)?;
            let loss = dot(y.data(), r.data());
            let mut grad = l.backward(&r)?.into_data();
            l.params().iter().for_each(|p| grad.extend_from_slice(p.grad.data()));
            Ok((loss, grad))
        },
        &point,
        GRAD_H,
    )
    .map_err(err)
}

fn random_tensor(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn gradient_suite() -> Outcome {
    type Case = fn(&mut StreamRng) -> Result<f64, String>;
    let cases: [(&str, Case); 8] = [
        ("conv2d", |rng| {
            let w = random_tensor(rng, &[3, 2, 3, 3]);
            let b = random_tensor(rng, &[3]);
            let x = random_tensor(rng, &[2, 2, 5, 4]);
            layer_gradient(&Layer::conv2d("c", w, Some(b)).map_err(err)?, &x, rng)
        }),
        ("linear", |rng| {
            let w = random_tensor(rng, &[4, 6]);
            let b = random_tensor(rng, &[4]);
            let x = random_tensor(rng, &[3, 6]);
            layer_gradient(&Layer::linear("l", w, Some(b)).map_err(err)?, &x, rng)
        }),
        ("relu", |rng| {
            let x = random_tensor(rng, &[3, 7]);
            layer_gradient(&Layer::relu(), &x, rng)
        }),
        ("max-pool", |rng| {
            let x = random_tensor(rng, &[2, 2, 4, 6]);
            layer_gradient(&Layer::max_pool(), &x, rng)
        }),
        ("global-avg-pool", |rng| {
            let x = random_tensor(rng, &[2, 3, 3, 4]);
            layer_gradient(&Layer::global_avg_pool(), &x, rng)
        }),
        ("l2-normalize", |rng| {
            let x = random_tensor(rng, &[3, 5]);
            let r = random_tensor(rng, &[3, 5]);
            finite_diff_check(
                |v| {
                    let (y, norms) = l2_normalize_rows(&Tensor::new([3, 5], v.to_vec())?)?;
                    let g = l2_normalize_backward(&y, &norms, &r)?;
                    Ok((dot(y.data(), r.data()), g.into_data()))
                },
                x.data(),
                GRAD_H,
            )
            .map_err(err)
        }),
        ("infonce", |rng| {
            let q = unit_vector(rng, 8);
            let k = unit_vector(rng, 8);
            let neg = unit_rows(rng, 16, 8);
            finite_diff_check(|v| infonce(v, &k, neg.data(), 0.2), &q, GRAD_H).map_err(err)
        }),
        ("cld", |rng| {
            let g = unit_vector(rng, 8);
            let c = unit_rows(rng, 4, 8);
            let t = rng.random_range(0..4);
            let eg = finite_diff_check(
                |v| cld_loss(v, &c, t, 0.4).map(|(l, dg, _)| (l, dg)),
                &g,
                GRAD_H,
            )
            .map_err(err)?;
            let ec = finite_diff_check(
                |v| cld_loss(&g, &Tensor::new([4, 8], v.to_vec())?, t, 0.4).map(|(l, _, dc)| (l, dc)),
                c.data(),
                GRAD_H,
            )
            .map_err(err)?;
            Ok(eg.max(ec))
        }),
    ];
    let mut report = Vec::new();
    for (name, case) in cases {
        let mut worst: f64 = 0.0;
        for seed in 0..GRAD_SEEDS {
            let e = case(&mut stream(seed, 3, 0, Tag::Init))?;
            ensure(e <= GRAD_TOL, || format!("{name} seed {seed}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
        report.push(format!("{name} {worst:.0e}"));
    }
    Ok(format!("{GRAD_SEEDS} seeds each; worst: {}", report.join(", ")))
}

pub fn momentum_ema() -> Outcome {
    let (m, n, theta0) = (0.999f64, 1000, 0.73);
    let mut key = [theta0];
    for _ in 0..n {
        ema(&mut key, &[0.0], m);
    }
    let expected = m.powi(n) * theta0;
    let diff = (key[0] - expected).abs();
    ensure(diff <= 1e-12, || format!("θ_k = {} vs m^n θ0 = {expected}", key[0]))?;
    Ok(format!("{n} steps, |Δ| = {diff:.1e}"))
}

pub fn queue_fifo() -> Outcome {
    for case in 0..1000u64 {
        let mut rng = stream(4, 0, case, Tag::Init);
        let capacity = rng.random_range(1..=24);
        let dim = rng.random_range(1..=4);
        let mut q = KeyQueue::new(capacity, dim).map_err(err)?;
        let mut all: Vec<Vec<f64>> = Vec::new();
        for _ in 0..rng.random_range(0..12) {
            let b = rng.random_range(1..=capacity);
            let keys = unit_rows(&mut rng, b, dim);
            q.push(&keys).map_err(err)?;
            all.extend(keys.data().chunks_exact(dim).map(<[f64]>::to_vec));
        }
        let tail = &all[all.len().saturating_sub(capacity)..];
        let got: Vec<Vec<f64>> = q.iter().map(<[f64]>::to_vec).collect();
        ensure(got == tail, || format!("case {case}: queue contents differ from the stream tail"))?;
        ensure(q.len() == all.len().min(capacity), || format!("case {case}: fill {}", q.len()))?;
    }
    Ok("1000 push sequences".into())
}

pub fn kmeans_invariants() -> Outcome {
    let mut iterations = 0;
    for case in 0..100u64 {
        let mut rng = stream(5, 0, case, Tag::Init);
        let (n, d) = (rng.random_range(8..=64), rng.random_range(2..=16));
        let k = rng.random_range(1..=8.min(n));
        let g = unit_rows(&mut rng, n, d);
        let mut trace = Vec::new();
        let res = local_kmeans_traced(&g, k, &mut rng, 20, KMeansMetric::Spherical, |s| trace.push(s.inertia))
            .map_err(err)?;
        for (i, w) in trace.windows(2).enumerate() {
            ensure(w[1] <= w[0] + 1e-12, || format!("case {case}: inertia rose at step {i}: {} → {}", w[0], w[1]))?;
        }
        for (i, row) in g.data().chunks_exact(d).enumerate() {
            let own = dot(row, res.centroids.row(res.assignment[i]));
            let best = res.centroids.data().chunks_exact(d).map(|c| dot(row, c)).fold(f64::MIN, f64::max);
            ensure(own >= best, || format!("case {case}: sample {i} not at its nearest centroid"))?;
        }
        for (j, c) in res.centroids.data().chunks_exact(d).enumerate() {
            let norm = dot(c, c).sqrt();
            ensure((norm - 1.0).abs() <= 1e-6, || format!("case {case}: centroid {j} norm {norm}"))?;
        }
        iterations += res.iterations;
    }
    Ok(format!("100 batches, {iterations} iterations"))
}

/// A miniature pretraining setup shared by the training checks.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.data = DataConfig {
        mosaics: 6,
        mosaic_size: 96,
        animal_mosaic_prob: 0.5,
        trees: 2,
        grass_patches: 2,
        dead_trunks: 1,
        pre_patch: 24,
        crops_per_image: 6,
        extra_crops_with_animals: 2,
        ..DataConfig::default()
    };
    cfg.augment.crop_size = 16;
    cfg.model.widths = vec![4, 8];
    cfg.model.hidden_dim = 16;
    cfg.model.embed_dim = 8;
    cfg.model.momentum = 0.99;
    cfg.contrast.clusters = 4;
    cfg.contrast.queue_size = 48;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 2;
    cfg
}

pub fn tiny_patches(cfg: &Config) -> Result<PatchSet, String> {
    let mosaics = generate_mosaics(&cfg.data).map_err(err)?;
    pretraining_set(&mosaics, &cfg.data).map_err(err)
}

fn components(r: &LossRecord) -> [f64; 4] {
    [r.lq1, r.lq2, r.lg1, r.lg2]
}

pub fn loss_recomposition() -> Outcome {
    let cfg = tiny_config();
    loss_recomposition_on(&cfg, &tiny_patches(&cfg)?)
}

/// Recomposition of every logged batch and λ=0 against a disabled group
/// branch, both over `cfg.train.epochs` epochs on `patches`.
pub fn loss_recomposition_on(cfg: &Config, patches: &PatchSet) -> Outcome {
    let (_, log) = pretrain(cfg, patches, None).map_err(err)?;
    for r in &log {
        let t = compose(r.lq1, r.lq2, r.lg1, r.lg2, cfg.contrast.lambda);
        ensure((t - r.total).abs() <= 1e-12, || {
            format!("epoch {} batch {}: {} vs {}", r.epoch, r.batch, t, r.total)
        })?;
    }
    let mut zero = cfg.clone();
    zero.contrast.lambda = 0.0;
    let mut off = cfg.clone();
    off.contrast.cld_enabled = false;
    let (sz, lz) = pretrain(&zero, patches, None).map_err(err)?;
    let (so, lo) = pretrain(&off, patches, None).map_err(err)?;
    ensure(lz.len() == lo.len(), || "λ=0 and disabled runs differ in length".into())?;
    for (a, b) in lz.iter().zip(&lo) {
        ensure(components(a) == components(b) && a.total == b.total, || {
            format!("epoch {} batch {}: λ=0 {:?} vs disabled {:?}", a.epoch, a.batch, a, b)
        })?;
    }
    ensure(checkpoint::encode_state(&sz, cfg) == checkpoint::encode_state(&so, cfg), || {
        "λ=0 and disabled runs end in different states".into()
    })?;
    Ok(format!("{} batches recombine; λ=0 matches the disabled branch", log.len()))
}

fn max_param_diff(a: &TrainState, b: &TrainState) -> f64 {
    a.model
        .named_tensors()
        .iter()
        .zip(b.model.named_tensors())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

pub fn determinism_and_resume() -> Outcome {
    let cfg = tiny_config();
    determinism_and_resume_on(&cfg, &tiny_patches(&cfg)?)
}

/// Two identical 2-epoch runs and a 2+2-epoch resume against a 4-epoch run.
pub fn determinism_and_resume_on(cfg: &Config, patches: &PatchSet) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.train.epochs = 4;
    cfg.train.stop_epoch = 0;
    let mut half = cfg.clone();
    half.train.stop_epoch = 2;
    let (a, _) = pretrain(&half, patches, None).map_err(err)?;
    let (b, _) = pretrain(&half, patches, None).map_err(err)?;
    let bytes = checkpoint::encode_state(&a, &half);
    ensure(bytes == checkpoint::encode_state(&b, &half), || "repeated runs differ".into())?;

    let (restored, _) = checkpoint::decode_state(&bytes).map_err(err)?;
    let (resumed, _) = pretrain(&cfg, patches, Some(restored)).map_err(err)?;
    let (full, _) = pretrain(&cfg, patches, None).map_err(err)?;
    let diff = max_param_diff(&resumed, &full);
    ensure(diff <= 1e-12, || format!("resumed run deviates by {diff:e}"))?;
    Ok(format!("checkpoints identical; 2+2 vs 4 epochs max |Δ| = {diff:.1e}"))
}

pub fn controlled_views() -> Outcome {
    let cfg = Config::default().augment;
    let img = Image::new(40, 40, (0..3 * 40 * 40).map(|i| (i % 97) as f64 / 97.0).collect()).map_err(err)?;
    for i in 0..1000u64 {
        let v = make_controlled_views(&img, &mut stream(6, 0, i, Tag::Views), &cfg).map_err(err)?;
        let (p1, p2, pk) = (&v.first_params, &v.second_params, &v.positive_params);
        ensure(p1.same_color(pk), || format!("triplet {i}: first/key colors differ"))?;
        ensure(p1.rotation_k != pk.rotation_k, || format!("triplet {i}: first/key rotations equal"))?;
        ensure(p2.rotation_k == pk.rotation_k, || format!("triplet {i}: second/key rotations differ"))?;
    }
    Ok("1000 triplets, 0 violations".into())
}

pub fn dataset_counts() -> Outcome {
    let cfg = DataConfig {
        mosaics: 20,
        ..DataConfig::default()
    };
    let mosaics = generate_mosaics(&cfg).map_err(err)?;
    let with_animals = mosaics.iter().filter(|m| !m.boxes.is_empty()).count();
    let pre = pretraining_set(&mosaics, &cfg).map_err(err)?;
    let expected = cfg.mosaics * cfg.crops_per_image + with_animals * cfg.extra_crops_with_animals;
    ensure(pre.len() == expected, || format!("pre: {} patches, formula gives {expected}", pre.len()))?;

    let lt = extract_lt(&mosaics, &lt_options(&cfg)).map_err(err)?;
    let (bg, fg) = lt.train.class_counts();
    ensure(bg.abs_diff(cfg.bg_per_fg * fg) <= 1, || format!("train: {bg} background for {fg} foreground"))?;
    for (name, s) in [("val", &lt.val), ("test", &lt.test)] {
        let (b, f) = s.class_counts();
        ensure(b == f && f > 0, || format!("{name}: {b} background vs {f} foreground"))?;
    }
    let sets: Vec<HashSet<usize>> = lt.mosaics.iter().map(|m| m.iter().copied().collect()).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            ensure(sets[i].is_disjoint(&sets[j]), || format!("splits {i} and {j} share mosaics"))?;
        }
    }
    for (s, split) in [&lt.train, &lt.val, &lt.test].into_iter().enumerate() {
        ensure(split.origins.iter().all(|o| sets[s].contains(&o.mosaic)), || {
            format!("split {s} holds a patch from a foreign mosaic")
        })?;
    }
    Ok(format!(
        "pre {} = {}·{} + {}·{}; train {bg}:{fg}; val {}; test {}",
        pre.len(),
        cfg.mosaics,
        cfg.crops_per_image,
        with_animals,
        cfg.extra_crops_with_animals,
        lt.val.len(),
        lt.test.len()
    ))
}

pub fn format_round_trips() -> Outcome {
    let mut rng = stream(7, 0, 0, Tag::Init);
    let bytes: Vec<f64> = (0..3 * 7 * 5).map(|_| ppm::from_byte(rng.random())).collect();
    let img = Image::new(7, 5, bytes).map_err(err)?;
    let p = ppm::encode(&img);
    ensure(ppm::encode(&ppm::decode(&p).map_err(err)?) == p, || "PPM re-encoding differs".into())?;

    let m = Manifest {
        entries: (0..5)
            .map(|i| Entry {
                path: format!("train/patch_{i:05}.ppm"),
                label: [None, Some(0), Some(1)][i % 3],
                split: "train".into(),
                mosaic: i * 3,
                x: i * 7,
                y: 100 - i,
            })
            .collect(),
    };
    let text = m.render();
    let back = Manifest::parse(&text)?;
    ensure(back == m && back.render() == text, || "manifest re-rendering differs".into())?;

    let cfg = tiny_config();
    let mut state = TrainState::new(&cfg).map_err(err)?;
    state.queue.push(&unit_rows(&mut rng, 5, cfg.model.embed_dim)).map_err(err)?;
    state.epoch = 1;
    let c = checkpoint::encode_state(&state, &cfg);
    let (s2, cfg2) = checkpoint::decode_state(&c).map_err(err)?;
    ensure(cfg2 == cfg && checkpoint::encode_state(&s2, &cfg2) == c, || "checkpoint re-encoding differs".into())?;

    let feats = Tensor::from_fn([4, 6], |_| rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-20..20)));
    let rows = embeddings::rows_from(
        (0..4).map(|i| format!("p{i}")).collect(),
        vec![Some(0), Some(1), None, Some(1)],
        &feats,
    );
    let text = embeddings::render(6, &rows)?;
    let (dim, parsed) = embeddings::parse(&text)?;
    ensure(dim == 6 && parsed == rows, || "embedding values changed".into())?;
    ensure(embeddings::render(dim, &parsed)? == text, || "embedding re-rendering differs".into())?;
    Ok("PPM, manifest, checkpoint and embeddings byte-exact".into())
}
