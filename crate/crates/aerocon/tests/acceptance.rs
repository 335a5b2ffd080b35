//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the report is always printed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use aerocon::selftest::{self, Outcome};
use aerocon_core::config::{Config, Preset};
use aerocon_core::data::{extract_lt, generate_mosaics, lt_options, pretraining_set, LabeledDataset, PatchSet};
use aerocon_core::model::{Encoder, Model};
use aerocon_core::pipeline::{linear_probe, pretrain};

struct Reference {
    cfg: Config,
    patches: PatchSet,
    labeled: LabeledDataset,
}

fn reference() -> Reference {
    let cfg = Config::default();
    let mosaics = generate_mosaics(&cfg.data).expect("mosaics");
    let patches = pretraining_set(&mosaics, &cfg.data).expect("pretraining set");
    let labeled = extract_lt(&mosaics, &lt_options(&cfg.data)).expect("long-tail set");
    Reference { cfg, patches, labeled }
}

fn within(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let res = f()?;
    let took = start.elapsed();
    if took > limit {
        return Err(format!("{res}; took {took:.1?}, limit {limit:.0?}"));
    }
    Ok(res)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Frozen probe with 10% labels: test (recall, accuracy).
fn probe(encoder: &Encoder, r: &Reference, cfg: &Config) -> Result<(f64, f64), String> {
    let ev = linear_probe(encoder, &r.labeled, 0.1, cfg).map_err(|e| e.to_string())?;
    Ok((ev.test.recall.unwrap_or(0.0), ev.test.accuracy))
}

fn trend(r: &Reference) -> Outcome {
    let seeds = [0u64, 1, 2];
    let mut rec = [Vec::new(), Vec::new(), Vec::new()];
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    let mut lines = Vec::new();
    for &seed in &seeds {
        let mut base = r.cfg.clone();
        base.train.seed = seed;
        let random = Model::new(&base.model, seed).map_err(|e| e.to_string())?.encoder;
        let runs = [
            (Some(Preset::Mcc2), "mcc2"),
            (Some(Preset::Mcc0), "mcc0"),
            (None, "random"),
        ];
        for (i, (preset, name)) in runs.into_iter().enumerate() {
            let mut cfg = base.clone();
            let encoder = match preset {
                Some(p) => {
                    p.apply(&mut cfg);
                    pretrain(&cfg, &r.patches, None).map_err(|e| e.to_string())?.0.model.encoder
                }
                None => random.clone(),
            };
            let (re, ac) = probe(&encoder, r, &cfg)?;
            eprintln!("  seed {seed} {name}: test recall {re:.3} accuracy {ac:.3}");
            rec[i].push(re);
            acc[i].push(ac);
        }
    }
    let [r2, r0, rr] = rec.map(median);
    let [a2, a0, _] = acc.map(median);
    lines.push(format!(
        "median recall mcc2 {:.1} / mcc0 {:.1} / random {:.1}; accuracy mcc2 {:.1} / mcc0 {:.1}",
        100.0 * r2,
        100.0 * r0,
        100.0 * rr,
        100.0 * a2,
        100.0 * a0
    ));
    let msg = lines.join("; ");
    if r2 - rr < 0.10 {
        return Err(format!("{msg}; recall margin over random below 10 points"));
    }
    if a2 < a0 - 0.01 {
        return Err(format!("{msg}; mcc2 accuracy below mcc0"));
    }
    Ok(msg)
}

fn main() -> ExitCode {
    let start = Instant::now();
    let reference = reference();
    let mut two_epochs = reference.cfg.clone();
    two_epochs.train.epochs = 2;

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("infonce oracle", Box::new(|| within(Duration::from_secs(1), selftest::infonce_oracle))),
        ("cld oracle", Box::new(|| within(Duration::from_secs(1), selftest::cld_oracle))),
        ("gradient suite", Box::new(|| within(Duration::from_secs(60), selftest::gradient_suite))),
        ("momentum ema", Box::new(selftest::momentum_ema)),
        ("queue fifo", Box::new(selftest::queue_fifo)),
        ("k-means", Box::new(selftest::kmeans_invariants)),
        (
            "loss recomposition",
            Box::new(|| selftest::loss_recomposition_on(&two_epochs, &reference.patches)),
        ),
        (
            "determinism and resume",
            Box::new(|| {
                within(Duration::from_secs(120), || {
                    selftest::determinism_and_resume_on(&reference.cfg, &reference.patches)
                })
            }),
        ),
        ("controlled views", Box::new(selftest::controlled_views)),
        ("dataset counts", Box::new(selftest::dataset_counts)),
        ("end-to-end trend", Box::new(|| within(Duration::from_secs(20 * 60), || trend(&reference)))),
        ("format round trips", Box::new(selftest::format_round_trips)),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = check();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS criterion {:>2} {name} ({secs:.1}s): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    println!(
        "{}/{} criteria passed in {:.0?}",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
