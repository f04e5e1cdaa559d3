//! Acceptance criteria AC1–AC10, run in sequence without the test harness
//! so that timings are undisturbed and every criterion prints one
//! `PASS|FAIL ACn` line. Exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{contracts, finite_difference_check, oracle, tiny_image, tiny_model};
use sparse_tuning::adapter::AdapterPlan;
use sparse_tuning::cost::{count_flops, count_params};
use sparse_tuning::data::{noise_image, synth_dataset};
use sparse_tuning::engine::{evaluate_with, freeze_parameters, total_steps, TrainConfig, Trainer};
use sparse_tuning::sparsify::SparsifyPlan;
use sparse_tuning::vit::{infer, Model, ModelPlan, ViTConfig};
use tempfile::TempDir;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

/// Runs `sptn flops` on a config body; returns (gflops, wall time).
fn cli_gflops(body: &str) -> (f64, Duration) {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, body).unwrap();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_sptn"))
        .arg("flops")
        .arg(&cfg)
        .env("SPTN_LOG", "warn")
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let g = text
        .lines()
        .find_map(|l| l.strip_prefix("gflops="))
        .expect("gflops line")
        .parse()
        .unwrap();
    (g, elapsed)
}

fn ac1() -> Outcome {
    let (g, t) = cli_gflops("[sparsify]\nenabled = false\n[adapter]\nenabled = false\n");
    Outcome::new(
        within(g, 17.58, 0.02) && t < Duration::from_secs(1),
        format!(
            "ViT-B/16 {g:.4} GFLOPs (target 17.58 ±2%), {:.0} ms",
            t.as_secs_f64() * 1e3
        ),
    )
}

fn ac2() -> Outcome {
    let (g, t1) = cli_gflops("");
    let (g8, t2) = cli_gflops("[adapter]\nd = 8\n");
    let t = t1.max(t2);
    Outcome::new(
        within(g, 11.70, 0.03) && within(g8, 11.65, 0.03) && t < Duration::from_secs(1),
        format!(
            "default {g:.4} (target 11.70 ±3%), d=8 {g8:.4} (target 11.65 ±3%), slowest {:.0} ms",
            t.as_secs_f64() * 1e3
        ),
    )
}

fn with_d(d: usize) -> ModelPlan {
    let mut plan = ModelPlan::sparse_tuning();
    plan.adapter = Some(AdapterPlan {
        bottleneck: d,
        ..AdapterPlan::default()
    });
    plan
}

fn ac3() -> Outcome {
    let vit = ViTConfig::vit_b16(100);
    let total = count_params(&vit, &ModelPlan::plain()).unwrap().total as f64;
    let da = count_params(&vit, &ModelPlan::sparse_tuning())
        .unwrap()
        .trainable_excluding_head as f64;
    let mut pass = within(total, 85.8e6, 0.01) && within(da, 1.10e6, 0.02);
    let mut detail = format!(
        "total {:.2} M (85.8 ±1%), DA d=32 {:.3} M (1.10 ±2%)",
        total / 1e6,
        da / 1e6
    );
    for (d, published) in [(8, 0.29), (16, 0.56), (64, 2.18), (128, 4.35)] {
        let p = count_params(&vit, &with_d(d))
            .unwrap()
            .trainable_excluding_head as f64
            / 1e6;
        pass &= within(p, published, 0.05);
        detail += &format!("; d={d} {p:.3} M ({published})");
    }
    Outcome::new(pass, detail)
}

fn ac4() -> Outcome {
    let model = Model::<f32>::init(ViTConfig::vit_b16(100), ModelPlan::sparse_tuning(), 0).unwrap();
    let image = noise_image::<f32>(&[3, 224, 224], 1);
    let start = Instant::now();
    let (_, _, counts) = infer(&model, &image).unwrap();
    let t = start.elapsed();
    let want = vec![197, 197, 197, 140, 140, 140, 100, 100, 100, 72, 72, 72];
    Outcome::new(
        counts == want && t < Duration::from_secs(1),
        format!("counts {counts:?}, forward {:.0} ms", t.as_secs_f64() * 1e3),
    )
}

/// Runs a panicking check and converts the result to an outcome.
fn guarded(what: &str, f: impl FnOnce()) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => Outcome::new(true, what.to_string()),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("{what}: {msg}"))
        }
    }
}

fn ac5() -> Outcome {
    guarded(
        &format!(
            "{} seeded inputs per operator: EViT merge/drop/argmax, DynamicViT, ToMe",
            oracle::CASES
        ),
        || {
            oracle::evit_merge_matches_exhaustive_selection();
            oracle::evit_drop_and_argmax_match_exhaustive_selection();
            oracle::dynamicvit_matches_exhaustive_selection();
            oracle::tome_matches_exhaustive_matching();
        },
    )
}

fn ac6() -> Outcome {
    let plan = ModelPlan {
        sparsify: Some(SparsifyPlan {
            positions: vec![1],
            keep_rate: 0.5,
            ..SparsifyPlan::default()
        }),
        adapter: Some(AdapterPlan {
            bottleneck: 4,
            ..AdapterPlan::default()
        }),
    };
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..3 {
        let model = tiny_model(plan.clone(), seed);
        let (n, w) = finite_difference_check(
            &model,
            &tiny_image(seed + 10),
            seed as usize % 3,
            1e-6,
            1e-5,
        );
        entries += n;
        worst = worst.max(w.map_or(f64::INFINITY, |w| w.rel));
    }
    Outcome::new(
        entries > 0 && worst <= 1e-4,
        format!(
            "{entries} trainable entries over 3 seeds, worst relative error {worst:.2e} (≤ 1e-4)"
        ),
    )
}

fn ac7() -> Outcome {
    guarded(
        "100 steps: frozen checksum unchanged, changed set = adapter/head names",
        || contracts::freezing_contract(100),
    )
}

fn ac8() -> Outcome {
    guarded("W_up = 0: logits match the adapter-free network within 1e-6 (3 variants, with and without sparsification)", || {
        contracts::zero_up_projection_is_identity()
    })
}

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 4,
        channels: 3,
        embed_dim: 64,
        num_heads: 4,
        num_layers: 6,
        ffn_hidden: 256,
        num_classes: 4,
    }
}

fn tiny_plan(r: f64) -> ModelPlan {
    let mut plan = ModelPlan::sparse_tuning_for(6);
    if let Some(s) = plan.sparsify.as_mut() {
        s.keep_rate = r;
    }
    plan
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        base_lr: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    }
}

/// Fastest of `epochs` training epochs at keep rate `r`.
fn epoch_seconds(r: f64, epochs: usize) -> f64 {
    let data = synth_dataset(4, 400, 7, 3, 32).unwrap();
    let mut model = Model::<f32>::init(tiny_vit(), tiny_plan(r), 0).unwrap();
    freeze_parameters(&mut model.params);
    let cfg = tiny_train_config(epochs);
    let mut trainer = Trainer::new(
        cfg.clone(),
        &model,
        total_steps(epochs, 400, cfg.batch_size),
    )
    .unwrap();
    (1..=epochs)
        .map(|e| {
            let start = Instant::now();
            trainer.train_epoch(&mut model, &data, e).unwrap();
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn ac9() -> Outcome {
    const MAX_EPOCHS: usize = 30;
    let all = synth_dataset(4, 500, 7, 3, 32).unwrap();
    let (train, eval) = all.split(400);
    let mut model = Model::<f32>::init(tiny_vit(), tiny_plan(0.7), 0).unwrap();
    freeze_parameters(&mut model.params);
    let cfg = tiny_train_config(MAX_EPOCHS);
    let mut trainer = Trainer::new(
        cfg.clone(),
        &model,
        total_steps(MAX_EPOCHS, train.len(), cfg.batch_size),
    )
    .unwrap();
    let mut reached = None;
    let mut acc = 0.0;
    for epoch in 1..=MAX_EPOCHS {
        trainer.train_epoch(&mut model, &train, epoch).unwrap();
        acc = evaluate_with(&model, &eval, cfg.batch_size, 1).unwrap();
        if acc >= 0.9 {
            reached = Some(epoch);
            break;
        }
    }
    let sparse = epoch_seconds(0.7, 2);
    let dense = epoch_seconds(1.0, 2);
    let ratio = sparse / dense;
    Outcome::new(
        reached.is_some() && ratio < 0.9,
        format!(
            "eval accuracy {acc:.3} {}; epoch time r=0.7 {sparse:.2} s vs r=1.0 {dense:.2} s, ratio {ratio:.3} (< 0.9)",
            match reached {
                Some(e) => format!("at epoch {e}"),
                None => format!("after {MAX_EPOCHS} epochs"),
            }
        ),
    )
}

/// Spearman rank correlation (no ties expected).
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn ac10() -> Outcome {
    const IMAGES: usize = 2;
    const REPEATS: usize = 3;
    let vit = ViTConfig::vit_b16(100);
    let mut model = Model::<f32>::init(vit.clone(), ModelPlan::sparse_tuning(), 0).unwrap();
    let images: Vec<_> = (0..IMAGES)
        .map(|i| noise_image::<f32>(&[3, 224, 224], i as u64))
        .collect();
    let rates = [0.5, 0.7, 0.9, 1.0];
    let mut throughput = Vec::new();
    let mut gflops = Vec::new();
    for &r in &rates {
        model.plan = vit_b_plan(r);
        gflops.push(count_flops(&vit, &model.plan).unwrap().gflops);
        infer(&model, &images[0]).unwrap();
        let best = (0..REPEATS)
            .map(|_| {
                let start = Instant::now();
                for img in &images {
                    infer(&model, img).unwrap();
                }
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        throughput.push(IMAGES as f64 / best);
    }
    let monotone = throughput.windows(2).all(|w| w[0] > w[1]);
    let runtimes: Vec<f64> = throughput.iter().map(|t| 1.0 / t).collect();
    let rho = spearman(&runtimes, &gflops);
    let table: Vec<String> = rates
        .iter()
        .zip(&throughput)
        .zip(&gflops)
        .map(|((r, t), g)| format!("r={r}: {t:.2} img/s, {g:.2} GFLOPs"))
        .collect();
    Outcome::new(
        monotone,
        format!("{}; Spearman(runtime, FLOPs) = {rho:.2}", table.join(", ")),
    )
}

fn vit_b_plan(r: f64) -> ModelPlan {
    let mut plan = ModelPlan::sparse_tuning();
    if let Some(s) = plan.sparsify.as_mut() {
        s.keep_rate = r;
    }
    plan
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("AC1 FLOPs fidelity", ac1),
        ("AC2 sparse FLOPs fidelity", ac2),
        ("AC3 parameter fidelity", ac3),
        ("AC4 token schedule", ac4),
        ("AC5 sparsifier oracle equivalence", ac5),
        ("AC6 gradient correctness", ac6),
        ("AC7 freezing contract", ac7),
        ("AC8 zero-adapter identity", ac8),
        ("AC9 desk-scale learning", ac9),
        ("AC10 throughput monotonicity", ac10),
    ];
    let total = criteria.len();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let o = check();
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
    println!("all {total} criteria passed");
}
