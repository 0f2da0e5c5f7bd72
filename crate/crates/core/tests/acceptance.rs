//! Acceptance criteria. Runs as a plain binary (no libtest harness) so each
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fail.
//!
//! Criterion 8 needs a converted Indian Pines dataset: point
//! `HSIGSF_INDIAN_PINES` at its JSON header to run it, otherwise it is
//! reported as SKIP.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use common::*;
use hsi_gsf::autodiff::Tape;
use hsi_gsf::cli::{cmd_gradcheck, cmd_train, Cli, Command, ConfigPreset, GradcheckArgs};
use hsi_gsf::data::save_cube;
use hsi_gsf::gsf::{gsf_forward, GsfParams};
use hsi_gsf::metrics::{metrics_from_confusion, ConfusionMatrix, MetricsReport};
use hsi_gsf::model::{forward, init_params, ModelConfig};
use hsi_gsf::synth::{synthetic_scene, SynthSpec};
use hsi_gsf::train::{train_loop, TrainConfig};
use rand::Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!(
            "took {:.1} s, limit {:.0} s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ))
    }
}

fn train_args(data: &Path, out: &Path, extra: &[&str]) -> hsi_gsf::cli::TrainArgs {
    let mut args = vec![
        "hsigsf",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ];
    args.extend_from_slice(extra);
    match Cli::try_parse_from(args).expect("valid flags").command {
        Command::Train(a) => a,
        _ => unreachable!(),
    }
}

fn shape_ledger() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::standard(9);
    let params = init_params::<f32>(&config, 1).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let x = randn(&mut rng(1), &[30, 13, 13]).cast::<f32>();
    let t = forward(tape.constant(&x), &params.bind(&tape, false), &config)
        .map_err(|e| e.to_string())?;
    let mut got = vec![x.shape().to_vec()];
    for v in [
        t.conv3d,
        Some(t.merged),
        t.conv2d,
        Some(t.features),
        t.grouping,
        t.tokens,
        t.encoder_in,
        Some(t.logits),
    ] {
        got.push(v.map(|v| v.shape()).unwrap_or_default());
    }
    let want: Vec<Vec<usize>> = vec![
        vec![30, 13, 13],
        vec![8, 28, 11, 11],
        vec![224, 11, 11],
        vec![64, 9, 9],
        vec![81, 64],
        vec![81, 4],
        vec![4, 64],
        vec![5, 64],
        vec![1, 9],
    ];
    within(start.elapsed(), Duration::from_secs(1))?;
    let text = got
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" -> ");
    check(got == want, text)
}

fn gradient_verification() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 1..=5 {
        let args = GradcheckArgs {
            config: ConfigPreset::Tiny,
            seed,
            max_coords: None,
            corrupt_backward: false,
        };
        let report = cmd_gradcheck(&args, &mut Vec::new()).map_err(|e| e.to_string())?;
        let names: Vec<&str> = report.model_rows().map(|r| r.1.as_str()).collect();
        let params = init_params::<f64>(&ModelConfig::tiny(3), 0)
            .map_err(|e| e.to_string())?
            .names();
        if !names.contains(&"input") || params.iter().any(|p| !names.contains(&p.as_str())) {
            return Err(format!("seed {seed}: report does not cover every tensor"));
        }
        let max = report.model_rows().map(|r| r.2).fold(0.0, f64::max);
        worst = worst.max(max);
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    check(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 5 seeds (bound 1e-4)"),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(301);
    let mut conv = 0.0f64;
    for _ in 0..20 {
        let (c, o) = (r.random_range(1..=3), r.random_range(1..=3));
        let d = [
            r.random_range(3..=6),
            r.random_range(3..=6),
            r.random_range(3..=6),
        ];
        let k = [
            r.random_range(1..=3),
            r.random_range(1..=3),
            r.random_range(1..=3),
        ];
        let pad = [
            r.random_range(0..=1),
            r.random_range(0..=1),
            r.random_range(0..=1),
        ];
        let (x, w, b) = (
            randn(&mut r, &[c, d[0], d[1], d[2]]),
            randn(&mut r, &[o, c, k[0], k[1], k[2]]),
            randn(&mut r, &[o]),
        );
        let tape = Tape::new();
        let y = tape
            .constant(&x)
            .conv3d(tape.constant(&w), tape.constant(&b), pad)
            .map_err(|e| e.to_string())?;
        let (want, _) = conv3d_oracle(
            x.data(),
            [c, d[0], d[1], d[2]],
            w.data(),
            [o, c, k[0], k[1], k[2]],
            b.data(),
            pad,
        );
        conv = conv.max(max_abs_diff(&y.value(), &want));

        let pad2 = [pad[0], pad[1]];
        let (x, w) = (
            randn(&mut r, &[c, d[1] + 2, d[2] + 2]),
            randn(&mut r, &[o, c, k[1], k[2]]),
        );
        let y = tape
            .constant(&x)
            .conv2d(tape.constant(&w), tape.constant(&b), pad2)
            .map_err(|e| e.to_string())?;
        let (want, _) = conv2d_oracle(
            x.data(),
            [c, d[1] + 2, d[2] + 2],
            w.data(),
            [o, c, k[1], k[2]],
            b.data(),
            pad2,
        );
        conv = conv.max(max_abs_diff(&y.value(), &want));
    }
    let mut gsf = 0.0f64;
    for shape in [[8, 28, 11, 11], [4, 5, 3, 4], [2, 3, 2, 2]] {
        let x = randn(&mut r, &shape);
        let p = random_gsf(&mut r, shape[0], 0.5);
        let tape = Tape::new();
        let bound = p.clone_bound(&tape);
        let y = gsf_forward(tape.constant(&x), &bound).map_err(|e| e.to_string())?;
        gsf = gsf.max(max_abs_diff(&y.value(), &gsf_oracle(x.data(), shape, &p)));
    }
    let mut metrics = 0.0f64;
    for i in 0..100 {
        let c = 2 + i % 8;
        let counts = random_confusion(&mut r, c);
        let (oa, aa, kappa) = metrics_formula(&counts, c);
        let m = metrics_from_confusion(&ConfusionMatrix::from_counts(c, counts).unwrap())
            .map_err(|e| e.to_string())?;
        metrics = metrics
            .max((m.oa - oa).abs())
            .max((m.aa - aa).abs())
            .max((m.kappa_x100 - kappa).abs());
    }
    check(
        conv <= 1e-6 && gsf <= 1e-6 && metrics <= 1e-9,
        format!("conv {conv:.1e} (40 cases), gsf {gsf:.1e}, metrics {metrics:.1e} (100 matrices)"),
    )
}

trait Bind {
    fn clone_bound<'t>(&self, tape: &'t Tape<f64>) -> GsfParams<hsi_gsf::autodiff::Var<'t, f64>>;
}

impl Bind for GsfParams<hsi_gsf::Tensor<f64>> {
    fn clone_bound<'t>(&self, tape: &'t Tape<f64>) -> GsfParams<hsi_gsf::autodiff::Var<'t, f64>> {
        let c = |c: &hsi_gsf::model::Conv<hsi_gsf::Tensor<f64>>| hsi_gsf::model::Conv {
            kernel: tape.constant(&c.kernel),
            bias: tape.constant(&c.bias),
        };
        GsfParams {
            gate: [c(&self.gate[0]), c(&self.gate[1])],
            fuse: [c(&self.fuse[0]), c(&self.fuse[1])],
        }
    }
}

fn fixed_points() -> Outcome {
    let mut r = rng(401);
    let x = randn(&mut r, &[8, 28, 11, 11]);
    let tape = Tape::new();
    let y = gsf_forward(tape.constant(&x), &GsfParams::zeros(8).clone_bound(&tape))
        .map_err(|e| e.to_string())?;
    let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
    let gsf = max_abs_diff(&y.value(), &half);

    let config = ModelConfig {
        te_depth: 2,
        ..ModelConfig::standard(9)
    };
    let params = init_params::<f64>(&config, 402).map_err(|e| e.to_string())?;
    let t = forward(
        tape.constant(&randn(&mut r, &[30, 13, 13])),
        &params.bind(&tape, false),
        &config,
    )
    .map_err(|e| e.to_string())?;
    let a = t.grouping.expect("tokenizer enabled").value().to_vec();
    let columns = (0..4)
        .map(|j| ((0..81).map(|i| a[i * 4 + j]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let mut rows = 0.0f64;
    for head in t.attention.iter().flatten() {
        let v = head.value();
        for k in 0..5 {
            rows = rows.max((v[k * 5..k * 5 + 5].iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut kappa = 0.0f64;
    for c in 1..=9 {
        let mut m = ConfusionMatrix::new(c);
        for k in 0..c {
            for _ in 0..r.random_range(1..50) {
                m.add(k, k);
            }
        }
        kappa = kappa.max(
            (metrics_from_confusion(&m)
                .map_err(|e| e.to_string())?
                .kappa_x100
                - 100.0)
                .abs(),
        );
    }
    check(
        gsf <= 1e-6 && columns <= 1e-6 && rows <= 1e-6 && kappa == 0.0,
        format!("gsf {gsf:.1e}, tokenizer columns {columns:.1e}, attention rows {rows:.1e}, diagonal kappa off by {kappa}"),
    )
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let set = two_signature_set();
    let config = ModelConfig::tiny(2);
    let tc = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let history = with_threads(1, || {
        let mut p = init_params::<f32>(&config, tc.seed)?;
        train_loop(&mut p, &config, &set, &tc, |_| {})
    })
    .map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    let reached = history
        .iter()
        .find(|r| r.train_accuracy >= 0.99)
        .map(|r| r.epoch + 1);
    let best = history.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
    let detail = format!(
        "{} samples, best train accuracy {:.1}%, first >= 99% at epoch {}, {:.2} s on one thread",
        set.len(),
        100.0 * best,
        reached.map_or("-".into(), |e| e.to_string()),
        start.elapsed().as_secs_f64()
    );
    check(reached.is_some(), detail)
}

fn ablation_direction() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let (cube, labels) = synthetic_scene(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let data = save_cube(dir.path(), "scene", &cube, &labels).map_err(|e| e.to_string())?;
    // (case, 2D conv, 3D conv, GSF, TE, extra flags)
    let cases: [(usize, &str, &[&str]); 3] = [
        (4, "✓ ✓ × ✓", &["--no-gsf"]),
        (5, "✓ ✓ × ×", &["--no-gsf", "--no-te"]),
        (6, "✓ ✓ ✓ ✓", &[]),
    ];
    let mut table = Vec::new();
    for (case, marks, flags) in cases {
        let mut sum = [0.0f64; 3];
        for seed in 1..=5u64 {
            let out = dir.path().join(format!("case{case}-{seed}"));
            let s = seed.to_string();
            let mut extra = vec![
                "--config",
                "tiny",
                "--train-fraction",
                "0.2",
                "--epochs",
                "50",
                "--seed",
                &s,
            ];
            extra.extend_from_slice(flags);
            let report: MetricsReport = cmd_train(
                &train_args(&data, &out, &extra),
                &mut Vec::new(),
                &mut Vec::new(),
            )
            .map_err(|e| e.to_string())?
            .report;
            sum[0] += report.oa;
            sum[1] += report.aa;
            sum[2] += report.kappa_x100;
        }
        table.push((case, marks, sum.map(|v| v / 5.0)));
    }
    println!("      Cases | 2D Conv 3D Conv GSF TE | OA (%)  AA (%)  κ×100   (mean of 5 seeds, synthetic 4-class)");
    for (case, marks, [oa, aa, k]) in &table {
        let m: Vec<&str> = marks.split(' ').collect();
        println!(
            "      {case:>5} |    {}       {}     {}   {} | {oa:6.2}  {aa:6.2}  {k:6.2}",
            m[0], m[1], m[2], m[3]
        );
    }
    let (no_gsf, no_te, full) = (table[0].2[0], table[1].2[0], table[2].2[0]);
    check(
        full >= no_gsf && full >= no_te,
        format!("mean OA full {full:.2} vs no-GSF {no_gsf:.2} vs no-GSF/no-TE {no_te:.2}"),
    )
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let (cube, labels) = synthetic_scene(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let data = save_cube(dir.path(), "scene", &cube, &labels).map_err(|e| e.to_string())?;
    let flags = ["--config", "tiny", "--epochs", "10", "--seed", "5"];
    for run in ["a", "b"] {
        cmd_train(
            &train_args(&data, &dir.path().join(run), &flags),
            &mut Vec::new(),
            &mut Vec::new(),
        )
        .map_err(|e| e.to_string())?;
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    let read = |run: &str, f: &str| fs::read(dir.path().join(run).join(f)).unwrap();
    let json = read("a", "metrics.json") == read("b", "metrics.json");
    let ckpt = read("a", "model.ckpt") == read("b", "model.ckpt");
    check(
        json && ckpt,
        format!(
            "metrics.json identical: {json}, model.ckpt bitwise identical: {ckpt} ({} bytes)",
            read("a", "model.ckpt").len()
        ),
    )
}

fn indian_pines() -> Option<Outcome> {
    let header = std::env::var_os("HSIGSF_INDIAN_PINES")?;
    let start = Instant::now();
    let dir = TempDir::new().ok()?;
    let args = train_args(
        Path::new(&header),
        dir.path(),
        &["--train-fraction", "0.1", "--epochs", "200"],
    );
    Some((|| {
        let report = cmd_train(&args, &mut Vec::new(), &mut Vec::new())
            .map_err(|e| e.to_string())?
            .report;
        within(start.elapsed(), Duration::from_secs(3600))?;
        check(
            report.oa >= 90.0,
            format!(
                "OA {:.2}, AA {:.2}, κ×100 {:.2}",
                report.oa, report.aa, report.kappa_x100
            ),
        )
    })())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("shape ledger", shape_ledger),
        ("gradient verification", gradient_verification),
        ("oracle equivalence", oracle_equivalence),
        ("closed-form fixed points", fixed_points),
        ("overfit smoke test", overfit_smoke),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {}. {name} ({secs:.1} s): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL  {}. {name} ({secs:.1} s): {d}", i + 1);
            }
        }
    }
    match indian_pines() {
        None => println!("SKIP  8. Indian Pines OA >= 90%: set HSIGSF_INDIAN_PINES to a converted dataset header"),
        Some(Ok(d)) => println!("PASS  8. Indian Pines OA >= 90%: {d}"),
        Some(Err(d)) => {
            failed += 1;
            println!("FAIL  8. Indian Pines OA >= 90%: {d}");
        }
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
