//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see the lines; the test fails if any criterion fails.

#[path = "../../core/tests/common/conv_oracle.rs"]
mod conv_oracle;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use conv_oracle::{dense_operator, engine, Kind};
use fairfader_cli::{run_experiment, DataSource, ExperimentConfig, ExperimentSummary, SplitConfig};
use fairfader_core::data::SynthConfig;
use fairfader_core::fairness::accuracy_variance;
use fairfader_core::nets::decode_model;
use fairfader_core::gradcheck::{self, BATCHNORM_TOLERANCE, TOLERANCE};
use fairfader_core::training::{class_weights, read_loss_csv};
use fairfader_core::{ArchSpec, Classifier, Decoder, Discriminator, Encoder, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Ledger {
    lines: Vec<(String, bool)>,
}

impl Ledger {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let line = format!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((line, pass));
    }
}

fn variance_reproduction(l: &mut Ledger) {
    let rows = [
        ("SimpleCNN", [92.41, 91.56, 84.07, 90.93, 88.61], 11.26),
        ("SimpleCNN-WL", [89.84, 90.25, 83.64, 92.02, 88.27], 10.11),
        ("FaderCNN", [85.65, 86.08, 80.90, 87.66, 83.86], 6.66),
    ];
    let start = Instant::now();
    let mut pass = true;
    let mut got = Vec::new();
    for (name, acc, want) in rows {
        let v = accuracy_variance(&acc).unwrap();
        pass &= (v - want).abs() <= 0.01;
        got.push(format!("{name} {v:.4} (want {want})"));
    }
    let ratio = accuracy_variance(&rows[2].1).unwrap() / accuracy_variance(&rows[0].1).unwrap();
    pass &= ratio < 0.6;
    l.record(
        "1 variance metric",
        pass,
        format!("{}; fader/simple {ratio:.3}; {:?}", got.join(", "), start.elapsed()),
    );
}

fn gradient_suite(l: &mut Ledger) {
    let start = Instant::now();
    let reports = gradcheck::run(&gradcheck::standard_suite(20, 2024)).unwrap();
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(60) && !reports.is_empty();
    let mut worst = Vec::new();
    for r in &reports {
        let tol = if r.op.starts_with("batchnorm") { BATCHNORM_TOLERANCE } else { TOLERANCE };
        pass &= r.instances >= 20 && r.worst_rel_error < tol;
        worst.push(format!("{} {:.1e}", r.op, r.worst_rel_error));
    }
    l.record(
        "2 gradient checks",
        pass,
        format!("{} ops x 20 instances in {elapsed:.1?}; worst {}", reports.len(), worst.join(", ")),
    );
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut conv_err, mut deconv_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let o = rng.random_range(1..=4);
        let k: usize = rng.random_range(1..=4);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..k);
        let h = rng.random_range(k..=8);
        let w = rng.random_range(k..=8);
        let b: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = uniform(&[n, c, h, w], &mut rng);
        let wc = uniform(&[o, c, k, k], &mut rng);
        conv_err = conv_err.max(max_abs(
            &engine(&Kind::Conv, &x, &wc, &b, stride, pad),
            &conv_oracle::conv2d(&x, &wc, &b, stride, pad),
        ));
        let wd = uniform(&[c, o, k, k], &mut rng);
        deconv_err = deconv_err.max(max_abs(
            &engine(&Kind::Deconv, &x, &wd, &b, stride, pad),
            &conv_oracle::deconv2d(&x, &wd, &b, stride, pad),
        ));
    }
    let mut transpose_err = 0.0f64;
    let mut checked = 0;
    while checked < 10 {
        let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k: usize = rng.random_range(2..=4);
        let stride: usize = rng.random_range(1..=2);
        let pad = rng.random_range(0..k);
        let oh: usize = rng.random_range(1..=3);
        let h = ((oh - 1) * stride + k).saturating_sub(2 * pad);
        if h == 0 || h > 8 {
            continue;
        }
        checked += 1;
        let w = uniform(&[o, c, k, k], &mut rng);
        let (rows, cols, a) = dense_operator(&Kind::Conv, &[1, c, h, h], &w, stride, pad);
        let (_, _, at) = dense_operator(&Kind::Deconv, &[1, o, oh, oh], &w, stride, pad);
        for i in 0..rows {
            for j in 0..cols {
                transpose_err = transpose_err.max((a[i * cols + j] - at[j * rows + i]).abs());
            }
        }
    }
    l.record(
        "3 oracle equivalence",
        conv_err <= 1e-6 && deconv_err <= 1e-6 && transpose_err <= 1e-6,
        format!(
            "100 instances: conv {conv_err:.1e}, deconv {deconv_err:.1e}; 10 transposes {transpose_err:.1e} (tol 1e-6)"
        ),
    );
}

fn full_scale_shapes(l: &mut Ledger) {
    let spec = ArchSpec::full_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = Encoder::build(&spec, &mut rng).unwrap();
    let x = Tensor::from_fn(&[1, 3, 256, 256], |i| ((i % 97) as f32 / 48.0) - 1.0);
    let z = enc.encode(&x).unwrap();
    let dec = Decoder::build(&spec, spec.num_attrs, &mut rng).unwrap();
    let dis = Discriminator::build(&spec, &mut rng).unwrap();
    Classifier::build(&spec, &mut rng).unwrap();
    let first = dec.layer_input_channels()[0];
    let widths = dis.fc_widths();
    l.record(
        "4 full-scale shapes",
        z.shape() == [1, 512, 4, 4] && first == 517 && widths == (2048, 512, 5),
        format!("latent {:?}, decoder input {first}, discriminator FC {widths:?}", &z.shape()[1..]),
    );
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(5);
    cfg.arch = ArchSpec {
        input_size: 16,
        depth: 3,
        base_channels: 4,
        latent_channels: 16,
        dis_hidden: 16,
        classifier_channels: vec![8, 8, 8, 4],
        ..ArchSpec::desk()
    };
    cfg.data = DataSource::Synthetic(SynthConfig {
        n_samples: 300,
        image_size: 16,
        class_fractions: vec![0.4, 0.2, 0.15, 0.15, 0.1],
        seed: 5,
        ..SynthConfig::default()
    });
    cfg.split = SplitConfig {
        n_test_per_race: 5,
        val_fraction: 0.1,
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.eval_every = 5;
    cfg.classifier.epochs = 2;
    cfg.probe.epochs = 2;
    cfg
}

fn fairfader(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_fairfader")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// Every command, in order, writing under `out`.
fn pipeline(dir: &Path, out: &str) {
    let o = |s: &str| format!("{out}/{s}");
    fairfader(dir, &["gen-synth", "--config", "config.json", "--out", &o("data")]);
    fairfader(dir, &["train-fader", "--config", "config.json", "--out", &o("fader"), &o("data")]);
    fairfader(dir, &["train-ae", "--config", "config.json", "--out", &o("ae"), &o("data")]);
    let enc = |run: &str| {
        let marker: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join(o(run)).join("selected.json")).unwrap()).unwrap();
        o(&format!("{run}/{}/encoder.bin", marker["checkpoint"].as_str().unwrap()))
    };
    let (fader_enc, ae_enc) = (enc("fader"), enc("ae"));
    fairfader(dir, &["probe", "--config", "config.json", "--out", &o("probe"), &o("data"), &ae_enc]);
    fairfader(dir, &["train-clf", "--config", "config.json", "--out", &o("clf"), &o("data"), &fader_enc]);
    fairfader(dir, &["train-clf", "--weighted", "--config", "config.json", "--out", &o("wl"), &o("data"), &ae_enc]);
    let model = o("clf/classifier.bin");
    fairfader(dir, &["eval", "--config", "config.json", "--out", &o("eval"), &o("data"), &model, &fader_enc]);
    let preds = o("eval/predictions.csv");
    fairfader(dir, &["report", "--out", &o("report"), "--model-id", "FaderCNN", &preds]);
    fairfader(dir, &["run-experiment", "--config", "config.json", "--out", &o("experiment")]);
}

fn reductions_and_determinism(l: &mut Ledger) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut zero = tiny_config();
    zero.train.lambda_e = 0.0;
    fs::write(dir.join("zero.json"), zero.to_json()).unwrap();
    fairfader(dir, &["gen-synth", "--config", "zero.json", "--out", "zdata"]);
    fairfader(dir, &["train-fader", "--config", "zero.json", "--out", "zfader", "zdata"]);
    fairfader(dir, &["train-ae", "--conditioned", "--config", "zero.json", "--out", "zae", "zdata"]);
    let f = read_loss_csv(dir.join("zfader/loss.csv")).unwrap();
    let a = read_loss_csv(dir.join("zae/loss.csv")).unwrap();
    let same_losses = f.len() == a.len() && f.iter().zip(&a).all(|(x, y)| x.l_ae == y.l_ae && x.l_total == y.l_total);
    // the files differ only in their provenance header
    let snapshot = |run: &str, file: &str| fs::read(dir.join(run).join("ckpt_000030").join(file)).unwrap();
    let same_params = decode_model::<Encoder>(&snapshot("zfader", "encoder.bin")).unwrap().0
        == decode_model::<Encoder>(&snapshot("zae", "encoder.bin")).unwrap().0
        && decode_model::<Decoder>(&snapshot("zfader", "decoder.bin")).unwrap().0
            == decode_model::<Decoder>(&snapshot("zae", "decoder.bin")).unwrap().0;

    fs::write(dir.join("config.json"), tiny_config().to_json()).unwrap();
    pipeline(dir, "a");
    pipeline(dir, "b");
    let (ta, tb) = (tree(&dir.join("a")), tree(&dir.join("b")));
    let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    l.record(
        "7 reductions and determinism",
        same_losses && same_params && ta.len() == tb.len() && differing.is_empty(),
        format!(
            "lambda 0 fader vs conditioned AE: {} steps, identical losses {same_losses}, identical final encoder and decoder {same_params}; \
             rerun of every command: {} files, {} differ",
            f.len(),
            ta.len(),
            differing.len()
        ),
    );
}

fn weighted_loss(l: &mut Ledger) {
    let freqs = [0.88, 0.04, 0.035, 0.03, 0.015];
    let w = class_weights(&freqs).unwrap();
    let inv: Vec<f64> = freqs.iter().map(|f| 1.0 / f).collect();
    let mean_inv = inv.iter().sum::<f64>() / inv.len() as f64;
    let err = w.iter().zip(&inv).map(|(a, b)| (a - b / mean_inv).abs()).fold(0.0, f64::max);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    l.record(
        "8 weighted loss",
        err <= 1e-9 && (mean - 1.0).abs() <= 1e-9,
        format!("weights {w:.4?}, max error {err:.1e}, mean {mean}"),
    );
}

fn desk_experiment(l: &mut Ledger) {
    let seeds = 0..5u64;
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let runs: Vec<ExperimentSummary> = seeds
        .map(|s| {
            let cfg = ExperimentConfig::desk(s);
            let t = Instant::now();
            let r = run_experiment(&cfg, None, &tmp.path().join(format!("seed{s}")), None).unwrap();
            println!("seed {s}: {:.0?}", t.elapsed());
            r
        })
        .collect();
    let elapsed = start.elapsed();

    let var = |r: &ExperimentSummary, m: &str| r.model(m).unwrap().variance;
    for r in &runs {
        println!(
            "seed {}: fader dis {:.1}% (step {}), probe {:.1}%, variance simple {:.1} wl {:.1} fader {:.1}; dis series {:?}",
            r.seed,
            r.fader_dis_val_accuracy,
            r.fader_selected_step,
            r.vanilla_probe_accuracy,
            var(r, "SimpleCNN"),
            var(r, "SimpleCNN-WL"),
            var(r, "FaderCNN"),
            r.dis_val_series.iter().map(|(s, a)| format!("{s}:{a:.0}")).collect::<Vec<_>>()
        );
    }
    let invariant = runs
        .iter()
        .filter(|r| r.fader_dis_val_accuracy <= 40.0 && r.vanilla_probe_accuracy >= r.fader_dis_val_accuracy + 15.0)
        .count();
    l.record(
        "5a invariance",
        invariant == runs.len(),
        format!("{invariant}/5 seeds with fader discriminator <= 40% and probe >= 15 points higher"),
    );
    let fader_wins = runs.iter().filter(|r| var(r, "FaderCNN") < var(r, "SimpleCNN")).count();
    l.record("5b fader variance", fader_wins >= 4, format!("{fader_wins}/5 seeds FaderCNN < SimpleCNN (need 4)"));
    let wl_wins = runs.iter().filter(|r| var(r, "SimpleCNN-WL") <= var(r, "SimpleCNN")).count();
    l.record("5c weighted variance", wl_wins >= 3, format!("{wl_wins}/5 seeds SimpleCNN-WL <= SimpleCNN (need 3)"));
    l.record(
        "5 runtime",
        elapsed <= Duration::from_secs(30 * 60),
        format!("{elapsed:.0?} for 5 seeds (limit 30 min)"),
    );

    let dynamics = runs.iter().filter(|r| rise_then_decline(r)).count();
    l.record(
        "6 adversarial dynamics",
        dynamics >= 4,
        format!("{dynamics}/5 seeds rise above 60% then fall below it after warmup (need 4)"),
    );
}

/// Discriminator accuracy exceeds 60% at some checkpoint and a later
/// checkpoint past the warmup sits below 60%.
fn rise_then_decline(r: &ExperimentSummary) -> bool {
    let Some(peak) = r.dis_val_series.iter().position(|&(_, a)| a > 60.0) else {
        return false;
    };
    r.dis_val_series[peak..].iter().any(|&(s, a)| s >= r.warmup_steps && a < 60.0)
}

#[test]
fn acceptance() {
    let mut l = Ledger { lines: Vec::new() };
    variance_reproduction(&mut l);
    gradient_suite(&mut l);
    oracle_equivalence(&mut l);
    full_scale_shapes(&mut l);
    reductions_and_determinism(&mut l);
    weighted_loss(&mut l);
    desk_experiment(&mut l);
    println!("---");
    for (line, _) in &l.lines {
        println!("{line}");
    }
    let failed: Vec<&str> = l.lines.iter().filter(|(_, p)| !p).map(|(s, _)| s.as_str()).collect();
    assert!(failed.is_empty(), "failing criteria:\n{}", failed.join("\n"));
}
