//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcfbc::colorspace::{ColorSpace, ImageTensor};
use mcfbc::data::{generate_synthetic, load_dataset, load_manifest, Dataset, Split, SynthConfig};
use mcfbc::loss::{cross_entropy, focal_loss, FocalParams};
use mcfbc::metrics::{apcer_bpcer_acer, eer, Label, MetricsReport, ScoreSet};
use mcfbc::model::{FusionScheme, ModelConfig};
use mcfbc::oracle;
use mcfbc::train::{audit, score_split, train, AuditSize, Checkpoint, GradCheckOptions, PreparedSplit, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let results = oracle::run_all(0).expect("oracles run");
    let elapsed = start.elapsed();
    let summary: Vec<String> = results
        .iter()
        .filter(|r| r.name != "eer_sweep")
        .map(|r| format!("{} {:.1e}/{:.0e}", r.name, r.max_error, r.tolerance))
        .collect();
    let ok = results.iter().all(|r| r.passed) && elapsed < Duration::from_secs(10);
    outcome(ok, format!("{} in {:.2}s", summary.join(", "), elapsed.as_secs_f64()))
}

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut skipped = Vec::new();
    let mut ok = true;
    for seed in 0..5 {
        let r = audit(AuditSize::Small, seed, &GradCheckOptions::default()).expect("audit runs");
        worst = worst.max(r.max_rel_err);
        skipped.push(r.skipped_kinks.to_string());
        ok &= r.passed;
    }
    let elapsed = start.elapsed();
    let config = AuditSize::Small.model_config();
    let grid = config.backbone.output_size();
    let ok = ok && worst <= 1e-4 && elapsed < Duration::from_secs(60) && grid * grid == 9;
    outcome(
        ok,
        format!(
            "p=q={} k={} N={} max rel err {:.2e} <= 1e-4, skipped kinks per seed [{}], {:.1}s",
            config.backbone.out_channels(),
            config.fbc.k,
            grid * grid,
            worst,
            skipped.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let got: Vec<f64> = [0, 40, 80, 200].iter().map(|&e| cfg.lr_at(e)).collect();
    outcome(got == [0.01, 0.001, 1e-4, 1e-4], format!("lr at 0/40/80/200 = {got:?}"))
}

fn focal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ce_params = FocalParams { alpha: 1.0, gamma: 0.0 };
    let fl_params = FocalParams { alpha: 1.0, gamma: 1.0 };
    let (mut worst_ce, mut worst_ratio) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let probs = [p, 1.0 - p];
        let label = if rng.gen::<bool>() { Label::Bonafide } else { Label::Attack };
        let ce = cross_entropy(probs, label);
        worst_ce = worst_ce.max((focal_loss(probs, label, &ce_params).loss - ce).abs());
        let pt = probs[label.class_index()];
        let ratio = focal_loss(probs, label, &fl_params).loss / ce;
        worst_ratio = worst_ratio.max((ratio - (1.0 - pt)).abs());
    }
    outcome(
        worst_ce <= 1e-12 && worst_ratio <= 1e-12,
        format!("|FL(γ=0) − CE| max {worst_ce:.1e}, |FL/CE − (1−p_t)| max {worst_ratio:.1e}"),
    )
}

fn metrics() -> Outcome {
    let four = ScoreSet::from_scores(&[0.7, 0.4], &[0.6, 0.2]).unwrap();
    let r = apcer_bpcer_acer(&four, 0.5).unwrap();
    let six = ScoreSet::from_scores(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]).unwrap();
    let e = eer(&six).unwrap().eer;
    let mut identity = true;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let bona: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen()).collect();
        let attack: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen()).collect();
        let s = ScoreSet::from_scores(&bona, &attack).unwrap();
        let t = if rng.gen::<bool>() { Some(rng.gen()) } else { None };
        identity &= MetricsReport::compute(&s, t).unwrap().acer_identity_holds();
    }
    let ok = (r.apcer, r.bpcer, r.acer) == (0.5, 0.5, 0.5) && (e - 1.0 / 3.0).abs() <= 1e-9 && identity;
    outcome(
        ok,
        format!(
            "4-sample ({}, {}, {}), EER {:.12}, ACER identity on 200 reports: {identity}",
            r.apcer, r.bpcer, r.acer, e
        ),
    )
}

/// Settings shared by every arm of the ablation.
const ABLATION_EPOCHS: usize = 60;
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn ablation_config(seed: u64, color_spaces: [ColorSpace; 2], fusion: FusionScheme) -> TrainConfig {
    TrainConfig {
        epochs: ABLATION_EPOCHS,
        seed,
        model: ModelConfig {
            color_spaces,
            fusion,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn synthetic(seed: u64, dir: &std::path::Path) -> Dataset {
    let config = SynthConfig {
        seed,
        n_per_class: 200,
        size: 32,
        ..SynthConfig::default()
    };
    let report = generate_synthetic(&config, dir).expect("synthetic data");
    let manifest = load_manifest(&report.manifest).expect("manifest");
    load_dataset(&manifest, 32).expect("dataset")
}

fn test_accuracy(config: TrainConfig, data: &Dataset) -> (f64, Duration) {
    let start = Instant::now();
    let mut ckpt = Checkpoint::new(config).expect("config");
    train(&mut ckpt, data, |_, _| Ok(())).expect("training");
    let elapsed = start.elapsed();
    let model = ckpt.model();
    let test = PreparedSplit::new(&model.config, &data.split(Split::Test)).unwrap();
    let scores = score_split(&model, &test).unwrap();
    (MetricsReport::compute(&scores, Some(0.5)).unwrap().accuracy, elapsed)
}

fn ablation() -> Outcome {
    use ColorSpace::{Rgb, YCbCr};
    let arms = [
        ("rgb+ycbcr fbc", [Rgb, YCbCr], FusionScheme::Fbc),
        ("rgb fbc", [Rgb, Rgb], FusionScheme::Fbc),
        ("concatenation", [Rgb, YCbCr], FusionScheme::Concatenation),
    ];
    let mut sums = [0.0f64; 3];
    let mut slowest = Duration::ZERO;
    let mut per_seed = Vec::new();
    for seed in ABLATION_SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic(seed, dir.path());
        let mut row = Vec::new();
        for (i, (_, spaces, fusion)) in arms.iter().enumerate() {
            let (acc, t) = test_accuracy(ablation_config(seed, *spaces, *fusion), &data);
            sums[i] += acc;
            slowest = slowest.max(t);
            row.push(format!("{acc:.4}"));
        }
        per_seed.push(format!("seed {seed}: {}", row.join("/")));
    }
    let n = ABLATION_SEEDS.len() as f64;
    let [dual, single, concat] = sums.map(|s| s / n);
    let ok = dual >= single
        && dual >= concat - 0.02
        && single >= concat - 0.02
        && slowest < Duration::from_secs(600);
    outcome(
        ok,
        format!(
            "mean test acc {}={dual:.4}, {}={single:.4}, {}={concat:.4}; slowest run {:.0}s; [{}]",
            arms[0].0,
            arms[1].0,
            arms[2].0,
            slowest.as_secs_f64(),
            per_seed.join("; ")
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        seed: 9,
        n_per_class: 40,
        size: 16,
        ..SynthConfig::default()
    };
    let report = generate_synthetic(&config, dir.path()).unwrap();
    let data = load_dataset(&load_manifest(&report.manifest).unwrap(), 16).unwrap();
    let mut train_config = TrainConfig {
        epochs: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    train_config.model.backbone.input_size = 16;
    train_config.model.backbone.channels = vec![8, 16];
    let run = || {
        let mut ckpt = Checkpoint::new(train_config.clone()).unwrap();
        let logs = train(&mut ckpt, &data, |_, _| Ok(())).unwrap();
        (ckpt, serde_json::to_string(&logs).unwrap())
    };
    let (ckpt, log_a) = run();
    let (_, log_b) = run();
    let path = dir.path().join("model.fbc");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let test = PreparedSplit::new(&ckpt.config.model, &data.split(Split::Test)).unwrap();
    let bits = |c: &Checkpoint| -> Vec<u64> {
        score_split(&c.model(), &test)
            .unwrap()
            .samples()
            .iter()
            .map(|s| s.score.to_bits())
            .collect()
    };
    let (a, b) = (bits(&ckpt), bits(&loaded));
    outcome(
        log_a == log_b && a == b && !a.is_empty(),
        format!(
            "logs identical: {}, {} reloaded scores bitwise identical: {}",
            log_a == log_b,
            a.len(),
            a == b
        ),
    )
}

fn color_fidelity() -> Outcome {
    let n = 17;
    let lattice = |y: usize, x: usize| [(x % n) as f64 / 16.0, (x / n) as f64 / 16.0, y as f64 / 16.0];
    let rgb = ImageTensor::from_fn(ColorSpace::Rgb, n, n * n, lattice).unwrap();
    let ycc = rgb.convert(ColorSpace::YCbCr).unwrap();
    let back = ycc.convert(ColorSpace::Rgb).unwrap();
    let quantized = ImageTensor::new(ColorSpace::YCbCr, ImageTensor::from_rgb8(&ycc.to_rgb8()).tensor().clone()).unwrap();
    let back8 = quantized.convert(ColorSpace::Rgb).unwrap();
    let max_diff = |a: &ImageTensor, b: &ImageTensor| {
        a.tensor()
            .data
            .iter()
            .zip(&b.tensor().data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let (exact, eight) = (max_diff(&rgb, &back), max_diff(&rgb, &back8));
    outcome(
        exact <= 1e-6 && eight <= 2.0 / 255.0,
        format!(
            "17^3 lattice: float round trip {exact:.1e} <= 1e-6, 8-bit round trip {:.3}/255 <= 2/255",
            eight * 255.0
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 oracle suite", oracles),
        ("2 gradient audit", gradient_audit),
        ("3 schedule fidelity", schedule),
        ("4 focal loss", focal),
        ("5 metrics", metrics),
        ("6 ablation direction", ablation),
        ("7 determinism and persistence", determinism),
        ("8 color fidelity", color_fidelity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.passed) as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
