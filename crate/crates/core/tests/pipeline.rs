use mcfbc::data::{generate_synthetic, load_dataset, load_manifest, Split, SynthConfig};
use mcfbc::fbc::{derive_transforms, fbc_encode, FbcParams, RawDictionary, DEFAULT_RIDGE};
use mcfbc::metrics::{MetricsReport, ScoreSet};
use mcfbc::model::{FusionScheme, ModelConfig};
use mcfbc::tensor::Matrix;
use mcfbc::train::{score_split, train, Checkpoint, ModelSelection, PreparedSplit, TrainConfig};

fn small_config(fusion: FusionScheme) -> TrainConfig {
    let mut model = ModelConfig {
        fusion,
        ..ModelConfig::default()
    };
    model.backbone.channels = vec![4, 8];
    model.backbone.input_size = 16;
    model.fbc.k = 8;
    TrainConfig {
        epochs: 4,
        batch_size: 8,
        seed: 2,
        model,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_data_trains_and_scores_for_every_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let report = generate_synthetic(
        &SynthConfig {
            seed: 6,
            n_per_class: 30,
            size: 16,
            ..SynthConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    let manifest = load_manifest(&report.manifest).unwrap();
    assert_eq!(manifest.count(Split::Train) + manifest.count(Split::Valid) + manifest.count(Split::Test), 60);
    let data = load_dataset(&manifest, 16).unwrap();

    for fusion in [
        FusionScheme::Fbc,
        FusionScheme::Concatenation,
        FusionScheme::MeanScoreFusion,
        FusionScheme::MaxScoreFusion,
    ] {
        let mut ckpt = Checkpoint::new(small_config(fusion)).unwrap();
        let logs = train(&mut ckpt, &data, |_, _| Ok(())).unwrap();
        assert_eq!(logs.len(), 4);
        assert!(logs.iter().all(|l| l.loss.is_finite()));

        let test = PreparedSplit::new(&ckpt.config.model, &data.split(Split::Test)).unwrap();
        let scores = score_split(&ckpt.model(), &test).unwrap();
        let report = MetricsReport::compute(&scores, None).unwrap();
        assert!(report.acer_identity_holds());

        let csv = dir.path().join(format!("{fusion:?}.csv"));
        scores.write_csv(&csv).unwrap();
        let back = ScoreSet::read_csv(&csv).unwrap();
        assert_eq!(MetricsReport::compute(&back, None).unwrap(), report);
    }
}

#[test]
fn early_stopping_halts_without_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let report = generate_synthetic(
        &SynthConfig {
            seed: 8,
            n_per_class: 30,
            size: 16,
            ..SynthConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    let data = load_dataset(&load_manifest(&report.manifest).unwrap(), 16).unwrap();
    let config = TrainConfig {
        epochs: 50,
        early_stopping_patience: Some(2),
        model_selection: ModelSelection::BestValidAcer,
        ..small_config(FusionScheme::Fbc)
    };
    let mut ckpt = Checkpoint::new(config).unwrap();
    let logs = train(&mut ckpt, &data, |_, _| Ok(())).unwrap();
    let best = ckpt.best.as_ref().expect("validation ran");
    assert!(logs.len() < 50);
    assert_eq!(logs.len(), best.epoch + 2);
    let min = logs.iter().filter_map(|l| l.valid_acer).fold(f64::INFINITY, f64::min);
    assert_eq!(best.valid_acer, min);
}

#[test]
fn default_ridge_stays_close_to_exact_bridge() {
    let raw = RawDictionary {
        u: vec![Matrix::from_vec(1, 1, vec![2.0])],
        v: vec![Matrix::from_vec(1, 1, vec![3.0])],
    };
    let (u, v) = derive_transforms(&raw, DEFAULT_RIDGE).unwrap();
    let params = FbcParams::new(u, v, 0.0, 1, 1).unwrap();
    let c = fbc_encode(&[1.0], &[1.0], &params).unwrap().code[0];
    assert!((c - 1.0 / 6.0).abs() < 1e-9);
}
