use astr::image::{Image, ScanMode};
use astr::metrics::{dataset_metrics, frame_metrics, measure_fps, MetricReport};
use astr::model::{clip_sample, Astr, AstrWeights, ModelConfig};
use astr::synthetic::{gen_synthetic, SyntheticSpec};
use astr::weights::NamedTensors;
use astr::{Config, Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(img: &Image) -> Tensor {
    Tensor::from_vec(&[img.height(), img.width()], img.pixels().iter().map(|&p| f64::from(p) / 255.0).collect())
        .unwrap()
}

#[test]
fn png_round_trip_preserves_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (frames, masks) = gen_synthetic(&SyntheticSpec::default(), 1).unwrap();
    let p = dir.path().join("f.png");
    frames[0].write_png(&p).unwrap();
    assert_eq!(Image::read_png(&p, ScanMode::Convex).unwrap(), frames[0]);

    let m = dir.path().join("m.png");
    masks[0].write_png(&m).unwrap();
    let back = Image::read_png(&m, ScanMode::Convex).unwrap();
    assert!(back.pixels().iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn missing_and_corrupt_png_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = Image::read_png(dir.path().join("absent.png"), ScanMode::Linear).unwrap_err();
    assert!(err.is_io());
    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"not a png").unwrap();
    assert!(Image::read_png(&bad, ScanMode::Linear).unwrap_err().is_io());
}

#[test]
fn saved_weights_reproduce_the_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default();
    let model = Astr::new(cfg.clone(), 21).unwrap();
    let path = dir.path().join("w.bin");
    model.weights.to_records().save(&path).unwrap();

    let loaded = AstrWeights::from_records(&cfg, &NamedTensors::load(&path).unwrap()).unwrap();
    let restored = Astr {
        config: cfg,
        weights: loaded,
    };
    let (frames, _) = gen_synthetic(&SyntheticSpec::default(), 4).unwrap();
    let clip = clip_sample(&frames, 2, 3).unwrap();
    assert_eq!(model.forward(&clip).unwrap(), restored.forward(&clip).unwrap());
}

#[test]
fn truncated_weight_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let bytes = Astr::new(ModelConfig::default(), 0).unwrap().weights.to_records().encode();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(NamedTensors::load(&path), Err(Error::WeightFormat(_))));
}

#[test]
fn config_file_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "seed = 3\n[loss]\nlambda = 0.3\n").unwrap();
    let err = Config::load(&p).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("lambda"), "{err}");
    assert!(Config::load(dir.path().join("none.toml")).unwrap_err().is_io());
}

#[test]
fn dataset_mean_matches_recomputation_over_100_frames() {
    let spec = SyntheticSpec {
        frames: 100,
        drift_x: 0.2,
        drift_y: 0.1,
        ..SyntheticSpec::default()
    };
    let (_, masks) = gen_synthetic(&spec, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut per_frame = Vec::new();
    let mut sums = [0.0f64; 5];
    for m in &masks {
        let gt = grid(m);
        let noisy = gt.data().iter().map(|&g| 0.8 * g + 0.2 * rng.random_range(0.0..1.0)).collect();
        let pred = Tensor::from_vec(gt.shape(), noisy).unwrap();
        let r = frame_metrics(&pred, &gt).unwrap();
        for (s, v) in sums.iter_mut().zip([r.mae, r.iou, r.dice, r.sen, r.spe]) {
            *s += v;
        }
        per_frame.push(r);
    }
    let agg = dataset_metrics(&per_frame).unwrap();
    let got = [agg.mae, agg.iou, agg.dice, agg.sen, agg.spe];
    for (g, s) in got.iter().zip(sums) {
        assert!((g - s / 100.0).abs() < 1e-12);
    }
}

#[test]
fn dataset_examples() {
    let one = MetricReport {
        dice: 0.4,
        ..MetricReport::default()
    };
    assert_eq!(dataset_metrics(&[one]).unwrap(), one);
    let two = MetricReport {
        dice: 0.6,
        ..MetricReport::default()
    };
    assert!((dataset_metrics(&[one, two]).unwrap().dice - 0.5).abs() < 1e-15);
    assert!(matches!(dataset_metrics(&[]), Err(Error::Parameter(_))));
}

#[test]
fn fps_of_model_is_positive() {
    let (frames, _) = gen_synthetic(&SyntheticSpec::default(), 6).unwrap();
    let clips = vec![clip_sample(&frames, 2, 3).unwrap()];
    let model = Astr::new(ModelConfig::default(), 6).unwrap();
    let report = measure_fps(|c| model.forward(c).map(|_| 1), &clips, 1, 3).unwrap();
    assert!(report.fps.is_finite() && report.fps > 0.0);
    assert_eq!(report.frames_per_pass, 1);
    assert_eq!(report.threads, 1);
}
