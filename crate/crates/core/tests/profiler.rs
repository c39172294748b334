use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resd::profiler::{affine_fit, emit_report, firing_rate_stats, measure_cost, parse_report};
use resd::snn::{spiking_forward, ForwardOptions};
use resd::train::{load_datasets, GradMode, TrainConfig};
use resd::{EncodedBatch, Model};

fn setup() -> (Model, EncodedBatch, TrainConfig) {
    let cfg = TrainConfig::from_pairs(&[
        ("dataset", "synthetic"),
        ("model", "conv"),
        ("T", "2"),
        ("epochs", "1"),
        ("batch_size", "4"),
        ("lr", "0.1"),
        ("channels", "4,6"),
        ("input_shape", "3,8,8"),
        ("classes", "4"),
        ("train_per_class", "2"),
        ("test_per_class", "1"),
    ])
    .unwrap();
    let (train, _) = load_datasets::<f64>(&cfg).unwrap();
    let (x, y) = train.gather(&[0, 1, 2, 3]).unwrap();
    let batch = EncodedBatch::direct(&x, y, 1).unwrap();
    let model = Model::build(&cfg, &[3, 8, 8], 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (model, batch, cfg)
}

#[test]
fn rate_cost_is_flat_and_unrolled_cost_is_affine() {
    let (model, batch, cfg) = setup();
    let snapshot = model.clone();
    let rate: Vec<usize> = [1, 2, 4, 8, 12]
        .iter()
        .map(|&t| {
            measure_cost(&model, &batch, &cfg, GradMode::Rate, t, 3)
                .unwrap()
                .tape_nodes
        })
        .collect();
    assert!(rate.windows(2).all(|w| w[0] == w[1]), "{rate:?}");

    let ts = [2.0, 4.0, 6.0, 8.0];
    let bptt: Vec<f64> = ts
        .iter()
        .map(|&t| {
            measure_cost(&model, &batch, &cfg, GradMode::Bptt, t as usize, 3)
                .unwrap()
                .tape_nodes as f64
        })
        .collect();
    let (_, slope, r2) = affine_fit(&ts, &bptt);
    assert!(slope > 0.0 && r2 > 0.999, "{bptt:?}");
    assert!(bptt.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(model, snapshot);
}

#[test]
fn emitted_report_parses_back() {
    let (model, batch, cfg) = setup();
    let r = measure_cost(&model, &batch, &cfg, GradMode::Bptt, 3, 3).unwrap();
    assert_eq!(r.firing.len(), 2);
    assert!(r.firing.iter().all(|l| l.len() == 3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cost.csv");
    emit_report(&r, &path).unwrap();
    let back = parse_report(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(measure_cost(&model, &batch, &cfg, GradMode::Rate, 2, 2).is_err());
}

#[test]
fn firing_matrix_matches_recorded_trains() {
    let (mut model, batch, _) = setup();
    let b = batch.with_timesteps(5).unwrap();
    let pass = spiking_forward(&mut model.net, &b, ForwardOptions::inference().recording()).unwrap();
    let stats = firing_rate_stats(&pass.trains);
    for (row, expect) in stats.matrix.iter().zip(&pass.firing) {
        for (a, e) in row.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }
    assert!((0.0..=1.0).contains(&stats.overall));
}
