use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resd::autodiff::{Tape, Var};
use resd::checkpoint::{load_checkpoint, save_checkpoint};
use resd::data::gen_synthetic;
use resd::distill::{aggregate_teacher, aggregate_teacher_over, BranchOutputs, DistillMode, TEACHER_EPS};
use resd::snn::{rate_reference_grads, LossFn};
use resd::train::{compute_grads, evaluate, fit, load_datasets, train_step, Sgd, TrainConfig};
use resd::{Dataset, EncodedBatch, Model, Tensor};

fn cfg(extra: &[(&str, &str)]) -> TrainConfig {
    let mut pairs = vec![
        ("dataset", "synthetic"),
        ("model", "mlp"),
        ("T", "4"),
        ("epochs", "2"),
        ("batch_size", "16"),
        ("lr", "0.1"),
        ("hidden", "24,16"),
        ("classes", "3"),
        ("input_shape", "12"),
        ("train_per_class", "16"),
        ("test_per_class", "8"),
    ];
    pairs.extend_from_slice(extra);
    TrainConfig::from_pairs(&pairs).unwrap()
}

fn model(cfg: &TrainConfig, seed: u64) -> Model {
    Model::build(cfg, &cfg.input_shape, cfg.classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn first_batch(cfg: &TrainConfig) -> EncodedBatch {
    let (train, _) = load_datasets::<f64>(cfg).unwrap();
    let idx: Vec<usize> = (0..cfg.batch_size.min(train.len())).collect();
    let (x, y) = train.gather(&idx).unwrap();
    EncodedBatch::direct(&x, y, cfg.timesteps).unwrap()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn distillation_off_reduces_to_plain_rate_backprop() {
    let off = cfg(&[("distill_mode", "off")]);
    let m = model(&off, 1);
    assert_eq!(m.heads(), 1);
    let b = first_batch(&off);
    let (g_off, _) = compute_grads(&mut m.clone(), &b, &off).unwrap();

    let mut esd0 = off.clone();
    esd0.distill_mode = DistillMode::Esd;
    esd0.beta = 0.0;
    let (g_esd, _) = compute_grads(&mut m.clone(), &b, &esd0).unwrap();
    assert!(max_diff(&g_off, &g_esd) <= 1e-15);

    let labels = b.labels.clone();
    let ce = move |tape: &mut Tape<f64>, _: &[Var], logits: Var| {
        let c = tape.value(logits).dim(1);
        let mut coef = vec![0.0; labels.len() * c];
        for (i, &y) in labels.iter().enumerate() {
            coef[i * c + y] = -1.0 / labels.len() as f64;
        }
        let lp = tape.log_softmax(logits)?;
        tape.weighted_sum(lp, &coef)
    };
    let ce: &LossFn<'_, f64> = &ce;
    let plain = rate_reference_grads(&mut m.net.clone(), &b, ce).unwrap();
    let mut flat: Vec<Vec<f64>> = plain.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
    flat.push(plain.readout.0);
    flat.push(plain.readout.1);
    assert!(max_diff(&g_off, &flat) <= 1e-12);
}

#[test]
fn gradients_are_affine_in_beta() {
    let c = cfg(&[]);
    let m = model(&c, 2);
    assert_eq!(m.heads(), 2);
    let b = first_batch(&c);
    let grads = |beta: f64| {
        let mut c = c.clone();
        c.beta = beta;
        compute_grads(&mut m.clone(), &b, &c).unwrap().0
    };
    let (g0, g3, g1) = (grads(0.0), grads(0.3), grads(1.0));
    let scale = g1.iter().flatten().map(|v| v.abs()).fold(1.0, f64::max);
    for ((a, m), z) in g0.iter().flatten().zip(g3.iter().flatten()).zip(g1.iter().flatten()) {
        let predicted = a + 0.3 * (z - a);
        assert!((m - predicted).abs() <= 1e-10 * scale, "{m} vs {predicted}");
    }
}

#[test]
fn small_step_lowers_the_batch_loss() {
    let c = cfg(&[
        ("classes", "2"),
        ("spike_bn", "false"),
        ("momentum", "0"),
        ("weight_decay", "0"),
    ]);
    for seed in 0..3 {
        let mut m = model(&c, 10 + seed);
        let b = first_batch(&c);
        let before = compute_grads(&mut m.clone(), &b, &c).unwrap().1.loss.l_total;
        let mut opt = Sgd::new(&m, 0.0, 0.0);
        train_step(&mut m, &mut opt, &b, &c, 1e-3).unwrap();
        let after = compute_grads(&mut m.clone(), &b, &c).unwrap().1.loss.l_total;
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn identical_correct_heads_leave_only_cross_entropy() {
    let p = Tensor::new(&[2, 3], vec![0.7, 0.2, 0.1, 0.1, 0.6, 0.3]).unwrap();
    let out = BranchOutputs::from_probs(vec![p.clone(), p.clone(), p]).unwrap();
    let y = [0, 1];
    let t = aggregate_teacher(&out, &y, TEACHER_EPS).unwrap();
    let (esd, reg) = resd::distill::esd_loss(&out, &t, 0.1).unwrap();
    assert!(esd.abs() < 1e-7 && reg == 0.0, "{esd}");
    let l = resd::distill::total_loss(resd::distill::ce_loss(&out, &y).unwrap(), esd, 0.3);
    assert!((l.l_total - l.l_ce).abs() < 1e-7);
}

#[test]
fn shuffled_head_never_enters_teacher_for_samples_it_gets_wrong() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = cfg(&[("classes", "4"), ("hidden", "16,16,16")]);
    let m = model(&c, 3);
    let b = first_batch(&c);
    let mut tape = Tape::new();
    let mut mm = m.clone();
    let pass = resd::snn::spiking_forward(&mut mm.net, &b, resd::snn::ForwardOptions::training()).unwrap();
    let g = resd::snn::rate_backbone(&mut tape, &mm.net, &b.steps[0], &pass).unwrap();
    let mut logits = Vec::new();
    for (br, &p) in mm.branches.iter_mut().zip(&mm.net.branch_points) {
        let o = br
            .forward(&mut tape, g.layer_rates[p], resd::autodiff::BnMode::Eval)
            .unwrap();
        logits.push(tape.value(o.logits).clone());
    }
    logits.push(tape.value(g.logits).clone());
    // Corrupt head 0 by shuffling its rows across samples.
    let n = b.batch_size();
    let classes = c.classes;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let src = logits[0].data().to_vec();
    let shuffled: Vec<f64> = order
        .iter()
        .flat_map(|&i| src[i * classes..(i + 1) * classes].to_vec())
        .collect();
    logits[0] = Tensor::new(&[n, classes], shuffled).unwrap();

    let out = BranchOutputs::from_logits(logits).unwrap();
    let full = aggregate_teacher(&out, &b.labels, TEACHER_EPS).unwrap();
    let without = aggregate_teacher_over(&out, &b.labels, TEACHER_EPS, &(1..out.heads()).collect::<Vec<_>>()).unwrap();
    let mut wrong = 0;
    for i in 0..n {
        if resd::distill::argmax(out.row(0, i)) != b.labels[i] {
            wrong += 1;
            assert_eq!(full.q[i], without.q[i]);
            assert_eq!(full.reliable[i], without.reliable[i]);
        }
    }
    assert!(wrong > 0);
}

#[test]
fn memorized_set_is_scored_perfectly() {
    let c = cfg(&[
        ("classes", "2"),
        ("train_per_class", "5"),
        ("test_per_class", "0"),
        ("noise", "0.3"),
        ("batch_size", "10"),
        ("epochs", "30"),
        ("distill_mode", "off"),
    ]);
    let (train, _) = load_datasets::<f64>(&c).unwrap();
    assert_eq!(train.len(), 10);
    let mut m = model(&c, 0);
    fit(&mut m, &c, &train, &train).unwrap();
    assert_eq!(evaluate(&m, &train, c.timesteps, 4).unwrap().final_acc, 1.0);
}

#[test]
fn untrained_model_on_random_labels_is_at_chance() {
    let c = cfg(&[("classes", "2")]);
    let n = 4000;
    let base: Dataset = gen_synthetic(2, n / 2, &[12], 1.0, 3).unwrap();
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let ds = Dataset::new(base.inputs.clone(), labels, 2).unwrap();
    let acc = evaluate(&model(&c, 5), &ds, 2, 256).unwrap().final_acc;
    let sigma = (0.25 / n as f64).sqrt();
    assert!((acc - 0.5).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn dropping_branches_leaves_final_accuracy_unchanged() {
    let c = cfg(&[]);
    let (train, test) = load_datasets::<f64>(&c).unwrap();
    let mut m = model(&c, 6);
    fit(&mut m, &c, &train, &test).unwrap();
    let with = evaluate(&m, &test, c.timesteps, 8).unwrap();
    let without = evaluate(&m.without_branches(), &test, c.timesteps, 8).unwrap();
    assert_eq!(with.final_acc, without.final_acc);
    assert_eq!(with.branch_acc.len(), 1);
    assert!(without.branch_acc.is_empty());
}

#[test]
fn fixed_seed_runs_end_in_identical_parameters() {
    let c = cfg(&[("hflip", "false")]);
    let (train, test) = load_datasets::<f64>(&c).unwrap();
    let run = || {
        let mut m = model(&c, 9);
        let rec = fit(&mut m, &c, &train, &test).unwrap();
        (m, rec)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn conv_model_trains_in_both_gradient_modes() {
    for mode in ["rate", "bptt"] {
        let c = cfg(&[
            ("model", "conv"),
            ("channels", "4,6"),
            ("input_shape", "2,6,6"),
            ("T", "2"),
            ("epochs", "1"),
            ("mode", mode),
        ]);
        let (train, test) = load_datasets::<f64>(&c).unwrap();
        let mut m = model(&c, 1);
        let rec = fit(&mut m, &c, &train, &test).unwrap();
        assert_eq!(rec.iterations.len(), 3);
        assert!(rec.iterations.iter().all(|r| r.loss.l_total.is_finite()));
    }
}

#[test]
fn checkpoint_restores_the_model_exactly() {
    let c = cfg(&[
        ("model", "conv"),
        ("channels", "4,6"),
        ("input_shape", "2,6,6"),
        ("epochs", "1"),
    ]);
    let (train, test) = load_datasets::<f64>(&c).unwrap();
    let mut m = model(&c, 2);
    fit(&mut m, &c, &train, &test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&m, &path).unwrap();
    let back: Model = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
}

#[test]
fn single_precision_model_trains() {
    let c = cfg(&[("epochs", "1")]);
    let (train, test) = load_datasets::<f32>(&c).unwrap();
    let mut m = resd::Model32::build(&c, &c.input_shape, c.classes, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let rec = fit(&mut m, &c, &train, &test).unwrap();
    assert!(rec.iterations.iter().all(|r| r.loss.l_total.is_finite()));
}
