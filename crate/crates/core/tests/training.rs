use cpdsa::config::dataset_geometry;
use cpdsa::data::{make_synthetic, split_dataset, Dataset, SynthSpec, SynthTask};
use cpdsa::network::{preset, Model};
use cpdsa::neurons::{ALPHA2, BETA1, U_TH, V_TH};
use cpdsa::training::{
    convergence, evaluate, neuron_scalars, read_trace_jsonl, schedule_lr, train, train_with, Schedule, TrainConfig,
};

fn rate_pattern(n: usize, seed: u64) -> Dataset {
    let mut spec = SynthSpec::new(SynthTask::RatePattern, 4, 2, n, seed);
    spec.height = 4;
    spec.width = 4;
    make_synthetic(&spec).unwrap()
}

fn tiny_dense(d: &Dataset, seed: u64) -> Model {
    let (t, shape, classes) = dataset_geometry(d).unwrap();
    Model::new(preset("tiny-dense", t, &shape, classes, seed).unwrap()).unwrap()
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases_every_epoch() {
    let d = rate_pattern(200, 1);
    for seed in 0..3 {
        let mut model = tiny_dense(&d, seed);
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 32,
            ..config(5, seed)
        };
        let out = train(&mut model, &d, &cfg).unwrap();
        let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {losses:?}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = rate_pattern(40, 2);
    let mut model = tiny_dense(&d, 3);
    let before = model.params().clone();
    train(&mut model, &d, &TrainConfig { lr: 0.0, ..config(2, 0) }).unwrap();
    assert_eq!(model.params(), &before);
}

#[test]
fn out_of_range_scalars_are_clamped_by_a_step() {
    let d = rate_pattern(16, 2);
    let mut model = tiny_dense(&d, 0);
    let id = model.params().find("l2.neuron.scalars").unwrap();
    model.params_mut().values_mut(id)[ALPHA2] = 1.7;
    model.params_mut().values_mut(id)[BETA1] = -0.2;
    train(&mut model, &d, &TrainConfig { lr: 0.0, ..config(1, 0) }).unwrap();
    assert_eq!(model.params().values(id)[ALPHA2], 1.0);
    assert_eq!(model.params().values(id)[BETA1], 0.0);
}

#[test]
fn scalars_stay_in_range_after_every_step() {
    let d = rate_pattern(64, 4);
    let mut model = tiny_dense(&d, 1);
    let mut steps = 0;
    train_with(&mut model, &d, None, &TrainConfig { lr: 0.5, ..config(3, 1) }, |info| {
        steps += 1;
        for (name, s) in neuron_scalars(info.model) {
            assert!(cpdsa::neurons::scalars_in_range(&s), "{name}: {s:?}");
        }
        for n in info.model.neuron_layers() {
            let p = n.params(info.model.params());
            assert_eq!((p.v_th, p.u_th), (V_TH, U_TH));
        }
    })
    .unwrap();
    assert_eq!(steps, 3 * 4);
}

#[test]
fn untrained_model_is_near_chance_and_rates_are_bounded() {
    let d = rate_pattern(400, 5);
    let mut accs = Vec::new();
    for seed in 0..5 {
        let e = evaluate(&tiny_dense(&d, seed), &d, 50).unwrap();
        assert!(e.spike_rates.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(e.loss.is_finite());
        accs.push(e.accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((0.2..=0.8).contains(&mean), "{accs:?}");
}

#[test]
fn moving_bar_is_separable_by_nearest_centroid() {
    let spec = SynthSpec::new(SynthTask::MovingBar, 5, 10, 300, 0);
    let d = make_synthetic(&spec).unwrap();
    let (train_ids, test_ids) = split_dataset(&d.labels(), 0.7, 0).unwrap();
    let len = d.samples[0].frames.len();
    let mut centroids = vec![vec![0.0; len]; 10];
    let mut counts = [0usize; 10];
    for &i in &train_ids {
        let s = &d.samples[i];
        counts[s.label] += 1;
        for (c, v) in centroids[s.label].iter_mut().zip(s.frames.data()) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = test_ids
        .iter()
        .filter(|&&i| {
            let x = d.samples[i].frames.data();
            let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == d.samples[i].label
        })
        .count();
    assert!(correct as f64 / test_ids.len() as f64 > 0.5);
}

#[test]
fn trace_jsonl_round_trips_and_converges_under_decay() {
    let d = rate_pattern(80, 6);
    let mut model = tiny_dense(&d, 0);
    let cfg = TrainConfig {
        schedule: Schedule::Multistep { gamma: 0.1, milestones: vec![10, 20] },
        ..config(30, 0)
    };
    let out = train(&mut model, &d, &cfg).unwrap();
    let back = read_trace_jsonl(&out.to_jsonl().unwrap()).unwrap();
    assert_eq!(back, out.trace);
    assert_eq!(out.trace.len(), 30 * 2);
    for row in convergence(&out.trace, 10) {
        assert!(row.converged(), "{row:?}");
    }
    assert_eq!(out.metrics[25].lr, 0.001);
}

#[test]
fn early_stop_at_target_accuracy() {
    let d = rate_pattern(200, 1);
    let mut model = tiny_dense(&d, 0);
    let out = train(&mut model, &d, &TrainConfig { target_accuracy: Some(0.5), ..config(20, 0) }).unwrap();
    assert!(out.metrics.len() < 20);
    assert!(out.final_train_accuracy().unwrap() >= 0.5);
}

#[test]
fn schedules_at_boundaries() {
    let step = Schedule::Step { gamma: 0.1, period: 40 };
    let multi = Schedule::Multistep { gamma: 0.1, milestones: vec![60, 80] };
    let at = |s: &Schedule| [0, 39, 40, 59, 60, 80].map(|e| schedule_lr(0.1, s, e));
    assert_eq!(at(&step), [0.1, 0.1, 0.01, 0.01, 0.01, 0.001]);
    assert_eq!(at(&multi), [0.1, 0.1, 0.1, 0.1, 0.01, 0.001]);
}

#[test]
fn invalid_training_configs_are_rejected() {
    let d = rate_pattern(8, 0);
    let mut model = tiny_dense(&d, 0);
    for bad in [
        TrainConfig { lr: -1.0, ..config(1, 0) },
        TrainConfig { batch_size: 0, ..config(1, 0) },
        TrainConfig { momentum: 1.0, ..config(1, 0) },
        TrainConfig { clamp: cpdsa::training::ClampMode::Sigmoid, ..config(1, 0) },
    ] {
        assert!(matches!(train(&mut model, &d, &bad), Err(cpdsa::Error::Config(_))));
    }
}
