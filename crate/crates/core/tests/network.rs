use cpdsa::backprop::{gradient_check, random_problem, GradCheckOptions};
use cpdsa::network::{
    preset, readout_loss, tdbn_forward, ForwardOptions, LayerSpec, Model, ModelConfig, NeuronSpec, NeuronVariant,
    ParamRole, ParamStore, TdBn,
};
use cpdsa::neurons::{MU, PHI};
use cpdsa::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(time_steps: usize, input_shape: &[usize], layers: Vec<LayerSpec>) -> ModelConfig {
    ModelConfig {
        time_steps,
        input_shape: input_shape.to_vec(),
        classes: 2,
        seed: 0,
        surrogate_width: 1.0,
        layers,
    }
}

fn neuron(variant: NeuronVariant) -> LayerSpec {
    LayerSpec::Neuron(NeuronSpec::of(variant))
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
}

fn small_residual() -> ModelConfig {
    config(
        3,
        &[2, 4, 4],
        vec![
            LayerSpec::Conv3x3 { channels: 3, stride: 1 },
            LayerSpec::Tdbn { alpha_bn: 1.0 },
            LayerSpec::Neuron(NeuronSpec::cpdsa()),
            LayerSpec::ResidualBlock { channels: 3, stride: 1, neuron: NeuronSpec::cpdsa() },
            LayerSpec::ResidualBlock { channels: 4, stride: 2, neuron: NeuronSpec::cpdsa() },
            LayerSpec::AvgPool { size: 2 },
            LayerSpec::ClassifierHead,
        ],
    )
}

fn variant_stack(v: NeuronVariant) -> ModelConfig {
    config(
        4,
        &[5],
        vec![
            LayerSpec::Dense { units: 6 },
            LayerSpec::Tdbn { alpha_bn: 1.0 },
            neuron(v),
            LayerSpec::Dense { units: 4 },
            neuron(v),
            LayerSpec::ClassifierHead,
        ],
    )
}

#[test]
fn every_learnable_block_written_once() {
    let models = [
        preset("tiny-dense", 3, &[8], 3, 0).unwrap(),
        preset("tiny-conv", 2, &[2, 8, 8], 4, 0).unwrap(),
        small_residual(),
        variant_stack(NeuronVariant::LifHard),
    ];
    for cfg in models {
        let (model, input, labels) = random_problem(cfg, 2, 1).unwrap();
        let (logits, tape) = model.forward(&input, &ForwardOptions::train(0)).unwrap();
        let r = readout_loss(&logits, &labels).unwrap();
        let g = model.backward(&tape, &r.grad).unwrap();
        assert_eq!(g.write_counts().len(), model.params().len());
        for (block, &count) in model.params().blocks().iter().zip(g.write_counts()) {
            assert_eq!(count, 1, "block {} written {count} times", block.name);
        }
        assert!(g.all_finite());
    }
}

#[test]
fn gradients_check_on_every_neuron_variant() {
    let opts = GradCheckOptions::default();
    for v in [NeuronVariant::LifHard, NeuronVariant::LifSoft, NeuronVariant::Dsa, NeuronVariant::Cpdsa] {
        for seed in 0..2 {
            let (model, input, labels) = random_problem(variant_stack(v), 2, seed).unwrap();
            let report = gradient_check(&model, &input, &labels, &opts).unwrap();
            assert!(report.passed(), "{v:?} seed {seed}\n{}", report.to_text());
        }
    }
}

#[test]
fn gradients_check_through_conv_residual_and_pooling() {
    let (model, input, labels) = random_problem(small_residual(), 2, 3).unwrap();
    let report = gradient_check(&model, &input, &labels, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert!(report.blocks.iter().any(|b| b.name.contains("skip.conv")));
}

#[test]
fn identity_weights_single_step() {
    let cfg = config(1, &[2], vec![LayerSpec::Dense { units: 2 }, LayerSpec::Neuron(NeuronSpec::cpdsa()), LayerSpec::ClassifierHead]);
    let mut model = Model::new(cfg).unwrap();
    let eye = vec![1.0, 0.0, 0.0, 1.0];
    let store = model.params_mut();
    let w = store.find("l0.dense.weight").unwrap();
    store.values_mut(w).copy_from_slice(&eye);
    let h = store.find("l2.head.weight").unwrap();
    store.values_mut(h).copy_from_slice(&eye);
    // x = 3: u = 3, e = 1.5, v = 3 fires; u_w = 3, v_w = 1.5 >= 1 fires; s = 2.
    // x = 1: the enhanced branch alone fires; s = 1.
    let input = Tensor::from_vec(&[1, 2, 2], vec![3.0, 0.0, 1.0, 0.25]).unwrap();
    let (logits, _) = model.forward(&input, &ForwardOptions::eval()).unwrap();
    assert_eq!(logits.data(), &[2.0, 0.0, 1.0, 0.0]);
}

#[test]
fn zero_branch_residual_is_identity() {
    let plain = config(
        2,
        &[1, 4, 4],
        vec![
            LayerSpec::Conv3x3 { channels: 2, stride: 1 },
            LayerSpec::Tdbn { alpha_bn: 1.0 },
            LayerSpec::Neuron(NeuronSpec::cpdsa()),
            LayerSpec::ClassifierHead,
        ],
    );
    let mut with_block = plain.clone();
    with_block.layers.insert(3, LayerSpec::ResidualBlock { channels: 2, stride: 1, neuron: NeuronSpec::cpdsa() });
    let mut a = Model::new(with_block).unwrap();
    let mut b = Model::new(plain).unwrap();
    for block in a.params_mut().blocks_mut() {
        if block.name.starts_with("l3.") && block.role == ParamRole::Weight {
            block.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let copy = |from: &ParamStore, to: &mut ParamStore, src: &str, dst: &str| {
        let v = from.values(from.find(src).unwrap()).to_vec();
        let id = to.find(dst).unwrap();
        to.values_mut(id).copy_from_slice(&v);
    };
    let a_params = a.params().clone();
    copy(&a_params, b.params_mut(), "l4.head.weight", "l3.head.weight");
    copy(&a_params, b.params_mut(), "l4.head.bias", "l3.head.bias");
    let x = random_input(&[2, 3, 1, 4, 4], 9);
    for opts in [ForwardOptions::eval(), ForwardOptions::train(0)] {
        assert_eq!(a.forward(&x, &opts).unwrap().0, b.forward(&x, &opts).unwrap().0);
    }
}

#[test]
fn disabled_increments_match_dsa_bitwise() {
    let stack = |spec: NeuronSpec| {
        config(
            4,
            &[5],
            vec![
                LayerSpec::Dense { units: 6 },
                LayerSpec::Tdbn { alpha_bn: 1.0 },
                LayerSpec::Neuron(spec),
                LayerSpec::ClassifierHead,
            ],
        )
    };
    let dsa = Model::new(stack(NeuronSpec::of(NeuronVariant::Dsa))).unwrap();
    let mut enh = Model::new(stack(NeuronSpec { weaken: false, ..NeuronSpec::cpdsa() })).unwrap();
    let id = enh.params().find("l2.neuron.scalars").unwrap();
    enh.params_mut().values_mut(id)[MU] = 0.0;
    assert_eq!(enh.params().values(id), dsa.params().values(id));

    let x = random_input(&[4, 3, 5], 4);
    let labels = [0, 1, 1];
    let opts = ForwardOptions::train(0);
    let (la, ta) = dsa.forward(&x, &opts).unwrap();
    let (lb, tb) = enh.forward(&x, &opts).unwrap();
    assert_eq!(la, lb);
    let ga = dsa.backward(&ta, &readout_loss(&la, &labels).unwrap().grad).unwrap();
    let gb = enh.backward(&tb, &readout_loss(&lb, &labels).unwrap().grad).unwrap();
    for (i, block) in dsa.params().blocks().iter().enumerate() {
        let (a, b) = (ga.get(cpdsa::network::ParamId(i)), gb.get(cpdsa::network::ParamId(i)));
        if block.name.ends_with("neuron.scalars") {
            assert_eq!(a[..MU], b[..MU]);
            assert_eq!(a[PHI], b[PHI]);
        } else {
            assert_eq!(a, b, "{}", block.name);
        }
    }
}

#[test]
fn eval_forward_is_batch_equivariant() {
    let cfg = preset("tiny-conv", 3, &[2, 8, 8], 4, 5).unwrap();
    let model = Model::new(cfg).unwrap();
    let x = random_input(&[3, 4, 2, 8, 8], 2);
    let (full, _) = model.forward(&x, &ForwardOptions::eval()).unwrap();
    let per = 2 * 8 * 8;
    let mut perm = [2usize, 0, 3, 1];
    perm.reverse();
    let mut shuffled = vec![0.0; x.len()];
    for t in 0..3 {
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[(t * 4 + dst) * per..(t * 4 + dst + 1) * per].copy_from_slice(&x.step(t)[src * per..(src + 1) * per]);
        }
    }
    let (out, _) = model.forward(&Tensor::from_vec(&[3, 4, 2, 8, 8], shuffled).unwrap(), &ForwardOptions::eval()).unwrap();
    for t in 0..3 {
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(out.step(t)[dst * 4..dst * 4 + 4], full.step(t)[src * 4..src * 4 + 4]);
        }
    }
}

#[test]
fn zero_input_is_quiescent() {
    let cfg = config(5, &[4], vec![LayerSpec::Dense { units: 8 }, LayerSpec::Neuron(NeuronSpec::cpdsa()), LayerSpec::ClassifierHead]);
    let model = Model::new(cfg).unwrap();
    let (_, tape) = model.forward(&Tensor::zeros(&[5, 2, 4]), &ForwardOptions::eval()).unwrap();
    for nt in tape.neuron_tapes() {
        assert!(nt.records.iter().all(|r| r.spike() == 0.0 && r.v == 0.0 && r.v_w == 0.0));
    }
}

#[test]
fn model_json_round_trip() {
    let mut model = Model::new(small_residual()).unwrap();
    let x = random_input(&[3, 2, 2, 4, 4], 1);
    let (_, tape) = model.forward(&x, &ForwardOptions::train(0)).unwrap();
    model.update_running_stats(&tape).unwrap();
    let back = Model::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(back.digest(), model.digest());
    assert_eq!(back, model);
    let opts = ForwardOptions::eval();
    assert_eq!(back.forward(&x, &opts).unwrap().0, model.forward(&x, &opts).unwrap().0);
    let mut doc: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
    doc["format_version"] = 9.into();
    assert!(Model::from_json(&doc.to_string()).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        vec![LayerSpec::Dense { units: 2 }],
        vec![LayerSpec::Neuron(NeuronSpec::cpdsa()), LayerSpec::ClassifierHead],
        vec![LayerSpec::ClassifierHead, LayerSpec::ClassifierHead],
        vec![LayerSpec::Conv3x3 { channels: 2, stride: 1 }, LayerSpec::ClassifierHead],
    ];
    for layers in bad {
        assert!(config(2, &[4], layers).validate().is_err());
    }
    let mut one_class = config(2, &[4], vec![LayerSpec::ClassifierHead]);
    one_class.classes = 1;
    assert!(one_class.validate().is_err());
}

#[test]
fn wrong_input_shape_is_an_error() {
    let model = Model::new(preset("tiny-dense", 2, &[8], 2, 0).unwrap()).unwrap();
    assert!(model.forward(&Tensor::zeros(&[2, 1, 7]), &ForwardOptions::eval()).is_err());
    assert!(model.forward(&Tensor::zeros(&[3, 1, 8]), &ForwardOptions::eval()).is_err());
}

fn tdbn_setup(channels: usize) -> (ParamStore, TdBn) {
    let mut store = ParamStore::new();
    let gamma = store.add("g", ParamRole::BnScale, &[channels], vec![1.0; channels]);
    let beta = store.add("b", ParamRole::BnShift, &[channels], vec![0.0; channels]);
    (store, TdBn::new(gamma, beta, channels, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tdbn_normalises_to_threshold_scale(
        t in 1usize..4,
        b in 1usize..4,
        c in 1usize..4,
        hw in 1usize..4,
        scale in 0.5f64..10.0,
        shift in -5.0f64..5.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(t * b >= 2 && t * b * hw * hw >= 8);
        let (store, bn) = tdbn_setup(c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [t, b, c, hw, hw];
        let n: usize = shape.iter().product();
        let x = Tensor::from_vec(&shape, (0..n).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (y, _) = tdbn_forward(&bn, &store, &x, true).unwrap();
        let inner = hw * hw;
        for ch in 0..c {
            let vals: Vec<f64> = (0..t * b)
                .flat_map(|r| y.data()[(r * c + ch) * inner..(r * c + ch + 1) * inner].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            prop_assert!(m.abs() <= 1e-10);
            prop_assert!((sd - 0.5).abs() <= 1e-6);
        }
    }
}
