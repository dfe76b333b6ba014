use graftnet::data::{synth_dataset, Dataset};
use graftnet::heads::BatchLabels;
use graftnet::layers::Mode;
use graftnet::model::{Ablation, LossTerms};
use graftnet::optim::{lr_at_epoch, sgd_step, LrGroup, SgdConfig};
use graftnet::train::{load_checkpoint, save_checkpoint, train_epoch, AugmentConfig, TrainConfig, TrainState};
use graftnet::{GraftedNet, GraftedNetConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data() -> Dataset {
    synth_dataset(4, 4, 2, 5).unwrap()
}

fn tiny_net(classes: usize, seed: u64) -> GraftedNet<f32> {
    let mut net = GraftedNet::build(GraftedNetConfig::tiny(classes)).unwrap();
    net.init_params(seed, None).unwrap();
    net
}

fn tiny_train_cfg() -> TrainConfig {
    let mut cfg = TrainConfig {
        augment: AugmentConfig {
            target_hw: graftnet::blocks::Arch::tiny().input_hw,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.sgd.batch_size = 4;
    cfg.sgd.base_lr_pretrained = 0.002;
    cfg.sgd.base_lr_fresh = 0.02;
    cfg
}

fn weight_bytes(net: &GraftedNet<f32>) -> Vec<u8> {
    net.save_weights().unwrap().to_bytes()
}

#[test]
fn resume_is_bit_exact() {
    let data = small_data();
    let cfg = tiny_train_cfg();

    let mut straight = tiny_net(4, 11);
    let mut state = TrainState::new(3);
    for _ in 0..3 {
        train_epoch(&mut straight, &mut state, &data, &cfg).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let mut first = tiny_net(4, 11);
    let mut first_state = TrainState::new(3);
    train_epoch(&mut first, &mut first_state, &data, &cfg).unwrap();
    save_checkpoint(dir.path(), &first, &first_state).unwrap();
    drop(first);

    let mut resumed = GraftedNet::build(GraftedNetConfig::tiny(4)).unwrap();
    let mut resumed_state = load_checkpoint(dir.path(), &mut resumed).unwrap();
    assert_eq!(resumed_state, first_state);
    for _ in 0..2 {
        train_epoch(&mut resumed, &mut resumed_state, &data, &cfg).unwrap();
    }
    assert_eq!(resumed_state.history, state.history);
    assert_eq!(weight_bytes(&resumed), weight_bytes(&straight));
    assert_eq!(
        resumed_state.to_archive(&resumed).unwrap().to_bytes(),
        state.to_archive(&straight).unwrap().to_bytes()
    );
}

#[test]
fn same_seed_same_trajectory() {
    let data = small_data();
    let cfg = tiny_train_cfg();
    let run = || {
        let mut net = tiny_net(4, 2);
        let mut state = TrainState::new(9);
        for _ in 0..2 {
            train_epoch(&mut net, &mut state, &data, &cfg).unwrap();
        }
        (state.history, weight_bytes(&net))
    };
    assert_eq!(run(), run());
}

#[test]
fn groups_receive_their_own_learning_rate() {
    let mut net = GraftedNet::<f64>::build(GraftedNetConfig::tiny(3)).unwrap();
    net.init_params(0, None).unwrap();
    let names = net.param_names();
    let cfg = SgdConfig {
        weight_decay: 0.0,
        ..SgdConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for epoch in [0, 39, 40, 59, 60, 79] {
        let (lp, lf) = lr_at_epoch(epoch, &cfg).unwrap();
        let mut before = Vec::new();
        for name in &names {
            let p = net.param_mut(name).unwrap();
            let g = Tensor::from_fn(p.shape(), |_| rng.gen_range(-1.0..1.0));
            p.grad = g.clone();
            p.momentum.fill(0.0);
            before.push((p.value.clone(), g));
        }
        sgd_step(net.parameters_mut(), lp, lf, &cfg);
        for (name, (old, g)) in names.iter().zip(&before) {
            let p = net.param_mut(name).unwrap();
            // The accompanying branch's classifier trains with its branch.
            let pretrained =
                name.starts_with("rootstock.") || name.starts_with("accompanying.") || name.starts_with("objective.acc.");
            let expected_group = if pretrained { LrGroup::Pretrained } else { LrGroup::Fresh };
            assert_eq!(p.group, expected_group, "{name}");
            let lr = if pretrained { lp } else { lf };
            for ((w, w0), gi) in p.value.data().iter().zip(old.data()).zip(g.data()) {
                assert_eq!(*w, w0 - lr * gi, "{name} at epoch {epoch}");
            }
        }
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = small_data();
    let mut cfg = tiny_train_cfg();
    cfg.sgd.base_lr_pretrained = 0.0;
    cfg.sgd.base_lr_fresh = 0.0;
    let mut net = tiny_net(4, 1);
    let before: Vec<Tensor<f32>> = net.param_names().iter().map(|n| net.param_mut(n).unwrap().value.clone()).collect();
    let mut state = TrainState::new(0);
    train_epoch(&mut net, &mut state, &data, &cfg).unwrap();
    for (name, old) in net.param_names().iter().zip(&before) {
        assert_eq!(&net.param_mut(name).unwrap().value, old, "{name}");
    }
}

fn grads(net: &mut GraftedNet<f64>, prefix: &str) -> Vec<(String, Tensor<f64>)> {
    net.param_names()
        .into_iter()
        .filter(|n| n.starts_with(prefix))
        .map(|n| {
            let g = net.param_mut(&n).unwrap().grad.clone();
            (n, g)
        })
        .collect()
}

#[test]
fn rootstock_gradient_is_sum_of_both_paths() {
    let mut net = GraftedNet::<f64>::build(GraftedNetConfig::tiny(3)).unwrap();
    net.init_params(4, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = net.config.arch.input_hw;
    let x = Tensor::<f64>::from_fn(&[3, 3, h, w], |_| rng.gen_range(-1.0..1.0));
    let y = BatchLabels::new(vec![0, 1, 2], 3).unwrap();
    let mut run = |terms: LossTerms| {
        net.zero_grads();
        net.train_batch(&x, &y, terms).unwrap();
        (grads(&mut net, "rootstock."), grads(&mut net, "scion."), grads(&mut net, "accompanying."))
    };
    let (all, _, _) = run(LossTerms::ALL);
    let (joint, _, acc_under_joint) = run(LossTerms {
        joint: true,
        accompanying: false,
    });
    let (acc, scion_under_acc, _) = run(LossTerms {
        joint: false,
        accompanying: true,
    });
    for (((name, a), (_, j)), (_, c)) in all.iter().zip(&joint).zip(&acc) {
        for ((a, j), c) in a.data().iter().zip(j.data()).zip(c.data()) {
            assert!((a - (j + c)).abs() <= 1e-6 * a.abs().max(1.0), "{name}: {a} vs {j} + {c}");
        }
    }
    // Each path leaves the other branch untouched.
    assert!(scion_under_acc.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
    assert!(acc_under_joint.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
    // And both paths actually reach the rootstock.
    let norm = |gs: &[(String, Tensor<f64>)]| gs.iter().flat_map(|(_, g)| g.data().to_vec()).map(|v| v * v).sum::<f64>();
    assert!(norm(&joint) > 0.0 && norm(&acc) > 0.0);
}

#[test]
fn without_accompanying_nothing_of_it_exists() {
    let data = small_data();
    let cfg = Ablation::NoAccompanying.apply(GraftedNetConfig::tiny(4));
    let mut net = GraftedNet::<f32>::build(cfg).unwrap();
    net.init_params(0, None).unwrap();
    assert!(net.accompanying.is_none());
    assert_eq!(net.count_params(&["accompanying"]), 0);
    assert!(net.param_names().iter().all(|n| !n.starts_with("accompanying") && n != "objective.acc.weight"));
    let mut state = TrainState::new(0);
    let stats = train_epoch(&mut net, &mut state, &data, &tiny_train_cfg()).unwrap();
    assert_eq!(stats.accompanying, None);
}

#[test]
fn stripping_keeps_features_and_round_trips() {
    let mut net = tiny_net(5, 6);
    let data = small_data();
    let mut state = TrainState::new(0);
    let mut cfg = tiny_train_cfg();
    cfg.sgd.batch_size = 8;
    let mut net4 = tiny_net(4, 6);
    train_epoch(&mut net4, &mut state, &data, &cfg).unwrap();
    for net in [&mut net, &mut net4] {
        let (h, w) = net.config.arch.input_hw;
        let x = Tensor::<f32>::from_fn(&[2, 3, h, w], |i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5);
        let before = net.features(&x).unwrap();
        let mut stripped = net.clone().strip_for_inference();
        assert!(stripped.accompanying.is_none() && stripped.heads.classifiers.is_empty());
        assert_eq!(stripped.features(&x).unwrap(), before);

        let archive = stripped.save_weights().unwrap();
        let mut inference_cfg = net.config.clone();
        inference_cfg.with_objective = false;
        inference_cfg.with_accompanying = false;
        let mut reloaded = GraftedNet::<f32>::build(inference_cfg).unwrap();
        reloaded.load_weights(&archive).unwrap();
        assert_eq!(reloaded.features(&x).unwrap(), before);
        // A full archive does not silently load into an inference build.
        assert!(reloaded.load_weights(&net.save_weights().unwrap()).is_err());
    }
}

#[test]
fn he_initialisation_statistics() {
    let mut net = GraftedNet::<f32>::build(GraftedNetConfig::new(751)).unwrap();
    net.init_params(0, None).unwrap();
    let mut checked = 0;
    for name in net.param_names() {
        let p = net.param_mut(&name).unwrap();
        let d = p.value.data();
        if name.ends_with(".weight") && p.value.rank() >= 2 && d.len() >= 50_000 {
            let fan_in = d.len() / p.shape()[0];
            let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
            let expected = 2.0 / fan_in as f64;
            assert!((var / expected - 1.0).abs() < 0.05, "{name}: variance {var} vs {expected}");
            assert!(mean.abs() < 4.0 * (expected / d.len() as f64).sqrt(), "{name}: mean {mean}");
            checked += 1;
        } else if p.value.rank() == 1 && !p.decay && name.ends_with(".weight") {
            assert!(d.iter().all(|&v| v == 1.0), "{name}: batch-norm scale");
        } else if p.value.rank() == 1 {
            assert!(d.iter().all(|&v| v == 0.0), "{name}: bias / shift");
        }
    }
    assert!(checked > 20);
}

#[test]
fn eval_mode_does_not_touch_running_statistics() {
    let mut net = tiny_net(3, 0);
    let (h, w) = net.config.arch.input_hw;
    let x = Tensor::<f32>::from_fn(&[2, 3, h, w], |i| (i % 13) as f32 / 13.0);
    let before = weight_bytes(&net);
    net.forward_taps(&x, Mode::Eval).unwrap();
    net.features(&x).unwrap();
    assert_eq!(weight_bytes(&net), before);
}
