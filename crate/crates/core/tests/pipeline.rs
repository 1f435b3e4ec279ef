use nasbnn::binops::{ScaleMode, WeightPathConfig};
use nasbnn::checkpoint::Checkpoint;
use nasbnn::data::synthetic;
use nasbnn::evosearch::{evaluate, EvalData};
use nasbnn::harness::prepare_data;
use nasbnn::nn::BnMode;
use nasbnn::presets;
use nasbnn::searchspace::{largest, sample_uniform_seeded};
use nasbnn::supernet::{ExecMode, NetConfig, Supernet};
use nasbnn::trainer::{train, TrainConfig, Trainer};

fn tiny_cfg(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::tiny();
    cfg.epochs = epochs;
    cfg.max_steps_per_epoch = 3;
    cfg.eval_every = 0;
    cfg
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let cfg = tiny_cfg(2);
    let data = prepare_data(&cfg).unwrap();
    let space = presets::tiny_space();

    let mut a = Supernet::build(&space, cfg.net).unwrap();
    let mut ta = Trainer::new(cfg.clone()).unwrap();
    train(&mut a, &mut ta, &data.train, &data.val, None).unwrap();

    let mut b = Supernet::build(&space, cfg.net).unwrap();
    let mut tb = Trainer::new(cfg.clone()).unwrap();
    tb.run_epoch(&mut b, &data.train, None).unwrap();
    assert_eq!(tb.epoch, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("supernet.ckpt");
    tb.checkpoint(&b).save(&path).unwrap();
    let (mut b, mut tb) = Trainer::resume(cfg.clone(), &Checkpoint::load(&path).unwrap()).unwrap();
    train(&mut b, &mut tb, &data.train, &data.val, None).unwrap();

    assert_eq!(ta.step, tb.step);
    let ka: Vec<_> = a.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let kb: Vec<_> = b.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    assert!(ka == kb, "resumed weights differ");
}

#[test]
fn bundle_evaluation_equals_inherited_evaluation() {
    let cfg = tiny_cfg(1);
    let data = prepare_data(&cfg).unwrap();
    let space = presets::tiny_space();
    let mut net = Supernet::build(&space, cfg.net).unwrap();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    train(&mut net, &mut t, &data.train, &data.val, None).unwrap();
    let arch = sample_uniform_seeded(&space, 4, true).unwrap();
    let ed = EvalData {
        calib: &data.train,
        val: &data.val,
        batch_size: 16,
        calib_batches: 2,
        seed: 3,
    };

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("subnet.ckpt");
    Checkpoint::from_subnet(&net.extract(&arch).unwrap())
        .save(&path)
        .unwrap();
    let mut sub = Checkpoint::load(&path).unwrap().to_subnet().unwrap();
    let pinned = sub.net.active().cloned().unwrap();
    let from_bundle = evaluate(&mut sub.net, &pinned, &ed).unwrap();
    let inherited = evaluate(&mut net, &arch, &ed).unwrap();
    assert_eq!(from_bundle, inherited);
}

#[test]
fn binary_and_real_weights_agree_when_weights_are_signs() {
    let space = presets::tiny_space();
    let cfg = NetConfig {
        weight_path: WeightPathConfig {
            weight_norm: false,
            bi_transform: false,
            scale: ScaleMode::None,
        },
        ..NetConfig::default()
    };
    let mut net = Supernet::build(&space, cfg).unwrap();
    let mut map = std::collections::BTreeMap::new();
    let mut signed = 0;
    for (name, t) in net.named_tensors() {
        let binary = name.starts_with("stage") && name.ends_with(".weight");
        if binary {
            signed += 1;
        }
        map.insert(
            name,
            if binary {
                t.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
            } else {
                t.clone()
            },
        );
    }
    assert!(signed > 0);
    net.load_tensors(&map).unwrap();
    net.activate(&largest(&space)).unwrap();
    let d = synthetic(4, space.num_classes, space.input_resolution, 0.3, 8);
    let (x, _) = d.batch(&[0, 1, 2, 3], None);
    let f = net.forward(&x, ExecMode::Fwba, BnMode::Eval).unwrap();
    let b = net.forward(&x, ExecMode::Bwba, BnMode::Eval).unwrap();
    assert_eq!(f, b);
}

#[test]
fn checkpoint_rejects_foreign_architecture() {
    let space = presets::tiny_space();
    let net = Supernet::build(&space, NetConfig::default()).unwrap();
    let ck = Checkpoint::from_supernet(&net);
    let err = ck.check_arch(&presets::nas_bnn("c").unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("paper"));
}
