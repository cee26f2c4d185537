use mobinc::arch::{build_inception, build_trunk, count_parameters, mob_inc, InceptionConfig, MobIncConfig};
use mobinc::data::{one_hot, Batch, Class};
use mobinc::graph::Gradients;
use mobinc::train::{train_step, Optimizer, OptimizerConfig};
use mobinc::{FreezePolicy, Graph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(n: usize, side: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn([n, side, side, 3], |_| rng.random_range(-1.0f32..1.0))
}

/// Parameter scalars counted layer by layer from the published MobileNetV2
/// schedule, the GoogLeNet 3a/3b filter counts and the head widths.
fn closed_form_parameter_count() -> usize {
    let bn = |c: usize| 2 * c;
    let mut total = 3 * 3 * 3 * 32 + bn(32);
    // (t, c, n, s) up to and including the 96-channel stage.
    let stages = [(1, 16, 1), (6, 24, 2), (6, 32, 3), (6, 64, 4), (6, 96, 3)];
    let mut cin = 32;
    for (t, c, n) in stages {
        for _ in 0..n {
            let hidden = cin * t;
            if t != 1 {
                total += cin * hidden + bn(hidden);
            }
            total += 9 * hidden + bn(hidden);
            total += hidden * c + bn(c);
            cin = c;
        }
    }
    let inception = |cin: usize, [a, r3, b, r5, c, p]: [usize; 6]| {
        (cin * a + a) + (cin * r3 + r3) + (9 * r3 * b + b) + (cin * r5 + r5) + (25 * r5 * c + c) + (cin * p + p)
    };
    total += inception(96, [64, 96, 128, 16, 32, 32]);
    total += inception(256, [128, 128, 192, 32, 96, 64]);
    total += 480 * 512 + 512;
    total += 512 * 4 + 4;
    total
}

#[test]
fn parameter_count_matches_closed_form() {
    let g = mob_inc(0).unwrap();
    assert_eq!(count_parameters(&g, false), closed_form_parameter_count());
    assert_eq!(480 * 512 + 512, 246_272);
}

#[test]
fn shapes_through_the_network() {
    let mut g = mob_inc(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let acts = g.forward(&random_input(2, 224, &mut rng), Mode::Train).unwrap();
    assert_eq!(acts.output().shape(), &[2, 4]);
    assert_eq!(acts.get("stem.relu").unwrap().shape(), &[2, 112, 112, 32]);
    assert_eq!(acts.get(g.trunk_boundary().unwrap()).unwrap().shape(), &[2, 14, 14, 96]);
    assert_eq!(acts.get("inception_1.concat").unwrap().shape(), &[2, 14, 14, 256]);
    assert_eq!(acts.get("inception_2.concat").unwrap().shape(), &[2, 14, 14, 480]);
    assert_eq!(acts.get("head.fc1").unwrap().shape(), &[2, 512]);

    let single = g.predict(&random_input(1, 224, &mut rng)).unwrap();
    assert_eq!(single.shape(), &[1, 4]);
}

#[test]
fn wrong_channel_count_is_rejected() {
    let g = mob_inc(0).unwrap();
    let err = g.predict(&Tensor::zeros([1, 224, 224, 1])).unwrap_err();
    assert!(err.to_string().contains("stem.conv"), "{err}");
}

#[test]
fn half_width_trunk() {
    let g = build_trunk(0.5, 0).unwrap();
    assert_eq!(g.output_shape(), &[1, 14, 14, 48]);
}

#[test]
fn inception_module_shapes() {
    for (cin, cfg, out) in [(96, InceptionConfig::MODULE_1, 256), (256, InceptionConfig::MODULE_2, 480)] {
        let g = build_inception(cin, &cfg, 0).unwrap();
        assert_eq!(g.output_shape(), &[1, 14, 14, out]);
        let y = g.predict(&Tensor::zeros([1, 9, 5, cin])).unwrap();
        assert_eq!(y.shape(), &[1, 9, 5, out]);
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = mob_inc(5).unwrap();
    let b = mob_inc(5).unwrap();
    let c = mob_inc(6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.topology_hash(), c.topology_hash());
}

/// Parameterized trunk layers in build order, from node names alone.
fn trunk_layer_names() -> Vec<String> {
    let mut names = vec!["stem.conv".to_string(), "stem.bn".to_string()];
    let blocks = [1, 2, 3, 4, 3];
    let mut i = 0;
    for (stage, n) in blocks.into_iter().enumerate() {
        for _ in 0..n {
            if stage > 0 {
                names.push(format!("block_{i}.expand"));
                names.push(format!("block_{i}.expand_bn"));
            }
            for l in ["depthwise", "depthwise_bn", "project", "project_bn"] {
                names.push(format!("block_{i}.{l}"));
            }
            i += 1;
        }
    }
    names
}

fn trainable_layers(g: &Graph) -> Vec<String> {
    g.nodes()
        .iter()
        .filter(|n| n.has_trainable())
        .map(|n| n.id.clone())
        .collect()
}

#[test]
fn freeze_policies_by_enumeration() {
    let trunk = trunk_layer_names();
    let all: Vec<String> = mob_inc(0)
        .unwrap()
        .nodes()
        .iter()
        .filter(|n| !n.op.params().is_empty())
        .map(|n| n.id.clone())
        .collect();
    let head: Vec<String> = all.iter().filter(|n| !trunk.contains(n)).cloned().collect();
    assert_eq!(all.len(), trunk.len() + head.len());

    for k in [0, 1, 6, 13] {
        let mut g = mob_inc(0).unwrap();
        g.apply_freeze(FreezePolicy::FreezeTrunkExceptLast(k)).unwrap();
        let mut want: Vec<String> = trunk[trunk.len() - k..].to_vec();
        want.extend(head.iter().cloned());
        assert_eq!(trainable_layers(&g), want, "k = {k}");
    }
    let mut g = mob_inc(0).unwrap();
    g.apply_freeze(FreezePolicy::FreezeTrunkExceptLast(6)).unwrap();
    assert!(trainable_layers(&g).iter().take(6).all(|n| n.starts_with("block_12.")));

    g.apply_freeze(FreezePolicy::TrainAll).unwrap();
    assert_eq!(count_parameters(&g, true), count_parameters(&g, false));
    g.apply_freeze(FreezePolicy::FreezeAllTrunk).unwrap();
    assert_eq!(trainable_layers(&g), head);
    assert!(count_parameters(&g, true) < count_parameters(&g, false));
}

fn snapshot(g: &Graph) -> Vec<(String, bool, Vec<u32>)> {
    g.params()
        .into_iter()
        .map(|p| (p.name, p.trainable, p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn freeze_contract_over_50_steps() {
    let mut g = mob_inc(2).unwrap();
    g.apply_freeze(FreezePolicy::FreezeTrunkExceptLast(6)).unwrap();
    let before = snapshot(&g);
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for step in 0..50 {
        let classes: Vec<Class> = (0..2).map(|_| Class::ALL[rng.random_range(0..4)]).collect();
        let batch = Batch {
            input: random_input(2, 224, &mut rng),
            labels: one_hot(&classes),
            classes,
        };
        train_step(&mut g, &mut opt, &batch, 0, step).unwrap();
    }
    let after = snapshot(&g);
    let (mut frozen, mut trained) = (0, 0);
    for ((name, trainable, a), (_, _, b)) in before.iter().zip(&after) {
        if *trainable {
            assert_ne!(a, b, "trainable `{name}` did not move");
            trained += 1;
        } else {
            assert_eq!(a, b, "frozen `{name}` moved");
            frozen += 1;
        }
    }
    assert!(frozen > 0 && trained > 0);
}

#[test]
fn fully_frozen_graph_has_no_gradients() {
    let mut g = build_trunk(1.0, 0).unwrap();
    for name in g.params().into_iter().map(|p| p.name).collect::<Vec<_>>() {
        g.set_trainable(&name, false).unwrap();
    }
    let x = Tensor::full([1, 32, 32, 3], 0.5);
    let acts = g.forward(&x, Mode::Train).unwrap();
    let dy = Tensor::full(acts.output().shape().to_vec(), 1.0);
    let grads: Gradients = g.backward(&acts, &dy).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn width_and_head_are_configurable() {
    let cfg = MobIncConfig {
        num_classes: 5,
        fc_width: 64,
        ..MobIncConfig::default()
    };
    let g = cfg.build(0).unwrap();
    assert_eq!(g.output_shape(), &[1, 5]);
    assert!(MobIncConfig { num_classes: 1, ..cfg }.build(0).is_err());
}
