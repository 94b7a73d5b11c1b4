use maprotonet::affine::AffineSpec;
use maprotonet::attention::{QuadrupletAttention, Tensor4};
use maprotonet::losses::{joint_loss, LossWeights};
use maprotonet::network::{similarity_of_distance, MaProtoNet, ModelConfig};
use maprotonet::params::{ParamStore, Session, Trainable};
use maprotonet_tensor::{Array, Graph};
use ndarray::{Axis, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-2.0..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadruplet_attention_preserves_shape_and_never_amplifies(
        c in 1usize..5, h in 1usize..9, w in 1usize..9, d in 1usize..9, seed in 0u64..1000,
    ) {
        let mut store = ParamStore::new();
        let q = QuadrupletAttention::new("q", 3).unwrap();
        q.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor4::new(random(&[c, h, w, d], seed + 1)).unwrap();
        let y = q.apply(&store, &x);
        prop_assert_eq!(y.dims(), [c, h, w, d]);
        for (a, b) in x.as_array().iter().zip(y.as_array().iter()) {
            prop_assert!(b.abs() <= a.abs() + 1e-12);
        }
    }

    #[test]
    fn similarity_strictly_decreases_with_distance(a in 0.0f64..1e3, gap in 1e-6f64..1e3) {
        prop_assert!(similarity_of_distance(a + gap) < similarity_of_distance(a));
        prop_assert!(similarity_of_distance(a) > 0.0);
    }
}

#[test]
fn pyramid_follows_the_stride_arithmetic() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.input_extents, [128, 128, 96]);
    assert_eq!(cfg.level_extents(), vec![[64, 64, 48], [32, 32, 24]]);
    assert_eq!(cfg.level_channels(), vec![64, 256]);

    let tiny = ModelConfig {
        input_extents: [32, 32, 24],
        ..ModelConfig::tiny()
    };
    let model = MaProtoNet::new(tiny, 0).unwrap();
    let out = model.forward(&random(&[1, 4, 32, 32, 24], 1)).unwrap();
    assert_eq!(out.levels[0].shape(), &[1, 8, 16, 16, 12]);
    assert_eq!(out.levels[1].shape(), &[1, 32, 8, 8, 6]);
    assert_eq!(out.maps.shape(), &[1, 4, 8, 8, 6]);
}

#[test]
fn disabled_attention_equals_pinned_attention() {
    let with_q = ModelConfig::tiny();
    let without = ModelConfig {
        use_quadruplet: false,
        ..ModelConfig::tiny()
    };
    let plain = MaProtoNet::new(without, 2).unwrap();
    let mut gated = MaProtoNet::new(with_q, 3).unwrap();
    for (k, v) in plain.store.params() {
        *gated.store.get_mut(k).unwrap() = v.clone();
    }
    for (k, v) in plain.store.buffers() {
        *gated.store.buffer_mut(k).unwrap() = v.clone();
    }
    gated
        .attention_blocks_mut()
        .iter_mut()
        .for_each(QuadrupletAttention::pin_all_gates);
    let x = random(&[2, 4, 16, 16, 12], 4);
    let (a, b) = (plain.forward(&x).unwrap(), gated.forward(&x).unwrap());
    assert_eq!(a.levels, b.levels);
    assert_eq!(a.logits, b.logits);
}

#[test]
fn zeroed_mapping_module_gives_half_everywhere() {
    let mut model = MaProtoNet::new(ModelConfig::tiny(), 5).unwrap();
    let names: Vec<String> = model
        .store
        .params()
        .map(|(k, _)| k.clone())
        .filter(|k| k.starts_with("mapping."))
        .collect();
    assert!(!names.is_empty());
    for k in names {
        model.store.get_mut(&k).unwrap().fill(0.0);
    }
    let g = Graph::new();
    let sess = Session::eval(&g, &model.store);
    let fv = model
        .forward_vars(&sess, g.constant(random(&[1, 4, 16, 16, 12], 6)))
        .unwrap();
    assert!(fv.raw_maps.value().iter().all(|&m| m == 0.5));
}

#[test]
fn maps_lie_in_the_open_unit_interval_and_cam_logits_average_cam_maps() {
    let model = MaProtoNet::new(ModelConfig::tiny(), 7).unwrap();
    let g = Graph::new();
    let sess = Session::eval(&g, &model.store);
    let fv = model
        .forward_vars(&sess, g.constant(random(&[2, 4, 16, 16, 12], 8)))
        .unwrap();
    assert!(fv.raw_maps.value().iter().all(|&m| m > 0.0 && m < 1.0));
    let cam = fv.cam_maps.value();
    let logits = fv.cam_logits.value();
    assert_eq!(logits.shape(), &[2, 2]);
    for n in 0..2 {
        for k in 0..2 {
            let m = cam.index_axis(Axis(0), n).index_axis(Axis(0), k).mean().unwrap();
            assert!((logits[[n, k]] - m).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_inputs_in_one_batch_give_identical_outputs() {
    let model = MaProtoNet::new(ModelConfig::tiny(), 9).unwrap();
    let one = random(&[1, 4, 16, 16, 12], 10);
    let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
    let out = model.forward(&two).unwrap();
    assert_eq!(out.logits.index_axis(Axis(0), 0), out.logits.index_axis(Axis(0), 1));
    assert_eq!(out.maps.index_axis(Axis(0), 0), out.maps.index_axis(Axis(0), 1));
}

#[test]
fn total_loss_reaches_the_feature_module() {
    let model = MaProtoNet::new(ModelConfig::tiny(), 11).unwrap();
    let g = Graph::new();
    let sess = Session::new(&g, &model.store, true, Trainable::All);
    let fv = model
        .forward_vars(&sess, g.constant(random(&[2, 4, 16, 16, 12], 12)))
        .unwrap();
    let specs = [AffineSpec::identity(), AffineSpec::identity()];
    let jl = joint_loss(&model, &sess, &fv, &[0, 1], &specs, &LossWeights::default(), true).unwrap();
    let mut grads = g.backward(jl.total);
    let pg = sess.param_grads(&mut grads);
    let feature: Vec<_> = pg.iter().filter(|(k, _)| k.starts_with("features.")).collect();
    assert!(!feature.is_empty());
    for (k, grad) in feature {
        assert!(grad.iter().any(|&v| v != 0.0), "{k} receives no gradient");
    }
}
