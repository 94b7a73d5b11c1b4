use maprotonet::checkpoint::Checkpoint;
use maprotonet::data::{stack_images, synth_dataset, SynthConfig, Volume};
use maprotonet::metrics::{
    aggregate, deletion_curve, evaluate, ids_from_curve, predict, report_jsonl, score_predictions, DeletionOrder,
    EvalConfig,
};
use maprotonet::network::{MaProtoNet, ModelConfig};
use maprotonet::training::{cross_validate, run_training, Recipe, TrainConfig, TrainState};
use maprotonet_tensor::Array;
use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_data(n: usize, seed: u64) -> Vec<Volume> {
    synth_dataset(&SynthConfig::new(n, [4, 16, 16, 12], seed)).unwrap()
}

fn quick_recipe() -> Recipe {
    Recipe {
        train: TrainConfig {
            epochs: 2,
            stage_period: 2,
            head_epochs: 1,
            warmup_epochs: 1,
            batch_size: 4,
            seed: 21,
            ..TrainConfig::default()
        },
        ..Recipe::default()
    }
}

fn quick_eval() -> EvalConfig {
    EvalConfig {
        ids_steps: 4,
        ..EvalConfig::default()
    }
}

#[test]
fn five_fold_driver_reports_every_fold_and_an_aggregate() {
    let data = tiny_data(20, 3);
    let mut seen = Vec::new();
    let results = cross_validate(
        &ModelConfig::tiny(),
        &quick_recipe(),
        &quick_eval(),
        &data,
        5,
        &mut |f, _, _, r| {
            seen.push((f, r.n));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, (0..5).map(|f| (f, 4)).collect::<Vec<_>>());
    let report = report_jsonl(&results).unwrap();
    let lines: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for (f, line) in lines[..5].iter().enumerate() {
        assert_eq!(line["record"], "fold");
        assert_eq!(line["fold"], f);
        for key in ["bac", "ap", "ids"] {
            let v = line[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{key} = {v}");
        }
    }
    assert_eq!(lines[5]["record"], "aggregate");
    assert_eq!(lines[5]["folds"], 5);
    let bacs: Vec<f64> = results.iter().map(|r| r.bac).collect();
    let mean = bacs.iter().sum::<f64>() / 5.0;
    assert!((lines[5]["bac"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn subjects_without_masks_drop_ap_and_ids_but_keep_bac() {
    let mut data = tiny_data(4, 5);
    let model = MaProtoNet::new(ModelConfig::tiny(), 6).unwrap();
    let full = evaluate(&model, &data, &quick_eval()).unwrap();
    assert!(full.ap.is_some() && full.ids.is_some());
    data[2].mask = None;
    let partial = evaluate(&model, &data, &quick_eval()).unwrap();
    assert_eq!(partial.bac, full.bac);
    assert_eq!((partial.ap, partial.ids), (None, None));
    assert!(partial.subjects.iter().all(|s| s.ap.is_none() && s.ids.is_none()));
    let agg = aggregate(&[full, partial.clone()]).unwrap();
    assert!(agg.ap.is_none() && agg.ids.is_none());
    let report = report_jsonl(&[partial]).unwrap();
    let first: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert!(first["ap"].is_null() && first["ids"].is_null());
}

#[test]
fn stored_push_maps_agree_with_a_live_forward() {
    let data = tiny_data(8, 7);
    let idx: Vec<usize> = (0..8).collect();
    let recipe = quick_recipe();
    let mut model = MaProtoNet::new(ModelConfig::tiny(), 8).unwrap();
    let mut state = TrainState::new(&recipe.train);
    run_training(&mut model, &mut state, &recipe, &data, &idx, None, &mut |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint {
        model,
        state: Some(state),
        run_config: None,
    }
    .save(&path)
    .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let prov = ck.state.unwrap().provenance;
    assert_eq!(prov.len(), ck.model.config.prototypes);
    // the head block after the push leaves the feature path untouched
    for p in &prov {
        let out = ck
            .model
            .forward(&stack_images(&data, &[p.sample_index]).unwrap())
            .unwrap();
        let live = out
            .maps
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), p.prototype)
            .to_owned();
        let err = (&live - &p.map).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        assert!(err <= 1e-6, "prototype {}: stored map off by {err}", p.prototype);
        assert_eq!(data[p.sample_index].id, p.sample_id);
    }
}

#[test]
fn stored_predictions_score_like_a_live_evaluation() {
    let data = tiny_data(6, 9);
    let model = MaProtoNet::new(ModelConfig::tiny(), 10).unwrap();
    let cfg = EvalConfig {
        compute_ids: false,
        ..quick_eval()
    };
    let preds = predict(&model, &data, 2).unwrap();
    let stored = score_predictions(&preds, &data, None, &cfg).unwrap();
    let live = evaluate(&model, &data, &cfg).unwrap();
    assert_eq!(stored.bac, live.bac);
    assert!((stored.ap.unwrap() - live.ap.unwrap()).abs() <= 1e-6);
}

/// Deletes by brute force: a voxel goes once fewer than `cut` voxels
/// precede it (higher value, or equal value at a lower index).
fn brute_force_curve(model: &MaProtoNet, image: &Array, map: &Array, label: usize, steps: usize) -> Vec<f64> {
    let vals: Vec<f64> = map.iter().copied().collect();
    let n = vals.len();
    let ahead: Vec<usize> = (0..n)
        .map(|v| {
            (0..n)
                .filter(|&u| vals[u] > vals[v] || (vals[u] == vals[v] && u < v))
                .count()
        })
        .collect();
    (0..=steps)
        .map(|k| {
            let cut = (k as f64 / steps as f64 * n as f64).round() as usize;
            let mut x = image.clone();
            for c in 0..image.shape()[0] {
                let mut ch = x.index_axis_mut(Axis(0), c);
                for (v, slot) in ch.iter_mut().enumerate() {
                    if ahead[v] < cut {
                        *slot = 0.0;
                    }
                }
            }
            let logits = model.forward(&x.insert_axis(Axis(0))).unwrap().logits;
            let row: Vec<f64> = logits.index_axis(Axis(0), 0).iter().copied().collect();
            let z: f64 = row.iter().map(|l| l.exp()).sum();
            row[label].exp() / z
        })
        .collect()
}

#[test]
fn deletion_order_matches_brute_force_ranking() {
    let data = tiny_data(2, 11);
    let model = MaProtoNet::new(ModelConfig::tiny(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // coarse values so many voxels tie
    let map = Array::from_shape_fn(IxDyn(&[16, 16, 12]), |_| f64::from(rng.gen_range(0..6u8)) / 5.0);
    for v in &data {
        let fast = deletion_curve(&model, &v.image, &map, v.label, 5, DeletionOrder::MostActiveFirst, 3).unwrap();
        let slow = brute_force_curve(&model, &v.image, &map, v.label, 5);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{fast:?} vs {slow:?}");
        }
        let rev = map.mapv(|m| -m);
        let least = deletion_curve(&model, &v.image, &rev, v.label, 5, DeletionOrder::LeastActiveFirst, 3).unwrap();
        // reversing both the map and the order only changes tie-breaking
        assert!((least[0] - fast[0]).abs() < 1e-12 && (least[5] - fast[5]).abs() < 1e-12);
        assert!(ids_from_curve(&fast).unwrap() <= 1.0);
    }
}
