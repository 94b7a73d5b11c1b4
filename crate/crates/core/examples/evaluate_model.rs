//! Trains a tiny model in memory and scores it on held-out subjects:
//! balanced accuracy, activation precision against the lesion masks and
//! the incremental deletion score. A constant map is scored alongside as
//! the floor for activation precision.
//!
//! `cargo run --release --example evaluate_model`

use maprotonet::data::{labels_of, make_folds, split_fold, synth_dataset, SynthConfig};
use maprotonet::metrics::{activation_precision, constant_map, evaluate, table2, EvalConfig};
use maprotonet::network::{MaProtoNet, ModelConfig};
use maprotonet::training::{pick, run_training, Recipe, TrainState};

fn main() -> maprotonet::Result<()> {
    let data = synth_dataset(&SynthConfig::new(24, [4, 16, 16, 12], 1))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let folds = make_folds(&labels_of(&data, &all), 3, 0)?;
    let (train, held_out) = split_fold(&folds, 0);

    let mut recipe = Recipe::default();
    recipe.train.epochs = 6;
    recipe.train.stage_period = 3;
    recipe.train.head_epochs = 2;
    recipe.train.warmup_epochs = 1;
    recipe.train.batch_size = 4;
    recipe.train.augment = false;
    let mut model = MaProtoNet::new(ModelConfig::tiny(), 0)?;
    let mut state = TrainState::new(&recipe.train);
    run_training(
        &mut model,
        &mut state,
        &recipe,
        &data,
        &train,
        Some(&held_out),
        &mut |_, _| Ok(()),
    )?;

    let eval_cfg = EvalConfig {
        ids_steps: 10,
        ..EvalConfig::default()
    };
    let mut result = evaluate(&model, &pick(&data, &held_out), &eval_cfg)?;
    result.fold = Some(0);
    print!("{}", table2("tiny", std::slice::from_ref(&result))?);
    for s in &result.subjects {
        println!(
            "  {} label {} predicted {} p={:.2} AP {:.3} IDS {:.3}",
            s.id,
            s.label,
            s.predicted,
            s.probability,
            s.ap.unwrap_or(f64::NAN),
            s.ids.unwrap_or(f64::NAN)
        );
    }

    let floor: f64 = held_out
        .iter()
        .map(|&i| {
            let v = &data[i];
            let map = constant_map(v.extents(), 1.0);
            activation_precision(&map, v.mask.as_ref().expect("synthetic subjects have masks"), 0.5)
        })
        .sum::<maprotonet::Result<f64>>()?
        / held_out.len() as f64;
    println!("constant-map AP {floor:.3}");
    Ok(())
}
