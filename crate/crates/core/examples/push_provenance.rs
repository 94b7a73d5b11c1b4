//! Shows where each prototype came from after training: the training
//! subject whose pooled feature replaced it at the last push and how far
//! the prototype moved. A second push on the same subjects moves nothing.
//!
//! `cargo run --release --example push_provenance`

use maprotonet::data::{labels_of, make_folds, split_fold, synth_dataset, SynthConfig};
use maprotonet::network::{MaProtoNet, ModelConfig};
use maprotonet::training::{push_prototypes, run_training, Recipe, TrainState};

fn main() -> maprotonet::Result<()> {
    let data = synth_dataset(&SynthConfig::new(24, [4, 16, 16, 12], 2))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let folds = make_folds(&labels_of(&data, &all), 3, 0)?;
    let (train, held_out) = split_fold(&folds, 0);

    let mut recipe = Recipe::default();
    recipe.train.epochs = 4;
    recipe.train.stage_period = 2;
    recipe.train.head_epochs = 2;
    recipe.train.warmup_epochs = 1;
    recipe.train.batch_size = 4;
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

    println!("prototype  class  source       distance   map peak");
    for p in &state.provenance {
        let peak = p.map.iter().copied().fold(0.0, f64::max);
        println!(
            "{:>9}  {:>5}  {:<10}  {:>9.4}  {:>9.3}",
            p.prototype, p.class, p.sample_id, p.distance, peak
        );
    }

    let again = push_prototypes(&mut model, &data, &train, recipe.train.batch_size)?;
    let moved = again.iter().map(|p| p.distance).fold(0.0, f64::max);
    println!("largest move on a repeated push: {moved:.2e}");
    Ok(())
}
