//! Renders attribution overlays for held-out subjects of a tiny trained
//! model: the mean map over prototypes and the map of a single prototype,
//! blended over the T1CE slices with the lesion contour on top.
//!
//! `cargo run --release --example visualize_overlays -- [OUT_DIR]`

use std::path::PathBuf;

use maprotonet::data::{labels_of, make_folds, split_fold, synth_dataset, SynthConfig};
use maprotonet::network::{MaProtoNet, ModelConfig};
use maprotonet::training::{run_training, Recipe, TrainState};
use maprotonet::visualize::{visualize, write_visualization, MapSource, OverlayConfig};

fn main() -> maprotonet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("maprotonet-overlays"));
    let data = synth_dataset(&SynthConfig::new(24, [4, 32, 32, 24], 3))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let folds = make_folds(&labels_of(&data, &all), 3, 0)?;
    let (train, held_out) = split_fold(&folds, 0);

    let mut recipe = Recipe::default();
    recipe.train.epochs = 4;
    recipe.train.stage_period = 2;
    recipe.train.head_epochs = 2;
    recipe.train.warmup_epochs = 1;
    recipe.train.batch_size = 4;
    let cfg = ModelConfig {
        input_extents: [32, 32, 24],
        ..ModelConfig::tiny()
    };
    let mut model = MaProtoNet::new(cfg, 0)?;
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

    let overlay = OverlayConfig::default();
    for &i in held_out.iter().take(2) {
        for source in [MapSource::Mean, MapSource::Prototype(0)] {
            let vis = visualize(&model, &data[i], source, &overlay)?;
            let files = write_visualization(&out, &vis, &model, &state.provenance)?;
            println!(
                "{} ({:?}): p(HGG)={:.2}, {} files",
                vis.id,
                source,
                vis.probabilities[1],
                files.len()
            );
        }
    }
    println!("overlays in {}", out.display());
    Ok(())
}
