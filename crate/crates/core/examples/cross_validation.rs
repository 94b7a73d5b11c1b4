//! Stratified k-fold cross-validation with a fresh model per fold and the
//! mean ± sd summary over folds.
//!
//! `cargo run --release --example cross_validation`

use maprotonet::data::{synth_dataset, SynthConfig};
use maprotonet::metrics::{report_jsonl, table2, EvalConfig};
use maprotonet::network::ModelConfig;
use maprotonet::training::{cross_validate, Recipe};

fn main() -> maprotonet::Result<()> {
    let data = synth_dataset(&SynthConfig::new(30, [4, 16, 16, 12], 4))?;
    let mut recipe = Recipe::default();
    recipe.train.epochs = 4;
    recipe.train.stage_period = 2;
    recipe.train.head_epochs = 2;
    recipe.train.warmup_epochs = 1;
    recipe.train.batch_size = 4;
    let eval = EvalConfig {
        ids_steps: 5,
        ..EvalConfig::default()
    };
    let results = cross_validate(&ModelConfig::tiny(), &recipe, &eval, &data, 3, &mut |f, _, state, r| {
        println!("fold {f}: {} epochs logged, BAC {:.3}", state.history.len(), r.bac);
        Ok(())
    })?;
    print!("{}", report_jsonl(&results)?);
    print!("{}", table2("tiny", &results)?);
    Ok(())
}
