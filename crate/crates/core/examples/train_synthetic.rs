//! Trains on the synthetic dataset through the same run driver the CLI
//! uses and writes checkpoints, history and the result table.
//!
//! `cargo run --release --example train_synthetic -- OUT_DIR [--quick]`
//!
//! Without `--quick` this is the desk-scale configuration (64 subjects at
//! 32×32×24, 20 joint epochs), a few minutes on one core.

use std::path::PathBuf;

use maprotonet::config::RunConfig;
use maprotonet::data::SynthConfig;
use maprotonet::metrics::table2;
use maprotonet::network::ModelConfig;
use maprotonet::run::{model_name, train_run};

fn main() -> maprotonet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("maprotonet-run-{}", std::process::id())));

    let mut cfg = RunConfig::synthetic_default();
    if quick {
        cfg.model = ModelConfig::tiny();
        cfg.data.synthetic = Some(SynthConfig::new(24, [4, 16, 16, 12], 0));
        cfg.data.folds = 3;
        cfg.train.epochs = 4;
        cfg.train.stage_period = 2;
        cfg.train.head_epochs = 2;
        cfg.train.warmup_epochs = 1;
        cfg.eval.ids_steps = 5;
    }
    let results = train_run(&cfg, &out, false)?;
    print!("{}", table2(&model_name(&cfg.model), &results)?);
    println!("artifacts in {}", out.display());
    Ok(())
}
