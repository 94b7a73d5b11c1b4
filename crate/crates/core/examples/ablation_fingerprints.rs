//! Builds the four model families reachable through the attention and
//! multi-scale flags and prints their module fingerprints, so runs of
//! different ablations can be told apart from their checkpoints alone.
//!
//! `cargo run --release --example ablation_fingerprints`

use maprotonet::network::{Ablation, MaProtoNet, ModelConfig};
use maprotonet::run::model_name;

fn main() -> maprotonet::Result<()> {
    let base = ModelConfig::scaled();
    for ablation in Ablation::ALL {
        let cfg = ablation.apply(&base);
        let model = MaProtoNet::new(cfg.clone(), 0)?;
        println!("== {} ({ablation:?})", model_name(&cfg));
        println!("{}\n", model.fingerprint());
    }
    Ok(())
}
