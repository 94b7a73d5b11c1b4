//! Writes a small synthetic NIfTI dataset with its manifest, then loads it
//! back through the same preprocessing path a real dataset takes.
//!
//! `cargo run --release --example synth_dataset -- [OUT_DIR]`

use std::path::PathBuf;

use maprotonet::config::load_manifest_volumes;
use maprotonet::data::{read_manifest, write_synth_dataset, PreprocessConfig, SynthConfig};

fn main() -> maprotonet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("maprotonet-synth"));
    let cfg = SynthConfig::new(6, [4, 32, 32, 24], 0);
    let manifest = write_synth_dataset(&out, &cfg)?;
    println!("manifest: {}", manifest.display());
    for r in read_manifest(&manifest)? {
        println!("  {} label {} mask {}", r.id, r.label, r.seg.is_some());
    }

    // no crop or resampling: the synthetic grid already has the model extents
    let pre = PreprocessConfig {
        crop: [32, 32, 24],
        target: [32, 32, 24],
    };
    let volumes = load_manifest_volumes(&manifest, &pre, None)?;
    for v in &volumes {
        let lesion = v.mask.as_ref().map_or(0.0, |m| m.mean().unwrap_or(0.0));
        println!("  {} image {:?} lesion fraction {:.3}", v.id, v.image.shape(), lesion);
    }
    Ok(())
}
