//! Fuses a two-level feature pyramid with every fusion variant and reports
//! the fused channel count and the trainable parameters each one adds.
//!
//! `cargo run --release --example multiscale_fusion`

use maprotonet::multiscale::{level_factor, FusionVariant, MultiScale};
use maprotonet::params::{ParamStore, Session};
use maprotonet_tensor::{Array, Graph};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> maprotonet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // shallow (N, 16, 16, 16, 12) and deep (N, 64, 8, 8, 6)
    let shallow = Array::from_shape_simple_fn(IxDyn(&[2, 16, 16, 16, 12]), || rng.gen_range(-1.0..1.0));
    let deep = Array::from_shape_simple_fn(IxDyn(&[2, 64, 8, 8, 6]), || rng.gen_range(-1.0..1.0));
    let factor = level_factor(&shallow.shape()[2..], &deep.shape()[2..])?;
    println!(
        "shallow {:?} -> deep {:?}, factor {factor}",
        shallow.shape(),
        deep.shape()
    );

    for variant in FusionVariant::ALL {
        let ms = MultiScale::new("ms", variant, vec![16, 64], vec![factor])?;
        let mut store = ParamStore::new();
        ms.init(&mut store, &mut rng);
        let g = Graph::new();
        let sess = Session::eval(&g, &store);
        let fused = ms.fuse(&sess, &[g.constant(shallow.clone()), g.constant(deep.clone())])?;
        let params: usize = store.params().map(|(_, v)| v.len()).sum();
        println!(
            "  variant {variant:?}: fused {:?}, {} channels, {params} parameters",
            fused.value().shape(),
            ms.out_channels()
        );
    }
    Ok(())
}
