//! Quadruplet attention on a single feature volume: each branch rotates
//! the tensor so a different pair of axes meets the channel axis, pools
//! over the leading axis and gates the input with a sigmoid map.
//!
//! `cargo run --release --example quadruplet_attention`

use maprotonet::attention::{BranchKind, QuadrupletAttention, Tensor4};
use maprotonet::params::{ParamStore, Session};
use maprotonet_tensor::{Array, Graph};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> maprotonet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array::from_shape_simple_fn(IxDyn(&[8, 12, 10, 6]), || rng.gen_range(-1.0..1.0));
    let x = Tensor4::new(x)?;

    let mut store = ParamStore::new();
    let mut q = QuadrupletAttention::new("q", 5)?;
    q.init(&mut store, &mut rng);
    println!("input {:?}, {} parameters", x.dims(), q.param_count());

    let y = q.apply(&store, &x);
    let ratio = y.as_array().mapv(f64::abs).sum() / x.as_array().mapv(f64::abs).sum();
    println!("output {:?}, mean |y|/|x| = {ratio:.3}", y.dims());

    // gate statistics per branch
    let g = Graph::new();
    let sess = Session::eval(&g, &store);
    let xv = g.constant(x.batched());
    for kind in BranchKind::ALL {
        let rotated = maprotonet::attention::rotate(xv, kind);
        let gate = q.gate(&sess, kind, rotated).value();
        let (lo, hi) = gate
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        println!("  branch {:<3} gate in [{lo:.3}, {hi:.3}]", kind.tag());
    }

    // a pinned block is the identity
    q.pin_all_gates();
    let same = q.apply(&store, &x);
    println!(
        "all gates pinned: output equals input = {}",
        same.as_array() == x.as_array()
    );
    Ok(())
}
