//! Z-pool and four-branch quadruplet attention for `(C, H, W, D)` features.
//!
//! Each branch swaps one axis with the channel axis, compresses the leading
//! axis with Z-pool, derives a `(0, 1)` gate from a 3D convolution followed
//! by batch normalisation and a logistic squash, gates the permuted input
//! and swaps back. The block output is the mean of the four branches.
//!
//! A plain 2D triplet-attention implementation is included as a reference
//! for cross-checking the depth-1 case.

use maprotonet_tensor::{concat, Array, Conv3dSpec, Graph, Var};
use ndarray::{Axis, Ix3, IxDyn};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{batch_norm, conv, init_bn, init_conv, BN_EPS};
use crate::params::{ParamStore, Session};

/// A finite `(C, H, W, D)` tensor with every extent at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4(Array);

impl Tensor4 {
    pub fn new(data: Array) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(shape_err!("expected (C, H, W, D), got shape {:?}", data.shape()));
        }
        if data.shape().contains(&0) {
            return Err(shape_err!("empty tensor of shape {:?}", data.shape()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(shape_err!("tensor contains non-finite values"));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn as_array(&self) -> &Array {
        &self.0
    }

    pub fn into_array(self) -> Array {
        self.0
    }

    /// The tensor with a leading batch axis of one.
    pub fn batched(&self) -> Array {
        self.0.clone().insert_axis(Axis(0))
    }
}

/// Stacks the per-location maximum and mean over axis 1 of an
/// `(N, C, ...)` value into two channels.
pub fn z_pool_var<'g>(x: Var<'g>) -> Var<'g> {
    concat(&[x.max_axis(1, true), x.mean_axes(&[1], true)], 1)
}

/// Z-pool of a single tensor: `(C, H, W, D) -> (2, H, W, D)`.
pub fn z_pool(x: &Tensor4) -> Tensor4 {
    let g = Graph::new();
    let out = z_pool_var(g.constant(x.batched()));
    let v = (*out.value()).clone().index_axis_move(Axis(0), 0);
    Tensor4(v)
}

/// Which axis a branch rotates into the leading position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    /// No rotation: spatial attention over (H, W, D).
    Hwd,
    /// H leads: interactions across (C, W, D).
    Cwd,
    /// W leads: interactions across (C, H, D).
    Chd,
    /// D leads: interactions across (C, H, W).
    Chw,
}

impl BranchKind {
    pub const ALL: [BranchKind; 4] = [BranchKind::Hwd, BranchKind::Cwd, BranchKind::Chd, BranchKind::Chw];

    pub fn tag(self) -> &'static str {
        match self {
            BranchKind::Hwd => "hwd",
            BranchKind::Cwd => "cwd",
            BranchKind::Chd => "chd",
            BranchKind::Chw => "chw",
        }
    }

    /// Axis permutation of an `(N, C, H, W, D)` value. Every permutation is
    /// a transposition and therefore its own inverse.
    pub fn permutation(self) -> [usize; 5] {
        match self {
            BranchKind::Hwd => [0, 1, 2, 3, 4],
            BranchKind::Cwd => [0, 2, 1, 3, 4],
            BranchKind::Chd => [0, 3, 2, 1, 4],
            BranchKind::Chw => [0, 4, 2, 3, 1],
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Rotates `x` for `kind`; applying it twice restores the input.
pub fn rotate<'g>(x: Var<'g>, kind: BranchKind) -> Var<'g> {
    match kind {
        BranchKind::Hwd => x,
        k => x.permute(&k.permutation()),
    }
}

/// Quadruplet attention block with four independent branch parameter sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuadrupletAttention {
    pub name: String,
    pub kernel: usize,
    pinned: [bool; 4],
}

impl QuadrupletAttention {
    /// Odd kernels keep extents with padding `kernel / 2`; even kernels are rejected.
    pub fn new(name: impl Into<String>, kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention kernel {kernel} would change spatial extents; use an odd size"
            )));
        }
        Ok(Self {
            name: name.into(),
            kernel,
            pinned: [false; 4],
        })
    }

    fn conv_name(&self, kind: BranchKind) -> String {
        format!("{}.{}.conv", self.name, kind.tag())
    }

    fn bn_name(&self, kind: BranchKind) -> String {
        format!("{}.{}.bn", self.name, kind.tag())
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for kind in BranchKind::ALL {
            init_conv(store, rng, &self.conv_name(kind), 1, 2, self.kernel, false);
            init_bn(store, &self.bn_name(kind), 1);
        }
    }

    /// Trainable scalars in the block, independent of the feature shape.
    pub fn param_count(&self) -> usize {
        4 * (2 * self.kernel.pow(3) + 2)
    }

    /// Test hook: forces the gate of one branch to exactly 1.
    pub fn pin_gate(&mut self, kind: BranchKind) {
        self.pinned[kind.index()] = true;
    }

    /// Test hook: forces every gate to exactly 1.
    pub fn pin_all_gates(&mut self) {
        self.pinned = [true; 4];
    }

    pub fn unpin_gates(&mut self) {
        self.pinned = [false; 4];
    }

    pub fn is_pinned(&self, kind: BranchKind) -> bool {
        self.pinned[kind.index()]
    }

    /// The `(N, 1, ...)` gate computed with the weights of `weights` on an
    /// already rotated input.
    pub fn gate<'a>(&self, sess: &Session<'a>, weights: BranchKind, xr: Var<'a>) -> Var<'a> {
        let z = z_pool_var(xr);
        let pad = self.kernel / 2;
        let c = conv(sess, &self.conv_name(weights), z, Conv3dSpec::new(1, pad));
        batch_norm(sess, &self.bn_name(weights), c).sigmoid()
    }

    /// Unrotated gating `x * gate(x)` using the weights of `weights`.
    pub fn branch_core<'a>(&self, sess: &Session<'a>, weights: BranchKind, xr: Var<'a>) -> Var<'a> {
        if self.is_pinned(weights) {
            return xr;
        }
        xr.mul(self.gate(sess, weights, xr))
    }

    /// One branch on an `(N, C, H, W, D)` value; output shape equals input shape.
    pub fn branch<'a>(&self, sess: &Session<'a>, kind: BranchKind, x: Var<'a>) -> Var<'a> {
        rotate(self.branch_core(sess, kind, rotate(x, kind)), kind)
    }

    pub fn forward<'a>(&self, sess: &Session<'a>, x: Var<'a>) -> Var<'a> {
        let outs: Vec<Var<'a>> = BranchKind::ALL.iter().map(|&k| self.branch(sess, k, x)).collect();
        maprotonet_tensor::sum_all_of(&outs).mul_scalar(0.25)
    }

    /// Evaluation-mode application to a single tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor4) -> Tensor4 {
        let g = Graph::new();
        let sess = Session::eval(&g, store);
        let out = self.forward(&sess, g.constant(x.batched()));
        Tensor4((*out.value()).clone().index_axis_move(Axis(0), 0))
    }
}

/// Parameters of one 2D triplet-attention branch: a `(1, 2, k, k)` kernel
/// without bias and single-channel normalisation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBranch2d {
    pub weight: Array,
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub var: f64,
    pub pinned: bool,
}

/// Branches in order HW (no rotation), CW (H leads), CH (W leads).
#[derive(Clone, Debug, PartialEq)]
pub struct TripletAttention2d {
    pub branches: [TripletBranch2d; 3],
}

fn conv2d_same(z: &ndarray::Array3<f64>, w: &Array) -> ndarray::Array2<f64> {
    let (_, h, wd) = z.dim();
    let k = w.shape()[2];
    let pad = (k / 2) as isize;
    let mut out = ndarray::Array2::zeros((h, wd));
    for i in 0..h {
        for j in 0..wd {
            let mut acc = 0.0;
            for c in 0..2 {
                for a in 0..k {
                    for b in 0..k {
                        let y = i as isize + a as isize - pad;
                        let x = j as isize + b as isize - pad;
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < wd {
                            acc += w[[0, c, a, b]] * z[[c, y as usize, x as usize]];
                        }
                    }
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn triplet_branch(x: &ndarray::Array3<f64>, p: &TripletBranch2d) -> ndarray::Array3<f64> {
    if p.pinned {
        return x.clone();
    }
    let (c, h, w) = x.dim();
    let mut z = ndarray::Array3::zeros((2, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut mx = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for ch in 0..c {
                mx = mx.max(x[[ch, i, j]]);
                sum += x[[ch, i, j]];
            }
            z[[0, i, j]] = mx;
            z[[1, i, j]] = sum / c as f64;
        }
    }
    let s = conv2d_same(&z, &p.weight);
    let inv = 1.0 / (p.var + BN_EPS).sqrt();
    let mut out = x.clone();
    for ((_, i, j), v) in out.indexed_iter_mut() {
        let n = (s[[i, j]] - p.mean) * inv * p.gamma + p.beta;
        *v *= maprotonet_tensor::sigmoid(n);
    }
    out
}

/// Reference 2D triplet attention on a `(C, H, W)` image.
pub fn triplet_attention_2d(x: &Array, params: &TripletAttention2d) -> Result<Array> {
    if x.ndim() != 3 {
        return Err(shape_err!("triplet attention expects (C, H, W), got {:?}", x.shape()));
    }
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap().to_owned();
    let hw = triplet_branch(&x3, &params.branches[0]);
    let xh = x3.clone().permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
    let cw = triplet_branch(&xh, &params.branches[1]).permuted_axes([1, 0, 2]);
    let xw = x3.clone().permuted_axes([2, 1, 0]).as_standard_layout().into_owned();
    let ch = triplet_branch(&xw, &params.branches[2]).permuted_axes([2, 1, 0]);
    let out = (&hw + &cw + &ch) / 3.0;
    Ok(out.into_dyn().into_shape_with_order(IxDyn(x.shape())).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn z_pool_shape_and_values() {
        let x = Tensor4::new(random(&[8, 4, 4, 4], 0)).unwrap();
        assert_eq!(z_pool(&x).dims(), [2, 4, 4, 4]);

        let c = Tensor4::new(Array::from_elem(IxDyn(&[3, 2, 2, 2]), 1.5)).unwrap();
        assert!(z_pool(&c).as_array().iter().all(|&v| v == 1.5));

        let two = Tensor4::new(
            array![1.0, 3.0]
                .into_dyn()
                .into_shape_with_order(IxDyn(&[2, 1, 1, 1]))
                .unwrap(),
        )
        .unwrap();
        let z = z_pool(&two);
        assert_eq!(z.as_array()[[0, 0, 0, 0]], 3.0);
        assert_eq!(z.as_array()[[1, 0, 0, 0]], 2.0);
    }

    #[test]
    fn tensor4_rejects_bad_input() {
        assert!(Tensor4::new(Array::zeros(IxDyn(&[0, 2, 2, 2]))).is_err());
        assert!(Tensor4::new(Array::zeros(IxDyn(&[2, 2, 2]))).is_err());
        assert!(Tensor4::new(Array::from_elem(IxDyn(&[1, 1, 1, 1]), f64::NAN)).is_err());
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(QuadrupletAttention::new("q", 4).is_err());
        assert!(QuadrupletAttention::new("q", 7).is_ok());
    }

    #[test]
    fn pinned_gates_give_identity_and_block_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = QuadrupletAttention::new("q", 3).unwrap();
        q.init(&mut store, &mut rng);
        let x = Tensor4::new(random(&[4, 8, 8, 6], 2)).unwrap();
        let y = q.apply(&store, &x);
        assert_eq!(y.dims(), [4, 8, 8, 6]);
        for (a, b) in x.as_array().iter().zip(y.as_array().iter()) {
            assert!(b.abs() <= a.abs() + 1e-12);
        }
        q.pin_all_gates();
        assert_eq!(q.apply(&store, &x), x);
    }

    #[test]
    fn block_is_the_mean_of_its_branches() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = QuadrupletAttention::new("q", 3).unwrap();
        q.init(&mut store, &mut rng);
        let g = Graph::new();
        let sess = Session::new(&g, &store, false, Trainable::Nothing);
        let x = g.constant(random(&[2, 3, 4, 5, 2], 6));
        let whole = q.forward(&sess, x).value();
        let mut sum = Array::zeros(IxDyn(&[2, 3, 4, 5, 2]));
        for k in BranchKind::ALL {
            sum += &*q.branch(&sess, k, x).value();
        }
        for (a, b) in whole.iter().zip((sum / 4.0).iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
