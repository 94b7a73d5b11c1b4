//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! Values live on a [`Graph`] tape and are referred to by [`Var`] handles.
//! The operator set is the one needed by volumetric convolutional networks:
//! broadcasting arithmetic, reductions, permutations, 3D convolution, 3D
//! pooling and sparse spatial resampling. Everything is computed in double
//! precision and in a fixed order, so results are bitwise reproducible.

pub mod conv;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod pool;
pub mod resample;

pub use conv::{conv3d, Conv3dSpec};
pub use graph::{Array, Gradients, Graph, Var};
pub use ops::{concat, reduce_to_shape, sigmoid, sum_all_of};
pub use optim::{AdamW, Moments};
pub use pool::{avg_pool3d, max_pool3d};
pub use resample::{resample, Boundary, SpatialMap};
