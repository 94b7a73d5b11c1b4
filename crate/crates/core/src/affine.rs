//! Rotation and isotropic scaling of feature grids about their centre.

use std::sync::Arc;

use maprotonet_tensor::{resample, Boundary, SpatialMap, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Tensor4;

/// Rotation angles (radians) about the H, W and D axes plus a scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    pub angles: [f64; 3],
    pub scale: f64,
}

impl Default for AffineSpec {
    fn default() -> Self {
        Self::identity()
    }
}

/// Sampling range for random transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRange {
    pub max_angle_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AffineRange {
    fn default() -> Self {
        Self {
            max_angle_deg: 10.0,
            min_scale: 0.9,
            max_scale: 1.1,
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl AffineSpec {
    pub fn identity() -> Self {
        Self {
            angles: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angles == [0.0; 3] && self.scale == 1.0
    }

    /// Uniform angles in `±max_angle_deg` and scale in `[min_scale, max_scale]`.
    pub fn sample<R: Rng>(rng: &mut R, range: &AffineRange) -> Self {
        let a = range.max_angle_deg.to_radians();
        let mut angle = || if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let angles = [angle(), angle(), angle()];
        let scale = if range.max_scale > range.min_scale {
            rng.gen_range(range.min_scale..=range.max_scale)
        } else {
            range.min_scale
        };
        Self { angles, scale }
    }

    /// `R = R_d · R_w · R_h`, acting on `(h, w, d)` coordinates.
    pub fn rotation(&self) -> Mat3 {
        let [a, b, c] = self.angles;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        // about H: mixes (w, d)
        let rh = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        // about W: mixes (h, d)
        let rw = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        // about D: mixes (h, w)
        let rd = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&rd, &matmul3(&rw, &rh))
    }

    /// Source coordinate `c + Rᵀ(o − c) / scale` of output voxel `o`, `c`
    /// the grid centre.
    pub fn source_coord(&self, extents: [usize; 3]) -> impl Fn([usize; 3]) -> [f64; 3] {
        let r = self.rotation();
        let c = extents.map(|n| (n as f64 - 1.0) / 2.0);
        let inv_s = 1.0 / self.scale;
        move |o| {
            let q = [o[0] as f64 - c[0], o[1] as f64 - c[1], o[2] as f64 - c[2]];
            let mut p = [0.0; 3];
            for (i, pi) in p.iter_mut().enumerate() {
                // Rᵀ q
                *pi = c[i] + inv_s * (r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2]);
            }
            p
        }
    }

    /// Trilinear map with zero boundary over [`Self::source_coord`].
    pub fn spatial_map(&self, extents: [usize; 3]) -> SpatialMap {
        if self.is_identity() {
            return SpatialMap::identity(extents);
        }
        SpatialMap::trilinear(extents, extents, Boundary::Zero, self.source_coord(extents))
    }

    /// Nearest-neighbour counterpart of [`Self::spatial_map`], for label masks.
    pub fn nearest_map(&self, extents: [usize; 3]) -> SpatialMap {
        if self.is_identity() {
            return SpatialMap::identity(extents);
        }
        SpatialMap::nearest(extents, extents, self.source_coord(extents))
    }
}

/// Applies one spec per sample to an `(N, C, H, W, D)` value. When every
/// spec is the identity the input is returned unchanged.
pub fn affine_apply_var<'g>(x: Var<'g>, specs: &[AffineSpec]) -> Var<'g> {
    let shape = x.shape();
    assert_eq!(specs.len(), shape[0], "one affine spec per sample");
    if specs.iter().all(AffineSpec::is_identity) {
        return x;
    }
    let extents = [shape[2], shape[3], shape[4]];
    let maps: Vec<SpatialMap> = specs.iter().map(|s| s.spatial_map(extents)).collect();
    resample(x, Arc::new(maps))
}

/// Applies `spec` to a single tensor.
pub fn affine_apply(h: &Tensor4, spec: &AffineSpec) -> Tensor4 {
    if spec.is_identity() {
        return h.clone();
    }
    let [_, a, b, c] = h.dims();
    let out = spec.spatial_map([a, b, c]).apply_array(h.as_array());
    Tensor4::new(out).expect("resampling keeps extents and finiteness")
}
