//! Linear spatial resampling.
//!
//! A [`SpatialMap`] stores, for every output voxel, the input voxels and
//! weights that produce it. Trilinear interpolation at arbitrary sample
//! coordinates fits this form, so rotations, scalings and resizes all
//! share one differentiable operator whose backward pass is the transpose
//! of the map.

use std::sync::Arc;

use ndarray::IxDyn;

use crate::graph::{Array, Var};

/// How samples that fall outside the input grid are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Out-of-grid corners contribute zero.
    Zero,
    /// Coordinates are clamped to the grid.
    Clamp,
}

/// Sparse linear map from an input grid to an output grid (CSR layout).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub input: [usize; 3],
    pub output: [usize; 3],
    offsets: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl SpatialMap {
    /// The identity map on `extents`.
    pub fn identity(extents: [usize; 3]) -> Self {
        let n: usize = extents.iter().product();
        Self {
            input: extents,
            output: extents,
            offsets: (0..=n).collect(),
            indices: (0..n as u32).collect(),
            weights: vec![1.0; n],
        }
    }

    /// Trilinear sampling: output voxel `o` reads the input at the
    /// continuous voxel coordinate `coord(o)`.
    pub fn trilinear<F>(input: [usize; 3], output: [usize; 3], boundary: Boundary, coord: F) -> Self
    where
        F: Fn([usize; 3]) -> [f64; 3],
    {
        let n: usize = output.iter().product();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n * 8);
        let mut weights = Vec::with_capacity(n * 8);
        offsets.push(0);
        for h in 0..output[0] {
            for w in 0..output[1] {
                for d in 0..output[2] {
                    let mut p = coord([h, w, d]);
                    if boundary == Boundary::Clamp {
                        for a in 0..3 {
                            p[a] = p[a].clamp(0.0, (input[a] - 1) as f64);
                        }
                    }
                    push_trilinear(input, p, &mut indices, &mut weights);
                    offsets.push(indices.len());
                }
            }
        }
        Self {
            input,
            output,
            offsets,
            indices,
            weights,
        }
    }

    /// Nearest-neighbour sampling; out-of-grid samples read zero.
    pub fn nearest<F>(input: [usize; 3], output: [usize; 3], coord: F) -> Self
    where
        F: Fn([usize; 3]) -> [f64; 3],
    {
        let n: usize = output.iter().product();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        offsets.push(0);
        for h in 0..output[0] {
            for w in 0..output[1] {
                for d in 0..output[2] {
                    let p = coord([h, w, d]);
                    let r = [p[0].round(), p[1].round(), p[2].round()];
                    if (0..3).all(|a| r[a] >= 0.0 && r[a] <= (input[a] - 1) as f64) {
                        let idx = (r[0] as usize * input[1] + r[1] as usize) * input[2] + r[2] as usize;
                        indices.push(idx as u32);
                        weights.push(1.0);
                    }
                    offsets.push(indices.len());
                }
            }
        }
        Self {
            input,
            output,
            offsets,
            indices,
            weights,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Applies the map to one channel stored contiguously.
    pub fn apply_channel(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.input_len());
        debug_assert_eq!(dst.len(), self.output_len());
        for (o, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.offsets[o]..self.offsets[o + 1] {
                acc += self.weights[k] * src[self.indices[k] as usize];
            }
            *d = acc;
        }
    }

    /// Transpose application: scatter-adds `grad_out` into `grad_in`.
    pub fn apply_channel_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (o, &g) in grad_out.iter().enumerate() {
            for k in self.offsets[o]..self.offsets[o + 1] {
                grad_in[self.indices[k] as usize] += self.weights[k] * g;
            }
        }
    }

    /// Applies the map to every leading index of an array whose trailing
    /// three axes are the spatial grid.
    pub fn apply_array(&self, x: &Array) -> Array {
        let shape = x.shape();
        let nd = shape.len();
        assert!(nd >= 3, "need at least three spatial axes");
        assert_eq!(&shape[nd - 3..], &self.input, "grid mismatch");
        let lead: usize = shape[..nd - 3].iter().product();
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let (il, ol) = (self.input_len(), self.output_len());
        let mut out = vec![0.0; lead * ol];
        for i in 0..lead {
            self.apply_channel(&xs[i * il..(i + 1) * il], &mut out[i * ol..(i + 1) * ol]);
        }
        let mut out_shape = shape[..nd - 3].to_vec();
        out_shape.extend_from_slice(&self.output);
        Array::from_shape_vec(IxDyn(&out_shape), out).unwrap()
    }
}

fn push_trilinear(input: [usize; 3], p: [f64; 3], indices: &mut Vec<u32>, weights: &mut Vec<f64>) {
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0isize; 3];
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            idx[a] = f[a] as isize + bit as isize;
            w *= if bit == 1 { t[a] } else { 1.0 - t[a] };
        }
        if w == 0.0 {
            continue;
        }
        if (0..3).any(|a| idx[a] < 0 || idx[a] >= input[a] as isize) {
            continue;
        }
        let flat = (idx[0] as usize * input[1] + idx[1] as usize) * input[2] + idx[2] as usize;
        indices.push(flat as u32);
        weights.push(w);
    }
}

/// Applies one spatial map per batch element to `x: (N, C, H, W, D)`.
pub fn resample<'g>(x: Var<'g>, maps: Arc<Vec<SpatialMap>>) -> Var<'g> {
    let xv = x.value();
    assert_eq!(xv.ndim(), 5, "resample input must be (N, C, H, W, D)");
    let s = xv.shape().to_vec();
    let (n, c) = (s[0], s[1]);
    assert_eq!(maps.len(), n, "one spatial map per sample");
    let input = [s[2], s[3], s[4]];
    let output = maps[0].output;
    for m in maps.iter() {
        assert_eq!(m.input, input, "spatial map input grid mismatch");
        assert_eq!(m.output, output, "spatial maps must share an output grid");
    }
    let (il, ol) = (maps[0].input_len(), maps[0].output_len());
    let xs = xv.as_slice().unwrap();
    let mut out = vec![0.0; n * c * ol];
    for i in 0..n {
        for ch in 0..c {
            let k = i * c + ch;
            maps[i].apply_channel(&xs[k * il..(k + 1) * il], &mut out[k * ol..(k + 1) * ol]);
        }
    }
    let value = Array::from_shape_vec(IxDyn(&[n, c, output[0], output[1], output[2]]), out).unwrap();
    x.graph().custom(&[x], value, move |g, _| {
        let gs = g.as_slice().unwrap();
        let mut gx = vec![0.0; n * c * il];
        for i in 0..n {
            for ch in 0..c {
                let k = i * c + ch;
                maps[i].apply_channel_transpose(&gs[k * ol..(k + 1) * ol], &mut gx[k * il..(k + 1) * il]);
            }
        }
        vec![Some(Array::from_shape_vec(IxDyn(&s), gx).unwrap())]
    })
}
