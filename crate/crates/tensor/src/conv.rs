//! 3D convolution via tiled im2col and GEMM.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rayon::prelude::*;

use crate::graph::{zeros, Array, Var};

/// Stride and zero padding per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// Output extents for the given input extents and kernel.
    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

// im2col buffer budget in elements (32 MiB of f64)
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.plane()).max(1)).clamp(1, self.out[0])
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.padding == [0, 0, 0]
    }

    /// Fills `col` (K x rows*plane) for output rows `[h0, h0 + rows)`.
    fn im2col(&self, x: &[f64], h0: usize, rows: usize, col: &mut [f64]) {
        let [ih, iw, id] = self.input;
        let [kh, kw, kd] = self.kernel;
        let [_, ow, od] = self.out;
        let [sh, sw, sd] = self.spec.stride;
        let [ph, pw, pd] = self.spec.padding;
        let width = rows * ow * od;
        let mut r = 0;
        for c in 0..self.cin {
            let xc = &x[c * ih * iw * id..(c + 1) * ih * iw * id];
            for a in 0..kh {
                for b in 0..kw {
                    for e in 0..kd {
                        let dst = &mut col[r * width..(r + 1) * width];
                        let mut j = 0;
                        for oh in h0..h0 + rows {
                            let y = (oh * sh + a) as isize - ph as isize;
                            for owi in 0..ow {
                                let xw = (owi * sw + b) as isize - pw as isize;
                                if y < 0 || y >= ih as isize || xw < 0 || xw >= iw as isize {
                                    dst[j..j + od].fill(0.0);
                                    j += od;
                                    continue;
                                }
                                let base = (y as usize * iw + xw as usize) * id;
                                for odi in 0..od {
                                    let z = (odi * sd + e) as isize - pd as isize;
                                    dst[j] = if z >= 0 && z < id as isize {
                                        xc[base + z as usize]
                                    } else {
                                        0.0
                                    };
                                    j += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient `dx`.
    fn col2im(&self, col: &[f64], h0: usize, rows: usize, dx: &mut [f64]) {
        let [ih, iw, id] = self.input;
        let [kh, kw, kd] = self.kernel;
        let [_, ow, od] = self.out;
        let [sh, sw, sd] = self.spec.stride;
        let [ph, pw, pd] = self.spec.padding;
        let width = rows * ow * od;
        let mut r = 0;
        for c in 0..self.cin {
            let xc = &mut dx[c * ih * iw * id..(c + 1) * ih * iw * id];
            for a in 0..kh {
                for b in 0..kw {
                    for e in 0..kd {
                        let src = &col[r * width..(r + 1) * width];
                        let mut j = 0;
                        for oh in h0..h0 + rows {
                            let y = (oh * sh + a) as isize - ph as isize;
                            for owi in 0..ow {
                                let xw = (owi * sw + b) as isize - pw as isize;
                                if y < 0 || y >= ih as isize || xw < 0 || xw >= iw as isize {
                                    j += od;
                                    continue;
                                }
                                let base = (y as usize * iw + xw as usize) * id;
                                for odi in 0..od {
                                    let z = (odi * sd + e) as isize - pd as isize;
                                    if z >= 0 && z < id as isize {
                                        xc[base + z as usize] += src[j];
                                    }
                                    j += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

fn sample_slice(a: &Array, i: usize) -> &[f64] {
    let per: usize = a.shape()[1..].iter().product();
    &a.as_slice().expect("standard layout")[i * per..(i + 1) * per]
}

fn forward_sample(geo: &Geometry, x: &[f64], w: ArrayView2<'_, f64>, cout: usize) -> Vec<f64> {
    let l: usize = geo.out.iter().product();
    let mut out = vec![0.0; cout * l];
    if geo.is_pointwise() {
        let xv = ArrayView2::from_shape((geo.cin, l), x).unwrap();
        let mut ov = ArrayViewMut2::from_shape((cout, l), &mut out).unwrap();
        general_mat_mul(1.0, &w, &xv, 0.0, &mut ov);
        return out;
    }
    let k = geo.k();
    let rows_per = geo.rows_per_chunk();
    let mut col = vec![0.0; k * rows_per * geo.plane()];
    let mut ov = ArrayViewMut2::from_shape((cout, l), &mut out).unwrap();
    let mut h0 = 0;
    while h0 < geo.out[0] {
        let rows = rows_per.min(geo.out[0] - h0);
        let t = rows * geo.plane();
        geo.im2col(x, h0, rows, &mut col[..k * t]);
        let cv = ArrayView2::from_shape((k, t), &col[..k * t]).unwrap();
        let start = h0 * geo.plane();
        let mut oc = ov.slice_mut(ndarray::s![.., start..start + t]);
        general_mat_mul(1.0, &w, &cv, 0.0, &mut oc);
        h0 += rows;
    }
    out
}

/// Returns (dW contribution, optional dx) for one sample.
fn backward_sample(
    geo: &Geometry,
    x: &[f64],
    g: &[f64],
    w: ArrayView2<'_, f64>,
    cout: usize,
    need_w: bool,
    need_x: bool,
) -> (Option<Array2<f64>>, Option<Vec<f64>>) {
    let l: usize = geo.out.iter().product();
    let k = geo.k();
    let gv = ArrayView2::from_shape((cout, l), g).unwrap();
    let mut dw = need_w.then(|| Array2::<f64>::zeros((cout, k)));
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    if geo.is_pointwise() {
        let xv = ArrayView2::from_shape((geo.cin, l), x).unwrap();
        if let Some(dw) = dw.as_mut() {
            general_mat_mul(1.0, &gv, &xv.t(), 0.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dxv = ArrayViewMut2::from_shape((geo.cin, l), dx).unwrap();
            general_mat_mul(1.0, &w.t(), &gv, 0.0, &mut dxv);
        }
        return (dw, dx);
    }
    let rows_per = geo.rows_per_chunk();
    let mut col = vec![0.0; k * rows_per * geo.plane()];
    let mut h0 = 0;
    while h0 < geo.out[0] {
        let rows = rows_per.min(geo.out[0] - h0);
        let t = rows * geo.plane();
        let start = h0 * geo.plane();
        let gc = gv.slice(ndarray::s![.., start..start + t]);
        if let Some(dw) = dw.as_mut() {
            geo.im2col(x, h0, rows, &mut col[..k * t]);
            let cv = ArrayView2::from_shape((k, t), &col[..k * t]).unwrap();
            general_mat_mul(1.0, &gc, &cv.t(), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let mut cv = ArrayViewMut2::from_shape((k, t), &mut col[..k * t]).unwrap();
            general_mat_mul(1.0, &w.t(), &gc, 0.0, &mut cv);
            geo.col2im(&col[..k * t], h0, rows, dx);
        }
        h0 += rows;
    }
    (dw, dx)
}

/// 3D convolution of `x: (N, Cin, H, W, D)` with `weight: (Cout, Cin, kh, kw, kd)`
/// and optional `bias: (Cout)`.
///
/// Panics when shapes are inconsistent; callers validate user-facing shapes.
pub fn conv3d<'g>(x: Var<'g>, weight: Var<'g>, bias: Option<Var<'g>>, spec: Conv3dSpec) -> Var<'g> {
    let xv = x.value();
    let wv = weight.value();
    assert_eq!(xv.ndim(), 5, "conv3d input must be (N, C, H, W, D)");
    assert_eq!(wv.ndim(), 5, "conv3d weight must be (Cout, Cin, kh, kw, kd)");
    let (n, cin) = (xv.shape()[0], xv.shape()[1]);
    let cout = wv.shape()[0];
    assert_eq!(wv.shape()[1], cin, "conv3d channel mismatch");
    let input = [xv.shape()[2], xv.shape()[3], xv.shape()[4]];
    let kernel = [wv.shape()[2], wv.shape()[3], wv.shape()[4]];
    let out = spec
        .output_extents(input, kernel)
        .expect("conv3d kernel larger than padded input");
    let geo = Geometry {
        cin,
        input,
        kernel,
        out,
        spec,
    };
    let k = geo.k();
    let l: usize = out.iter().product();
    let w2 = wv.view().into_shape_with_order((cout, k)).expect("weight layout");
    let xa: &Array = &xv;
    let per_sample: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| forward_sample(&geo, sample_slice(xa, i), w2.view(), cout))
        .collect();
    let mut data = Vec::with_capacity(n * cout * l);
    for s in per_sample {
        data.extend(s);
    }
    let mut value = Array::from_shape_vec(IxDyn(&[n, cout, out[0], out[1], out[2]]), data).unwrap();
    if let Some(b) = bias {
        let bv = b.value();
        assert_eq!(bv.shape(), &[cout], "conv3d bias shape");
        for mut sample in value.axis_iter_mut(Axis(0)) {
            for (c, mut ch) in sample.axis_iter_mut(Axis(0)).enumerate() {
                ch += bv[[c]];
            }
        }
    }

    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    let x_shape = xv.shape().to_vec();
    let w_shape = wv.shape().to_vec();
    x.graph().custom(&parents, value, move |g, needs| {
        let need_x = needs[0];
        let need_w = needs[1];
        let w2 = wv.view().into_shape_with_order((cout, k)).unwrap();
        let xa: &Array = &xv;
        let results: Vec<_> = (0..n)
            .into_par_iter()
            .map(|i| {
                backward_sample(
                    &geo,
                    sample_slice(xa, i),
                    sample_slice(g, i),
                    w2.view(),
                    cout,
                    need_w,
                    need_x,
                )
            })
            .collect();
        let mut dw_total = need_w.then(|| Array2::<f64>::zeros((cout, k)));
        let mut dx_data = need_x.then(|| Vec::with_capacity(xv.len()));
        for (dw, dx) in results {
            if let (Some(acc), Some(dw)) = (dw_total.as_mut(), dw) {
                *acc += &dw;
            }
            if let (Some(acc), Some(dx)) = (dx_data.as_mut(), dx) {
                acc.extend(dx);
            }
        }
        let mut grads = vec![
            dx_data.map(|d| Array::from_shape_vec(IxDyn(&x_shape), d).unwrap()),
            dw_total.map(|d| d.into_shape_with_order(IxDyn(&w_shape)).unwrap()),
        ];
        if has_bias {
            grads.push(needs[2].then(|| {
                let mut gb = zeros(&[cout]);
                for sample in g.axis_iter(Axis(0)) {
                    for (c, ch) in sample.axis_iter(Axis(0)).enumerate() {
                        gb[[c]] += ch.sum();
                    }
                }
                gb
            }));
        }
        grads
    })
}
