//! 3D max and average pooling over `(N, C, H, W, D)` values.

use ndarray::IxDyn;

use crate::graph::{Array, Var};

fn pooled_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(n + 2 * padding >= kernel, "pool window larger than padded input");
    (n + 2 * padding - kernel) / stride + 1
}

/// Max pooling with a cubic window; padded positions never win.
/// Gradients route to the first maximiser of each window.
pub fn max_pool3d<'g>(x: Var<'g>, kernel: usize, stride: usize, padding: usize) -> Var<'g> {
    let xv = x.value();
    assert_eq!(xv.ndim(), 5, "max_pool3d input must be (N, C, H, W, D)");
    let s = xv.shape();
    let (n, c, ih, iw, id) = (s[0], s[1], s[2], s[3], s[4]);
    let oh = pooled_extent(ih, kernel, stride, padding);
    let ow = pooled_extent(iw, kernel, stride, padding);
    let od = pooled_extent(id, kernel, stride, padding);
    let xs = xv.as_slice().unwrap();
    let in_vol = ih * iw * id;
    let out_vol = oh * ow * od;
    let mut out = vec![0.0; n * c * out_vol];
    let mut arg = vec![0usize; n * c * out_vol];
    for nc in 0..n * c {
        let base = nc * in_vol;
        let mut o = nc * out_vol;
        for a in 0..oh {
            let h_lo = (a * stride).saturating_sub(padding);
            let h_hi = (a * stride + kernel).saturating_sub(padding).min(ih);
            for b in 0..ow {
                let w_lo = (b * stride).saturating_sub(padding);
                let w_hi = (b * stride + kernel).saturating_sub(padding).min(iw);
                for e in 0..od {
                    let d_lo = (e * stride).saturating_sub(padding);
                    let d_hi = (e * stride + kernel).saturating_sub(padding).min(id);
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = usize::MAX;
                    for y in h_lo..h_hi {
                        for xw in w_lo..w_hi {
                            let row = base + (y * iw + xw) * id;
                            for z in d_lo..d_hi {
                                let v = xs[row + z];
                                if bi == usize::MAX || v > best {
                                    best = v;
                                    bi = row + z;
                                }
                            }
                        }
                    }
                    out[o] = best;
                    arg[o] = bi;
                    o += 1;
                }
            }
        }
    }
    let in_shape = s.to_vec();
    let value = Array::from_shape_vec(IxDyn(&[n, c, oh, ow, od]), out).unwrap();
    x.graph().custom(&[x], value, move |g, _| {
        let gs = g.as_slice().unwrap();
        let mut gx = vec![0.0; in_shape.iter().product()];
        for (&i, &gv) in arg.iter().zip(gs) {
            gx[i] += gv;
        }
        vec![Some(Array::from_shape_vec(IxDyn(&in_shape), gx).unwrap())]
    })
}

/// Average pooling with window = stride = `factor` and no padding.
pub fn avg_pool3d<'g>(x: Var<'g>, factor: usize) -> Var<'g> {
    let xv = x.value();
    assert_eq!(xv.ndim(), 5, "avg_pool3d input must be (N, C, H, W, D)");
    let s = xv.shape();
    let (n, c, ih, iw, id) = (s[0], s[1], s[2], s[3], s[4]);
    let (oh, ow, od) = (ih / factor, iw / factor, id / factor);
    let xs = xv.as_slice().unwrap();
    let scale = 1.0 / (factor * factor * factor) as f64;
    let in_vol = ih * iw * id;
    let out_vol = oh * ow * od;
    let mut out = vec![0.0; n * c * out_vol];
    for nc in 0..n * c {
        let base = nc * in_vol;
        let mut o = nc * out_vol;
        for a in 0..oh {
            for b in 0..ow {
                for e in 0..od {
                    let mut acc = 0.0;
                    for y in a * factor..(a + 1) * factor {
                        for xw in b * factor..(b + 1) * factor {
                            let row = base + (y * iw + xw) * id;
                            for z in e * factor..(e + 1) * factor {
                                acc += xs[row + z];
                            }
                        }
                    }
                    out[o] = acc * scale;
                    o += 1;
                }
            }
        }
    }
    let in_shape = s.to_vec();
    let value = Array::from_shape_vec(IxDyn(&[n, c, oh, ow, od]), out).unwrap();
    x.graph().custom(&[x], value, move |g, _| {
        let gs = g.as_slice().unwrap();
        let mut gx = vec![0.0; in_shape.iter().product()];
        for nc in 0..n * c {
            let base = nc * in_vol;
            let mut o = nc * out_vol;
            for a in 0..oh {
                for b in 0..ow {
                    for e in 0..od {
                        let gv = gs[o] * scale;
                        for y in a * factor..(a + 1) * factor {
                            for xw in b * factor..(b + 1) * factor {
                                let row = base + (y * iw + xw) * id;
                                for z in e * factor..(e + 1) * factor {
                                    gx[row + z] += gv;
                                }
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
        vec![Some(Array::from_shape_vec(IxDyn(&in_shape), gx).unwrap())]
    })
}
