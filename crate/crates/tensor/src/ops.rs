//! Elementwise, reduction, shape and linear-algebra operators.

use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, Axis, IxDyn, Slice, Zip};

use crate::graph::{standard, zeros, Array, Var};

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape(grad: &Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad.clone();
    }
    let lead = grad.ndim() - shape.len();
    let mut g = grad.clone();
    for _ in 0..lead {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    standard(g)
        .into_shape_with_order(IxDyn(shape))
        .expect("reduce_to_shape")
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(
                da == db || da == 1 || db == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            da.max(db)
        })
        .collect()
}

fn broadcast_to(x: &Array, shape: &[usize]) -> Array {
    x.broadcast(IxDyn(shape)).expect("broadcast").to_owned()
}

// Arithmetic stays as named methods: operands are graph handles and every
// call records a node, which operator syntax would hide.
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    fn binary<F>(self, other: Var<'g>, forward: F, backward: BinaryGrad) -> Var<'g>
    where
        F: Fn(f64, f64) -> f64,
    {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(a.shape(), b.shape());
        let mut out = broadcast_to(&a, &shape);
        Zip::from(&mut out)
            .and(b.broadcast(IxDyn(&shape)).unwrap())
            .for_each(|o, &bv| *o = forward(*o, bv));
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph().custom(&[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let full = backward.lhs(g, &a, &b, &shape);
                reduce_to_shape(&full, &sa)
            });
            let gb = needs[1].then(|| {
                let full = backward.rhs(g, &a, &b, &shape);
                reduce_to_shape(&full, &sb)
            });
            vec![ga, gb]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x + y, BinaryGrad::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x - y, BinaryGrad::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x * y, BinaryGrad::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x / y, BinaryGrad::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary<F, D>(self, f: F, df: D) -> Var<'g>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = Rc::new(x.mapv(&f));
        let y_out = (*y).clone();
        self.graph().custom(&[self], y_out, move |g, _| {
            let mut gx = g.clone();
            Zip::from(&mut gx)
                .and(&*x)
                .and(&*y)
                .for_each(|gv, &xv, &yv| *gv *= df(xv, yv));
            vec![Some(gx)]
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let out = self.value().mapv(|v| v + c);
        self.graph().custom(&[self], out, |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g> {
        let out = self.value().mapv(|v| v * c);
        self.graph()
            .custom(&[self], out, move |g, _| vec![Some(g.mapv(|v| v * c))])
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// `(x + eps)^(-1/2)`.
    pub fn rsqrt_eps(self, eps: f64) -> Var<'g> {
        self.unary(move |v| (v + eps).powf(-0.5), move |x, y| -0.5 * y / (x + eps))
    }

    pub fn sum_all(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Array::from_elem(IxDyn(&[]), x.sum());
        self.graph().custom(&[self], out, move |g, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some(Array::from_elem(IxDyn(&shape), gv))]
        })
    }

    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axes` (any order, no duplicates).
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = (*x).clone();
        for &a in sorted.iter().rev() {
            out = out.sum_axis(Axis(a));
        }
        let mut kept = in_shape.clone();
        for &a in &sorted {
            kept[a] = 1;
        }
        if keepdim {
            out = out.into_shape_with_order(IxDyn(&kept)).unwrap();
        }
        self.graph().custom(&[self], out, move |g, _| {
            let g = g.view().into_shape_with_order(IxDyn(&kept)).unwrap();
            vec![Some(g.broadcast(IxDyn(&in_shape)).unwrap().to_owned())]
        })
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Var<'g> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keepdim).mul_scalar(1.0 / count as f64)
    }

    fn extreme_axis(self, axis: usize, keepdim: bool, want_max: bool) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut reduced = in_shape.clone();
        reduced.remove(axis);
        let mut out = zeros(&reduced);
        let mut arg = ndarray::ArrayD::<usize>::zeros(IxDyn(&reduced));
        Zip::from(&mut out)
            .and(&mut arg)
            .and(x.lanes(Axis(axis)))
            .for_each(|o, a, lane| {
                let mut best = lane[0];
                let mut bi = 0;
                for (i, &v) in lane.iter().enumerate().skip(1) {
                    if (want_max && v > best) || (!want_max && v < best) {
                        best = v;
                        bi = i;
                    }
                }
                *o = best;
                *a = bi;
            });
        let mut kept = in_shape.clone();
        kept[axis] = 1;
        if keepdim {
            out = out.into_shape_with_order(IxDyn(&kept)).unwrap();
        }
        self.graph().custom(&[self], out, move |g, _| {
            let g = g.view().into_shape_with_order(IxDyn(&reduced)).unwrap();
            let mut gx = zeros(&in_shape);
            Zip::from(gx.lanes_mut(Axis(axis)))
                .and(&g)
                .and(&arg)
                .for_each(|mut lane, &gv, &i| lane[i] += gv);
            vec![Some(gx)]
        })
    }

    /// Maximum along one axis; the gradient goes to the first maximiser.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Var<'g> {
        self.extreme_axis(axis, keepdim, true)
    }

    /// Minimum along one axis; the gradient goes to the first minimiser.
    pub fn min_axis(self, axis: usize, keepdim: bool) -> Var<'g> {
        self.extreme_axis(axis, keepdim, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.graph().custom(&[self], out, move |g, _| {
            vec![Some(g.clone().into_shape_with_order(IxDyn(&in_shape)).unwrap())]
        })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let out = standard((*x).clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph().custom(&[self], out, move |g, _| {
            vec![Some(standard(g.clone().permuted_axes(IxDyn(&inverse))))]
        })
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = x.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.graph().custom(&[self], out, move |g, _| {
            let mut gx = zeros(&in_shape);
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            vec![Some(gx)]
        })
    }

    /// `self` multiplied by a constant array (broadcasting), without
    /// recording the constant as a separate node.
    pub fn mul_const(self, c: &Array) -> Var<'g> {
        let constant = self.graph().constant(c.clone());
        self.mul(constant)
    }

    /// Matrix product of two 2D values.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2D");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2D");
        let a2 = as2(&a);
        let b2 = as2(&b);
        let out = a2.dot(&b2).into_dyn();
        self.graph().custom(&[self, other], out, move |g, needs| {
            let g2 = as2(g);
            let ga = needs[0].then(|| g2.dot(&as2(&b).t()).into_dyn());
            let gb = needs[1].then(|| as2(&a).t().dot(&g2).into_dyn());
            vec![ga, gb]
        })
    }

    /// Batched matrix product `(N, m, k) x (N, k, n) -> (N, m, n)`.
    pub fn bmm(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), 3);
        assert_eq!(b.ndim(), 3);
        let (n, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], n);
        assert_eq!(b.shape()[1], k);
        let p = b.shape()[2];
        let mut out = zeros(&[n, m, p]);
        for i in 0..n {
            let mut o = out.index_axis_mut(Axis(0), i);
            let mut o2 = o.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            general_mat_mul(1.0, &slice2(&a, i), &slice2(&b, i), 0.0, &mut o2);
        }
        self.graph().custom(&[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = zeros(&[n, m, k]);
                for i in 0..n {
                    let mut o = ga.index_axis_mut(Axis(0), i);
                    let mut o2 = o.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                    general_mat_mul(1.0, &slice2(g, i), &slice2(&b, i).t(), 0.0, &mut o2);
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = zeros(&[n, k, p]);
                for i in 0..n {
                    let mut o = gb.index_axis_mut(Axis(0), i);
                    let mut o2 = o.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                    general_mat_mul(1.0, &slice2(&a, i).t(), &slice2(g, i), 0.0, &mut o2);
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'g> {
        let logits = self.value();
        assert_eq!(logits.ndim(), 2, "cross_entropy expects (N, K) logits");
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(targets.len(), n, "one target per row");
        let mut probs = Array2::<f64>::zeros((n, k));
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} out of range for {k} classes");
            let row = logits.slice(s![i, ..]);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = m + z.ln();
            total += log_z - row[t];
            for j in 0..k {
                probs[[i, j]] = (row[j] - log_z).exp();
            }
        }
        let out = Array::from_elem(IxDyn(&[]), total / n as f64);
        let targets = targets.to_vec();
        self.graph().custom(&[self], out, move |g, _| {
            let scale = *g.iter().next().unwrap() / n as f64;
            let mut gx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                gx[[i, t]] -= 1.0;
            }
            vec![Some(gx.mapv(|v| v * scale).into_dyn())]
        })
    }

    /// Row-wise minimum of a `(N, M)` value over the entries where `mask` is
    /// set. Every row must have at least one selected entry.
    pub fn masked_row_min(self, mask: &[Vec<bool>]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let (n, m) = (x.shape()[0], x.shape()[1]);
        assert_eq!(mask.len(), n);
        let mut out = zeros(&[n]);
        let mut arg = vec![0usize; n];
        for i in 0..n {
            assert_eq!(mask[i].len(), m);
            let mut best = f64::INFINITY;
            let mut bi = usize::MAX;
            for j in 0..m {
                if mask[i][j] && (bi == usize::MAX || x[[i, j]] < best) {
                    best = x[[i, j]];
                    bi = j;
                }
            }
            assert!(bi != usize::MAX, "row {i} has no selected entries");
            out[[i]] = best;
            arg[i] = bi;
        }
        self.graph().custom(&[self], out, move |g, _| {
            let mut gx = zeros(&[n, m]);
            for i in 0..n {
                gx[[i, arg[i]]] = g[[i]];
            }
            vec![Some(gx)]
        })
    }

    /// Min-max normalisation over all axes from `start_axis` on, separately
    /// for every index of the leading axes. A constant slice maps to 0.5
    /// and passes no gradient.
    pub fn minmax_normalize(self, start_axis: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rows: usize = shape[..start_axis].iter().product();
        let cols: usize = shape[start_axis..].iter().product();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; rows * cols];
        // (argmin, argmax, range) per row; range 0 marks a degenerate row
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let (mut lo, mut hi, mut ilo, mut ihi) = (row[0], row[0], 0, 0);
            for (i, &v) in row.iter().enumerate() {
                if v < lo {
                    lo = v;
                    ilo = i;
                }
                if v > hi {
                    hi = v;
                    ihi = i;
                }
            }
            let range = hi - lo;
            let dst = &mut out[r * cols..(r + 1) * cols];
            if range > 0.0 {
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - lo) / range;
                }
            } else {
                dst.fill(0.5);
            }
            stats.push((ilo, ihi, range));
        }
        let y = Rc::new(out);
        let out = Array::from_shape_vec(IxDyn(&shape), (*y).clone()).unwrap();
        self.graph().custom(&[self], out, move |g, _| {
            let gs = g.as_slice().expect("standard layout");
            let mut gx = vec![0.0; rows * cols];
            for (r, &(ilo, ihi, range)) in stats.iter().enumerate() {
                if range <= 0.0 {
                    continue;
                }
                let grow = &gs[r * cols..(r + 1) * cols];
                let yrow = &y[r * cols..(r + 1) * cols];
                let dst = &mut gx[r * cols..(r + 1) * cols];
                // y = (x - lo) / (hi - lo)
                let mut d_hi = 0.0;
                let mut d_lo = 0.0;
                for ((d, &gv), &yv) in dst.iter_mut().zip(grow).zip(yrow) {
                    *d = gv / range;
                    d_hi -= gv * yv / range;
                    d_lo += gv * (yv - 1.0) / range;
                }
                dst[ihi] += d_hi;
                dst[ilo] += d_lo;
            }
            vec![Some(Array::from_shape_vec(IxDyn(&shape), gx).unwrap())]
        })
    }
}

/// Concatenates values along `axis`.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!vars.is_empty(), "concat of nothing");
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    vars[0].graph().custom(vars, out, move |g, needs| {
        let mut start = 0;
        sizes
            .iter()
            .zip(needs)
            .map(|(&n, &need)| {
                let piece = need.then(|| g.slice_axis(Axis(axis), Slice::from(start..start + n)).to_owned());
                start += n;
                piece
            })
            .collect()
    })
}

/// Sum of several same-shaped values.
pub fn sum_all_of<'g>(vars: &[Var<'g>]) -> Var<'g> {
    let mut it = vars.iter().copied();
    let first = it.next().expect("sum of nothing");
    it.fold(first, |acc, v| acc.add(v))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn as2(a: &Array) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

fn slice2(a: &Array, i: usize) -> ArrayView2<'_, f64> {
    a.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap()
}

#[derive(Clone, Copy)]
enum BinaryGrad {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryGrad {
    fn lhs(self, g: &Array, _a: &Array, b: &Array, shape: &[usize]) -> Array {
        match self {
            BinaryGrad::Add | BinaryGrad::Sub => g.clone(),
            BinaryGrad::Mul => g * &b.broadcast(IxDyn(shape)).unwrap(),
            BinaryGrad::Div => g / &b.broadcast(IxDyn(shape)).unwrap(),
        }
    }

    fn rhs(self, g: &Array, a: &Array, b: &Array, shape: &[usize]) -> Array {
        match self {
            BinaryGrad::Add => g.clone(),
            BinaryGrad::Sub => -g,
            BinaryGrad::Mul => g * &a.broadcast(IxDyn(shape)).unwrap(),
            BinaryGrad::Div => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(a.broadcast(IxDyn(shape)).unwrap())
                    .and(b.broadcast(IxDyn(shape)).unwrap())
                    .for_each(|o, &av, &bv| *o = -*o * av / (bv * bv));
                out
            }
        }
    }
}
