//! Tensor operations and their backward rules.
//!
//! Heavy loops parallelize over fixed-size disjoint chunks so results are
//! bit-identical for any worker count.

use rayon::prelude::*;

use super::autograd::make_result;
use super::{numel, strides, Element, Result, Tensor, TensorError};

/// Below this element count parallel dispatch costs more than it saves.
const PAR_MIN: usize = 1 << 15;
const PAR_CHUNK: usize = 1 << 16;
/// Row block for parallel GEMM; each block is an independent full-K GEMM, so
/// per-element accumulation order never depends on the split.
const GEMM_ROW_CHUNK: usize = 128;

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// A broadcast operand whose non-1 extents form one contiguous run matching
/// the output can be indexed as `(i / inner) % cycle`; this covers same-shape,
/// scalar, trailing-suffix, and per-channel `[C,1,1]` patterns.
fn cyclic_broadcast(out_shape: &[usize], b_shape: &[usize]) -> Option<(usize, usize)> {
    let rank = out_shape.len();
    let pad = rank - b_shape.len();
    let mut first = None;
    let mut last = None;
    for i in 0..rank {
        let db = if i < pad { 1 } else { b_shape[i - pad] };
        if db != 1 {
            if db != out_shape[i] {
                return None;
            }
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    let (Some(first), Some(last)) = (first, last) else {
        return Some((1, 1)); // all-ones operand: constant
    };
    // inside the run every extent must match the output
    for i in first..=last {
        let db = if i < pad { 1 } else { b_shape[i - pad] };
        if db != out_shape[i] {
            return None;
        }
    }
    let inner: usize = out_shape[last + 1..].iter().product();
    let cycle: usize = out_shape[first..=last].iter().product();
    Some((inner, cycle))
}

/// Strides of an operand in output-index space (0 where broadcast).
fn broadcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let own = strides(shape);
    let mut s = vec![0usize; rank];
    for i in 0..rank {
        if i >= pad && shape[i - pad] != 1 {
            s[i] = own[i - pad];
        }
    }
    s
}

/// Walks the output linearly yielding the flat operand index (general case).
struct BroadcastIter {
    counters: Vec<usize>,
    extents: Vec<usize>,
    strides: Vec<usize>,
    idx: usize,
}

impl BroadcastIter {
    fn new(out_shape: &[usize], op_shape: &[usize]) -> Self {
        BroadcastIter {
            counters: vec![0; out_shape.len()],
            extents: out_shape.to_vec(),
            strides: broadcast_strides(out_shape, op_shape),
            idx: 0,
        }
    }

    #[inline]
    fn advance(&mut self) -> usize {
        let cur = self.idx;
        for d in (0..self.extents.len()).rev() {
            self.counters[d] += 1;
            self.idx += self.strides[d];
            if self.counters[d] < self.extents[d] {
                return cur;
            }
            self.counters[d] = 0;
            self.idx -= self.strides[d] * self.extents[d];
        }
        cur
    }
}

/// Sums `grad` (shaped `from`) down to `to` (right-aligned broadcast inverse).
pub(crate) fn reduce_grad_to_shape<T: Element>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let n_to = numel(to);
    let mut out = vec![T::zero(); n_to];
    if let Some((inner, cycle)) = cyclic_broadcast(from, to) {
        if n_to == cycle {
            // accumulate per cycle slot in fixed linear order
            for (i, g) in grad.iter().enumerate() {
                out[(i / inner) % cycle] += *g;
            }
            return out;
        }
    }
    let mut it = BroadcastIter::new(from, to);
    for g in grad {
        out[it.advance()] += *g;
    }
    out
}

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

fn binary_map<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T + Sync,
) -> Vec<T> {
    let n = numel(out_shape);
    let (a_ref, b_ref) = (a.data(), b.data());
    let ad: &[T] = &a_ref;
    let bd: &[T] = &b_ref;
    let mut out = vec![T::zero(); n];
    if a.shape() == out_shape {
        if let Some((inner, cycle)) = cyclic_broadcast(out_shape, b.shape()) {
            let run = |chunk: &mut [T], start: usize| {
                for (j, o) in chunk.iter_mut().enumerate() {
                    let i = start + j;
                    *o = f(ad[i], bd[(i / inner) % cycle]);
                }
            };
            if n >= PAR_MIN {
                out.par_chunks_mut(PAR_CHUNK)
                    .enumerate()
                    .for_each(|(ci, chunk)| run(chunk, ci * PAR_CHUNK));
            } else {
                run(&mut out, 0);
            }
            return out;
        }
    }
    if b.shape() == out_shape {
        if let Some((inner, cycle)) = cyclic_broadcast(out_shape, a.shape()) {
            let run = |chunk: &mut [T], start: usize| {
                for (j, o) in chunk.iter_mut().enumerate() {
                    let i = start + j;
                    *o = f(ad[(i / inner) % cycle], bd[i]);
                }
            };
            if n >= PAR_MIN {
                out.par_chunks_mut(PAR_CHUNK)
                    .enumerate()
                    .for_each(|(ci, chunk)| run(chunk, ci * PAR_CHUNK));
            } else {
                run(&mut out, 0);
            }
            return out;
        }
    }
    let mut ia = BroadcastIter::new(out_shape, a.shape());
    let mut ib = BroadcastIter::new(out_shape, b.shape());
    for o in out.iter_mut() {
        *o = f(ad[ia.advance()], bd[ib.advance()]);
    }
    out
}

/// grad * dfd? evaluated at broadcast positions, reduced back to the operand.
fn binary_grad<T: Element>(
    grad: &[T],
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    target: &Tensor<T>,
    df: impl Fn(T, T) -> T + Sync,
) -> Vec<T> {
    let n = grad.len();
    let same_shape = target.shape() == out_shape;
    let (a_ref, b_ref) = (a.data(), b.data());
    let ad: &[T] = &a_ref;
    let bd: &[T] = &b_ref;
    let mut full = vec![T::zero(); n];
    let sa = cyclic_broadcast(out_shape, a.shape());
    let sb = cyclic_broadcast(out_shape, b.shape());
    match (sa, sb) {
        (Some((ia, ca)), Some((ib, cb))) => {
            let run = |chunk: &mut [T], start: usize| {
                for (j, o) in chunk.iter_mut().enumerate() {
                    let i = start + j;
                    *o = grad[i] * df(ad[(i / ia) % ca], bd[(i / ib) % cb]);
                }
            };
            if n >= PAR_MIN {
                full.par_chunks_mut(PAR_CHUNK)
                    .enumerate()
                    .for_each(|(ci, chunk)| run(chunk, ci * PAR_CHUNK));
            } else {
                run(&mut full, 0);
            }
        }
        _ => {
            let mut ita = BroadcastIter::new(out_shape, a.shape());
            let mut itb = BroadcastIter::new(out_shape, b.shape());
            for (o, g) in full.iter_mut().zip(grad) {
                *o = *g * df(ad[ita.advance()], bd[itb.advance()]);
            }
        }
    }
    if same_shape {
        return full;
    }
    reduce_grad_to_shape(&full, out_shape, target.shape())
}

impl<T: Element> Tensor<T> {
    fn binary_op(
        &self,
        rhs: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T + Sync + Copy + 'static,
        dfda: impl Fn(T, T) -> T + Sync + Copy + 'static,
        dfdb: impl Fn(T, T) -> T + Sync + Copy + 'static,
    ) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(op, self.shape(), rhs.shape())?;
        let data = binary_map(self, rhs, &out_shape, f);
        let shape_c = out_shape.clone();
        make_result(
            op,
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                let a = &ctx.inputs[0];
                let b = &ctx.inputs[1];
                let da = a
                    .tracked()
                    .then(|| binary_grad(ctx.grad_output, a, b, &shape_c, a, dfda));
                let db = b
                    .tracked()
                    .then(|| binary_grad(ctx.grad_output, a, b, &shape_c, b, dfdb));
                vec![da, db]
            },
        )
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(rhs, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(rhs, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Division. `x/0` yields Inf/NaN, which checked mode reports as an error.
    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(
            rhs,
            "div",
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary_op("add_scalar", move |x| x + c, move |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary_op("mul_scalar", move |x| x * c, move |_, _| c)
    }

    // -----------------------------------------------------------------------
    // elementwise unary ops
    // -----------------------------------------------------------------------

    fn unary_op(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T + Sync + Copy + 'static,
        // df receives (x, y) so rules can reuse whichever is cheaper
        df: impl Fn(T, T) -> T + Sync + Copy + 'static,
    ) -> Result<Tensor<T>> {
        let x_ref = self.data();
        let xd: &[T] = &x_ref;
        let n = xd.len();
        let mut data = vec![T::zero(); n];
        if n >= PAR_MIN {
            data.par_chunks_mut(PAR_CHUNK)
                .zip(xd.par_chunks(PAR_CHUNK))
                .for_each(|(o, x)| {
                    for (oi, xi) in o.iter_mut().zip(x) {
                        *oi = f(*xi);
                    }
                });
        } else {
            for (o, x) in data.iter_mut().zip(xd.iter()) {
                *o = f(*x);
            }
        }
        drop(x_ref);
        make_result(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |ctx| {
                let x_ref = ctx.inputs[0].data();
                let x: &[T] = &x_ref;
                let mut dx = vec![T::zero(); x.len()];
                if x.len() >= PAR_MIN {
                    dx.par_chunks_mut(PAR_CHUNK)
                        .zip(x.par_chunks(PAR_CHUNK))
                        .zip(ctx.output.par_chunks(PAR_CHUNK))
                        .zip(ctx.grad_output.par_chunks(PAR_CHUNK))
                        .for_each(|(((d, x), y), g)| {
                            for i in 0..d.len() {
                                d[i] = g[i] * df(x[i], y[i]);
                            }
                        });
                } else {
                    for i in 0..dx.len() {
                        dx[i] = ctx.grad_output[i] * df(x[i], ctx.output[i]);
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary_op("neg", |x| -x, |_, _| -T::one())
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary_op(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary_op("exp", |x| x.exp(), |_, y| y)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        let half = T::from_f64(0.5);
        self.unary_op("sqrt", |x| x.sqrt(), move |_, y| half / y)
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF (no tanh approximation).
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let phi = move |x: T| half * (T::one() + (x * inv_sqrt2).erf());
        self.unary_op(
            "gelu",
            move |x| x * phi(x),
            move |x, _| phi(x) + x * inv_sqrt_2pi * (-half * x * x).exp(),
        )
    }

    // -----------------------------------------------------------------------
    // reductions
    // -----------------------------------------------------------------------

    fn reduce_prep(&self, op: &'static str, axes: &[usize], keepdims: bool) -> Result<ReducePlan> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::InvalidAxis { op, axis: ax, rank });
            }
            if seen[ax] {
                return Err(TensorError::InvalidArgument {
                    op,
                    msg: format!("duplicate axis {ax}"),
                });
            }
            seen[ax] = true;
        }
        let shape = self.shape();
        let mut out_shape = Vec::new();
        for (d, &ext) in shape.iter().enumerate() {
            if seen[d] {
                if keepdims {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(ext);
            }
        }
        // strides of the output laid over the input's dims (0 on reduced dims)
        let kept: Vec<usize> = (0..rank).filter(|&d| !seen[d]).map(|d| shape[d]).collect();
        let kept_strides = strides(&kept);
        let mut map = vec![0usize; rank];
        let mut ki = 0;
        for d in 0..rank {
            if !seen[d] {
                map[d] = kept_strides[ki];
                ki += 1;
            }
        }
        let count: usize = (0..rank).filter(|&d| seen[d]).map(|d| shape[d]).product();
        Ok(ReducePlan {
            out_shape,
            out_numel: kept.iter().product::<usize>().max(1),
            in_to_out: map,
            count: count.max(1),
        })
    }

    pub fn reduce_sum(&self, axes: &[usize], keepdims: bool) -> Result<Tensor<T>> {
        let plan = self.reduce_prep("reduce_sum", axes, keepdims)?;
        let xd = self.data();
        let mut out = vec![T::zero(); plan.out_numel];
        let mut it = plan.walker(self.shape());
        for x in xd.iter() {
            out[it.advance()] += *x;
        }
        drop(xd);
        let shape_in = self.shape().to_vec();
        let plan_b = plan.clone();
        make_result(
            "reduce_sum",
            plan.out_shape.clone(),
            out,
            vec![self.clone()],
            move |ctx| {
                let mut dx = vec![T::zero(); numel(&shape_in)];
                let mut it = plan_b.walker(&shape_in);
                for d in dx.iter_mut() {
                    *d = ctx.grad_output[it.advance()];
                }
                vec![Some(dx)]
            },
        )
    }

    pub fn reduce_mean(&self, axes: &[usize], keepdims: bool) -> Result<Tensor<T>> {
        let plan = self.reduce_prep("reduce_mean", axes, keepdims)?;
        let inv = T::one() / T::from_f64(plan.count as f64);
        let xd = self.data();
        let mut out = vec![T::zero(); plan.out_numel];
        let mut it = plan.walker(self.shape());
        for x in xd.iter() {
            out[it.advance()] += *x;
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        drop(xd);
        let shape_in = self.shape().to_vec();
        let plan_b = plan.clone();
        make_result(
            "reduce_mean",
            plan.out_shape.clone(),
            out,
            vec![self.clone()],
            move |ctx| {
                let mut dx = vec![T::zero(); numel(&shape_in)];
                let mut it = plan_b.walker(&shape_in);
                for d in dx.iter_mut() {
                    *d = ctx.grad_output[it.advance()] * inv;
                }
                vec![Some(dx)]
            },
        )
    }

    /// Max over `axes`; gradient flows to the first maximal element of each
    /// reduced group.
    pub fn reduce_max(&self, axes: &[usize], keepdims: bool) -> Result<Tensor<T>> {
        let plan = self.reduce_prep("reduce_max", axes, keepdims)?;
        let xd = self.data();
        let mut out = vec![T::neg_infinity(); plan.out_numel];
        let mut it = plan.walker(self.shape());
        for x in xd.iter() {
            let o = &mut out[it.advance()];
            if *x > *o {
                *o = *x;
            }
        }
        drop(xd);
        let shape_in = self.shape().to_vec();
        let plan_b = plan.clone();
        make_result(
            "reduce_max",
            plan.out_shape.clone(),
            out,
            vec![self.clone()],
            move |ctx| {
                let x = ctx.inputs[0].data();
                let mut dx = vec![T::zero(); numel(&shape_in)];
                let mut claimed = vec![false; ctx.output.len()];
                let mut it = plan_b.walker(&shape_in);
                for (i, d) in dx.iter_mut().enumerate() {
                    let oi = it.advance();
                    if !claimed[oi] && x[i] == ctx.output[oi] {
                        claimed[oi] = true;
                        *d = ctx.grad_output[oi];
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce_sum(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce_mean(&axes, false)
    }

    // -----------------------------------------------------------------------
    // softmax
    // -----------------------------------------------------------------------

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let x_ref = self.data();
        let xd: &[T] = &x_ref;
        let mut out = vec![T::zero(); xd.len()];
        let row = extent * inner;
        let run = |slab: &mut [T], xs: &[T]| {
            for i in 0..inner {
                let mut mx = T::neg_infinity();
                for j in 0..extent {
                    let v = xs[j * inner + i];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..extent {
                    let e = (xs[j * inner + i] - mx).exp();
                    slab[j * inner + i] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..extent {
                    slab[j * inner + i] *= inv;
                }
            }
        };
        if outer * row >= PAR_MIN && outer > 1 {
            out.par_chunks_mut(row)
                .zip(xd.par_chunks(row))
                .for_each(|(slab, xs)| run(slab, xs));
        } else {
            for (slab, xs) in out.chunks_mut(row).zip(xd.chunks(row)) {
                run(slab, xs);
            }
        }
        drop(x_ref);
        make_result(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |ctx| {
                let y = ctx.output;
                let g = ctx.grad_output;
                let mut dx = vec![T::zero(); y.len()];
                let run = |d: &mut [T], y: &[T], g: &[T]| {
                    for i in 0..inner {
                        let mut dot = T::zero();
                        for j in 0..extent {
                            let k = j * inner + i;
                            dot += g[k] * y[k];
                        }
                        for j in 0..extent {
                            let k = j * inner + i;
                            d[k] = y[k] * (g[k] - dot);
                        }
                    }
                };
                if outer * row >= PAR_MIN && outer > 1 {
                    dx.par_chunks_mut(row)
                        .zip(y.par_chunks(row))
                        .zip(g.par_chunks(row))
                        .for_each(|((d, y), g)| run(d, y, g));
                } else {
                    for ((d, y), g) in dx.chunks_mut(row).zip(y.chunks(row)).zip(g.chunks(row)) {
                        run(d, y, g);
                    }
                }
                vec![Some(dx)]
            },
        )
    }

    // -----------------------------------------------------------------------
    // shape ops
    // -----------------------------------------------------------------------

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel(&new_shape) != self.numel() {
            return Err(TensorError::InvalidArgument {
                op: "reshape",
                msg: format!(
                    "cannot reshape {:?} ({} elements) to {:?} ({})",
                    self.shape(),
                    self.numel(),
                    new_shape,
                    numel(&new_shape)
                ),
            });
        }
        let data = self.to_vec();
        // row-major layout is unchanged, so the gradient passes through as-is
        make_result("reshape", new_shape, data, vec![self.clone()], |ctx| {
            vec![Some(ctx.grad_output.to_vec())]
        })
    }

    /// Reorders axes; `perm` must be a permutation of `0..rank`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of 0..{rank}"),
            });
        }
        let (out_shape, data) = permute_raw(self.shape(), &self.data(), perm);
        let mut inverse = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inverse[p] = d;
        }
        let out_shape_b = out_shape.clone();
        make_result(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            move |ctx| {
                let (_, dx) = permute_raw(&out_shape_b, ctx.grad_output, &inverse);
                vec![Some(dx)]
            },
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank,
            });
        }
        let extent = self.shape()[axis];
        if start + len > extent || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} out of bounds for extent {extent}", start + len),
            });
        }
        let (outer, _, inner) = axis_split(self.shape(), axis);
        let xd = self.data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * extent + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        drop(xd);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        make_result(
            "narrow",
            out_shape,
            out,
            vec![self.clone()],
            move |ctx| {
                let mut dx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&ctx.grad_output[src..src + len * inner]);
                }
                vec![Some(dx)]
            },
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut total = 0usize;
        for p in parts {
            if p.rank() != rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut offset = 0usize;
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        for (p, &ext) in parts.iter().zip(&extents) {
            let pd = p.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * ext * inner;
                out[dst..dst + ext * inner].copy_from_slice(&pd[src..src + ext * inner]);
            }
            offset += ext;
        }
        make_result(
            "concat",
            out_shape,
            out,
            parts.to_vec(),
            move |ctx| {
                let mut grads = Vec::with_capacity(ctx.inputs.len());
                let mut offset = 0usize;
                for (input, &ext) in ctx.inputs.iter().zip(&extents) {
                    if input.tracked() {
                        let mut dx = vec![T::zero(); outer * ext * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            dx[dst..dst + ext * inner]
                                .copy_from_slice(&ctx.grad_output[src..src + ext * inner]);
                        }
                        grads.push(Some(dx));
                    } else {
                        grads.push(None);
                    }
                    offset += ext;
                }
                grads
            },
        )
    }

    /// Materializes a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes("broadcast_to", self.shape(), shape)?;
        if out_shape != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let xd = self.data();
        let n = numel(&out_shape);
        let mut out = vec![T::zero(); n];
        if let Some((inner, cycle)) = cyclic_broadcast(&out_shape, self.shape()) {
            for (i, o) in out.iter_mut().enumerate() {
                *o = xd[(i / inner) % cycle];
            }
        } else {
            let mut it = BroadcastIter::new(&out_shape, self.shape());
            for o in out.iter_mut() {
                *o = xd[it.advance()];
            }
        }
        drop(xd);
        let from = out_shape.clone();
        let to = self.shape().to_vec();
        make_result(
            "broadcast_to",
            out_shape,
            out,
            vec![self.clone()],
            move |ctx| vec![Some(reduce_grad_to_shape(ctx.grad_output, &from, &to))],
        )
    }

    // -----------------------------------------------------------------------
    // matrix multiplication
    // -----------------------------------------------------------------------

    /// Batched matrix product: `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading (batch) dims must match exactly; plain 2-D inputs are the
    /// degenerate case.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(rhs, false)
    }

    /// Like [`Tensor::matmul`] but `rhs` is stored `[.., n, k]` and used
    /// transposed; avoids materializing the transpose.
    pub(crate) fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        if ls.len() < 2 || rs.len() != ls.len() || ls[..ls.len() - 2] != rs[..rs.len() - 2] {
            return Err(mismatch());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (rk, n) = if trans_b {
            (rs[rs.len() - 1], rs[rs.len() - 2])
        } else {
            (rs[rs.len() - 2], rs[rs.len() - 1])
        };
        if k != rk {
            return Err(mismatch());
        }
        let batch: usize = ls[..ls.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            batched_gemm(
                &a,
                Layout::normal(m, k),
                &b,
                if trans_b { Layout::transposed(k, n) } else { Layout::normal(k, n) },
                &mut out,
                batch,
                m,
                k,
                n,
                T::zero(),
            );
        }
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        make_result(
            "matmul",
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            move |ctx| {
                let a_t = &ctx.inputs[0];
                let b_t = &ctx.inputs[1];
                let g = ctx.grad_output;
                let da = a_t.tracked().then(|| {
                    let b = b_t.data();
                    let mut da = vec![T::zero(); a_t.numel()];
                    // dA[m,k] = G * B_logical^T; when rhs was stored transposed
                    // that is just the stored buffer read row-major.
                    let b_layout = if trans_b { Layout::normal(n, k) } else { Layout::normal(k, n).swap() };
                    batched_gemm(g, Layout::normal(m, n), &b, b_layout, &mut da, batch, m, n, k, T::zero());
                    da
                });
                let db = b_t.tracked().then(|| {
                    let a = a_t.data();
                    let mut db = vec![T::zero(); b_t.numel()];
                    if trans_b {
                        // dB_stored[n,k] = G^T * A
                        batched_gemm(g, Layout::normal(m, n).swap(), &a, Layout::normal(m, k), &mut db, batch, n, m, k, T::zero());
                    } else {
                        // dB[k,n] = A^T * G
                        batched_gemm(&a, Layout::normal(m, k).swap(), g, Layout::normal(m, n), &mut db, batch, k, m, n, T::zero());
                    }
                    db
                });
                vec![da, db]
            },
        )
    }

    /// Fused `x @ w^T + bias` for 2-D `x [n, in]`, `w [out, in]`.
    pub(crate) fn linear2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if b.shape() != [d_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: vec![d_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        {
            let x = self.data();
            let w = weight.data();
            let beta = if let Some(b) = bias {
                let bd = b.data();
                for row in out.chunks_mut(d_out) {
                    row.copy_from_slice(&bd);
                }
                T::one()
            } else {
                T::zero()
            };
            batched_gemm(&x, Layout::normal(n, d_in), &w, Layout::transposed(d_in, d_out), &mut out, 1, n, d_in, d_out, beta);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let has_bias = bias.is_some();
        make_result("linear", vec![n, d_out], out, inputs, move |ctx| {
            let x_t = &ctx.inputs[0];
            let w_t = &ctx.inputs[1];
            let g = ctx.grad_output;
            let dx = x_t.tracked().then(|| {
                let w = w_t.data();
                let mut dx = vec![T::zero(); n * d_in];
                // dX = G * W
                batched_gemm(g, Layout::normal(n, d_out), &w, Layout::normal(d_out, d_in), &mut dx, 1, n, d_out, d_in, T::zero());
                dx
            });
            let dw = w_t.tracked().then(|| {
                let x = x_t.data();
                let mut dw = vec![T::zero(); d_out * d_in];
                // dW = G^T * X
                batched_gemm(g, Layout::normal(n, d_out).swap(), &x, Layout::normal(n, d_in), &mut dw, 1, d_out, n, d_in, T::zero());
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                let db = ctx.inputs[2].tracked().then(|| {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        for (d, gi) in db.iter_mut().zip(row) {
                            *d += *gi;
                        }
                    }
                    db
                });
                grads.push(db);
            }
            grads
        })
    }
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

/// Matrix operand layout: row/col strides for a logically `[r, c]` matrix.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    rs: isize,
    cs: isize,
    len: usize,
}

impl Layout {
    /// Row-major `[r, c]`.
    pub(crate) fn normal(r: usize, c: usize) -> Layout {
        Layout {
            rs: c as isize,
            cs: 1,
            len: r * c,
        }
    }

    /// Stored row-major `[c, r]`, used as its transpose `[r, c]`.
    pub(crate) fn transposed(r: usize, c: usize) -> Layout {
        Layout {
            rs: 1,
            cs: r as isize,
            len: r * c,
        }
    }

    /// The same storage viewed as its transpose.
    pub(crate) fn swap(self) -> Layout {
        Layout {
            rs: self.cs,
            cs: self.rs,
            len: self.len,
        }
    }
}

/// C[b] = A[b] * B[b] + beta * C[b] for each batch; parallel over batches, or
/// over fixed row blocks when there is a single large matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<T: Element>(
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    debug_assert_eq!(c.len(), batch * m * n);
    let a_stride = la.len;
    let b_stride = lb.len;
    let flops = m * k * n;
    if batch == 1 {
        if flops >= 1 << 18 && m >= 2 * GEMM_ROW_CHUNK {
            // row blocks are independent full-K GEMMs: bit-stable under any split
            c.par_chunks_mut(GEMM_ROW_CHUNK * n)
                .enumerate()
                .for_each(|(ci, cc)| {
                    let r0 = ci * GEMM_ROW_CHUNK;
                    let rows = cc.len() / n;
                    unsafe {
                        T::gemm(
                            rows,
                            k,
                            n,
                            T::one(),
                            a.as_ptr().offset(r0 as isize * la.rs),
                            la.rs,
                            la.cs,
                            b.as_ptr(),
                            lb.rs,
                            lb.cs,
                            beta,
                            cc.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                });
        } else {
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.as_ptr(),
                    la.rs,
                    la.cs,
                    b.as_ptr(),
                    lb.rs,
                    lb.cs,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        return;
    }
    let body = |(bi, cc): (usize, &mut [T])| unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(bi * a_stride),
            la.rs,
            la.cs,
            b.as_ptr().add(bi * b_stride),
            lb.rs,
            lb.cs,
            beta,
            cc.as_mut_ptr(),
            n as isize,
            1,
        );
    };
    if batch * flops >= 1 << 16 {
        c.par_chunks_mut(m * n).enumerate().for_each(body);
    } else {
        c.chunks_mut(m * n).enumerate().for_each(body);
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_raw<T: Element>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = vec![T::zero(); n];
    let run = |chunk: &mut [T], start: usize| {
        // odometer over the output index space
        let mut counters = vec![0usize; rank];
        let mut rem = start;
        let mut src = 0usize;
        for d in 0..rank {
            let os: usize = out_shape[d + 1..].iter().product();
            counters[d] = rem / os;
            rem %= os;
            src += counters[d] * src_stride[d];
        }
        for o in chunk.iter_mut() {
            *o = data[src];
            for d in (0..rank).rev() {
                counters[d] += 1;
                src += src_stride[d];
                if counters[d] < out_shape[d] {
                    break;
                }
                counters[d] = 0;
                src -= src_stride[d] * out_shape[d];
            }
        }
    };
    if n >= PAR_MIN {
        out.par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| run(chunk, ci * PAR_CHUNK));
    } else {
        run(&mut out, 0);
    }
    (out_shape, out)
}

#[derive(Clone)]
struct ReducePlan {
    out_shape: Vec<usize>,
    out_numel: usize,
    in_to_out: Vec<usize>,
    count: usize,
}

impl ReducePlan {
    fn walker(&self, in_shape: &[usize]) -> BroadcastWalk {
        BroadcastWalk {
            counters: vec![0; in_shape.len()],
            extents: in_shape.to_vec(),
            strides: self.in_to_out.clone(),
            idx: 0,
        }
    }
}

/// Linear walk over an input yielding the mapped output index.
struct BroadcastWalk {
    counters: Vec<usize>,
    extents: Vec<usize>,
    strides: Vec<usize>,
    idx: usize,
}

impl BroadcastWalk {
    #[inline]
    fn advance(&mut self) -> usize {
        let cur = self.idx;
        for d in (0..self.extents.len()).rev() {
            self.counters[d] += 1;
            self.idx += self.strides[d];
            if self.counters[d] < self.extents[d] {
                return cur;
            }
            self.counters[d] = 0;
            self.idx -= self.strides[d] * self.extents[d];
        }
        cur
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{set_checked_mode, Tensor, TensorError};

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: {a} vs {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(vec![2, 2], vec![7.0, 8.0, 9.0, 10.0]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.to_vec(), vec![7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_contract() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![3, 4]);
        assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 4]);
        let bad = Tensor::<f32>::zeros(vec![4, 4]);
        assert!(matches!(
            a.matmul(&bad),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let mut rng = crate::tensor::RngStream::new(11);
        let a = rng.uniform_tensor::<f64>(vec![3, 2, 4, 5], -1.0, 1.0);
        let b = rng.uniform_tensor::<f64>(vec![3, 2, 5, 3], -1.0, 1.0);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[3, 2, 4, 3]);
        let (ad, bd, od) = (a.data(), b.data(), out.data());
        for batch in 0..6 {
            for i in 0..4 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..5 {
                        acc += ad[batch * 20 + i * 5 + k] * bd[batch * 15 + k * 3 + j];
                    }
                    let got = od[batch * 12 + i * 3 + j];
                    assert!((acc - got).abs() < 1e-12, "batch {batch} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn matmul_nt_matches_permuted() {
        let mut rng = crate::tensor::RngStream::new(3);
        let a = rng.uniform_tensor::<f64>(vec![4, 6], -1.0, 1.0);
        let bt = rng.uniform_tensor::<f64>(vec![5, 6], -1.0, 1.0);
        let nt = a.matmul_nt(&bt).unwrap();
        let b = bt.permute(&[1, 0]).unwrap();
        let plain = a.matmul(&b).unwrap();
        assert_close(&nt.to_vec(), &plain.to_vec(), 1e-13);
    }

    #[test]
    fn add_and_broadcast() {
        let a = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);

        // per-channel [C,1,1] pattern over [B,C,H,W]
        let x = Tensor::from_vec(vec![1, 2, 1, 3], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = Tensor::from_vec(vec![2, 1, 1], vec![10.0, 20.0]).unwrap();
        assert_eq!(
            x.add(&c).unwrap().to_vec(),
            vec![10.0, 11.0, 12.0, 23.0, 24.0, 25.0]
        );

        // general mixed broadcast
        let p = Tensor::from_vec(vec![2, 1], vec![1.0f64, 2.0]).unwrap();
        let q = Tensor::from_vec(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(
            p.add(&q).unwrap().to_vec(),
            vec![11.0, 21.0, 31.0, 12.0, 22.0, 32.0]
        );
    }

    #[test]
    fn broadcast_backward_reduces() {
        let a = Tensor::from_vec(vec![3, 2], vec![1.0f64; 6]).unwrap().with_grad();
        let b = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn gelu_exact_values() {
        let x = Tensor::from_vec(vec![4], vec![0.0f64, 3.0, 1.0, -0.5]).unwrap();
        let y = x.gelu().unwrap();
        assert_close(
            &y.to_vec(),
            &[
                0.0,
                2.9959503059051097,
                0.8413447460685429,
                -0.15426876936299345,
            ],
            1e-12,
        );
    }

    #[test]
    fn div_checked_mode_policy() {
        let a = Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap();
        let zero = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        set_checked_mode(true);
        let err = a.div(&zero);
        set_checked_mode(false);
        assert!(matches!(err, Err(TensorError::NonFinite { .. })));
        // release policy: propagate
        let out = a.div(&zero).unwrap();
        assert!(out.to_vec()[1].is_infinite());
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_vec(vec![2], vec![0.0f64, 0.0]).unwrap();
        assert_close(&x.softmax(0).unwrap().to_vec(), &[0.5, 0.5], 1e-12);

        let big = Tensor::from_vec(vec![2], vec![1000.0f64, 1000.0]).unwrap();
        assert_close(&big.softmax(0).unwrap().to_vec(), &[0.5, 0.5], 1e-12);

        let x = Tensor::from_vec(vec![2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        assert_close(&x.softmax(0).unwrap().to_vec(), &[0.25, 0.75], 1e-12);
    }

    #[test]
    fn softmax_inner_axis() {
        let x = Tensor::from_vec(vec![2, 2], vec![0.0f64, 1.0, 3.0f64.ln(), 1.0]).unwrap();
        let y = x.softmax(0).unwrap();
        // column 0: [0, ln3] -> [0.25, 0.75]; column 1: equal -> [0.5, 0.5]
        assert_close(&y.to_vec(), &[0.25, 0.5, 0.75, 0.5], 1e-12);
    }

    #[test]
    fn reduce_examples() {
        let x = Tensor::from_vec(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(x.reduce_sum(&[0], false).unwrap().to_vec(), vec![6.0]);

        let c = Tensor::full(vec![2, 2], 5.0f64);
        // empty axis list: mean normalizes over nothing and is the identity
        assert_eq!(c.reduce_mean(&[], false).unwrap().to_vec(), vec![5.0; 4]);

        let m = Tensor::from_vec(vec![2, 2], vec![1.0f64, 9.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.reduce_max(&[1], false).unwrap().to_vec(), vec![9.0, 4.0]);

        assert!(matches!(
            x.reduce_sum(&[1], false),
            Err(TensorError::InvalidAxis { .. })
        ));
        assert!(matches!(
            x.reduce_sum(&[0, 0], false),
            Err(TensorError::InvalidArgument { .. })
        ));
    }

    #[test]
    fn reduce_keepdims_shape() {
        let x = Tensor::<f32>::ones(vec![2, 3, 4]);
        assert_eq!(x.reduce_sum(&[1], true).unwrap().shape(), &[2, 1, 4]);
        assert_eq!(x.reduce_sum(&[1], false).unwrap().shape(), &[2, 4]);
        assert_eq!(x.reduce_sum(&[0, 2], false).unwrap().to_vec(), vec![8.0; 3]);
        assert_eq!(x.reduce_mean(&[0, 2], false).unwrap().to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn shape_ops_roundtrip() {
        let mut rng = crate::tensor::RngStream::new(5);
        let x = rng.uniform_tensor::<f64>(vec![2, 3, 4], -1.0, 1.0);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let r = x.reshape(vec![6, 4]).unwrap();
        assert_eq!(r.to_vec(), x.to_vec());

        let n = x.narrow(1, 1, 2).unwrap();
        assert_eq!(n.shape(), &[2, 2, 4]);
        let full = Tensor::concat(&[x.narrow(1, 0, 1).unwrap(), n], 1).unwrap();
        assert_eq!(full.to_vec(), x.to_vec());
    }

    #[test]
    fn broadcast_to_expands() {
        let x = Tensor::from_vec(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = x.broadcast_to(&[3, 2]).unwrap();
        assert_eq!(b.to_vec(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(x.broadcast_to(&[3, 4]).is_err());
    }

    #[test]
    fn linear2d_matches_manual() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![10.0, -10.0]).unwrap();
        let y = x.linear2d(&w, Some(&b)).unwrap();
        assert_close(&y.to_vec(), &[8.0, -7.0, 8.0, -2.5], 1e-12);
    }
}
