//! The differentiable operation set.

use super::{gemm, numel, BackwardCtx, Scalar, Tensor};
use crate::error::{Error, Result};

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast frame `out` (0 on broadcast dims).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let own = contiguous_strides(shape);
    (0..out.len())
        .map(|d| {
            if d < off || (shape[d - off] == 1 && out[d] != 1) {
                0
            } else {
                own[d - off]
            }
        })
        .collect()
}

/// Visits every element of `out` with the matching offsets into two operands.
fn for_each2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if numel(out) == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let (step_a, step_b) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut base_a, mut base_b, mut o) = (0usize, 0usize, 0usize);
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += step_a;
            ib += step_b;
        }
        let mut d = r - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient laid out over `out` down to a broadcast operand's shape.
fn reduce_to<T: Scalar>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let st = broadcast_strides(target, out);
    let mut res = vec![T::zero(); numel(target)];
    if let Layout::Trailing(block) = layout(&st, out) {
        for chunk in grad.chunks(block) {
            res.iter_mut().zip(chunk).for_each(|(r, &g)| *r = *r + g);
        }
        return res;
    }
    for_each2(out, &st, &st, |o, it, _| res[it] = res[it] + grad[o]);
    res
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let r = shape.len();
    if r > 1 && perm[r - 1] == r - 1 {
        let inner = shape[r - 1];
        let mut out = Vec::with_capacity(data.len());
        for_each2(&out_shape[..r - 1], &src[..r - 1], &src[..r - 1], |_, i, _| {
            out.extend_from_slice(&data[i..i + inner])
        });
        return (out, out_shape);
    }
    let mut out = vec![T::zero(); data.len()];
    for_each2(&out_shape, &src, &src, |o, i, _| out[o] = data[i]);
    (out, out_shape)
}

fn broadcast_apply<T: Scalar>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    frame: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n = numel(frame);
    let mut out = Vec::with_capacity(n);
    match (layout(sa, frame), layout(sb, frame)) {
        (Layout::Full, Layout::Full) => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        (Layout::Full, Layout::Trailing(m)) => {
            for row in a.chunks(m) {
                out.extend(row.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        (Layout::Trailing(m), Layout::Full) => {
            for row in b.chunks(m) {
                out.extend(a.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => {
            out.resize(n, T::zero());
            for_each2(frame, sa, sb, |o, i, j| out[o] = f(a[i], b[j]));
        }
    }
    out
}

/// An operand materialized over a frame of `n` elements.
fn expand<T: Scalar>(x: &[T], layout: Layout, n: usize) -> std::borrow::Cow<'_, [T]> {
    match layout {
        Layout::Trailing(_) => x.iter().copied().cycle().take(n).collect::<Vec<T>>().into(),
        _ => x.into(),
    }
}

/// How an operand's strides sit inside a broadcast frame.
#[derive(Clone, Copy, PartialEq)]
enum Layout {
    /// Same shape as the frame.
    Full,
    /// Repeats a block of this many elements over the leading axes.
    Trailing(usize),
    General,
}

fn layout(strides: &[usize], frame: &[usize]) -> Layout {
    let cont = contiguous_strides(frame);
    if strides == cont.as_slice() {
        return Layout::Full;
    }
    let r = frame.len();
    let lead = strides.iter().take_while(|&&s| s == 0).count();
    if lead > 0 && lead < r && strides[lead..] == cont[lead..] {
        return Layout::Trailing(numel(&frame[lead..]));
    }
    Layout::General
}

/// `(outer, n, inner)` split of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary, op: &'static str) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            Error::shape(
                op,
                format!("cannot broadcast {:?} with {:?}", self.shape(), other.shape()),
            )
        })?;
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let (a, b) = (self.data(), other.data());
        let out = match kind {
            Binary::Add => broadcast_apply(a, &sa, b, &sb, &out_shape, |x, y| x + y),
            Binary::Sub => broadcast_apply(a, &sa, b, &sb, &out_shape, |x, y| x - y),
            Binary::Mul => broadcast_apply(a, &sa, b, &sb, &out_shape, |x, y| x * y),
            Binary::Div => broadcast_apply(a, &sa, b, &sb, &out_shape, |x, y| x / y),
        };
        let frame = out_shape.clone();
        Ok(Tensor::from_op(
            op,
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                let (a, b, g) = (pa.data(), pb.data(), ctx.grad);
                let (la, lb) = (layout(&sa, &frame), layout(&sb, &frame));
                if la != Layout::General && lb != Layout::General {
                    let ae = expand(a, la, g.len());
                    let be = expand(b, lb, g.len());
                    let ga = pa.requires_grad().then(|| {
                        let full: Vec<T> = match kind {
                            Binary::Add | Binary::Sub => g.to_vec(),
                            Binary::Mul => g.iter().zip(be.iter()).map(|(&g, &y)| g * y).collect(),
                            Binary::Div => g.iter().zip(be.iter()).map(|(&g, &y)| g / y).collect(),
                        };
                        reduce_to(&full, &frame, pa.shape())
                    });
                    let gb = pb.requires_grad().then(|| {
                        let full: Vec<T> = match kind {
                            Binary::Add => g.to_vec(),
                            Binary::Sub => g.iter().map(|&g| -g).collect(),
                            Binary::Mul => g.iter().zip(ae.iter()).map(|(&g, &x)| g * x).collect(),
                            Binary::Div => g
                                .iter()
                                .zip(ae.iter().zip(be.iter()))
                                .map(|(&g, (&x, &y))| -(g * x / (y * y)))
                                .collect(),
                        };
                        reduce_to(&full, &frame, pb.shape())
                    });
                    return vec![ga, gb];
                }
                let ga = pa.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); a.len()];
                    match kind {
                        Binary::Add | Binary::Sub => {
                            for_each2(&frame, &sa, &sb, |o, i, _| ga[i] = ga[i] + g[o])
                        }
                        Binary::Mul => {
                            for_each2(&frame, &sa, &sb, |o, i, j| ga[i] = ga[i] + g[o] * b[j])
                        }
                        Binary::Div => {
                            for_each2(&frame, &sa, &sb, |o, i, j| ga[i] = ga[i] + g[o] / b[j])
                        }
                    }
                    ga
                });
                let gb = pb.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); b.len()];
                    match kind {
                        Binary::Add => for_each2(&frame, &sa, &sb, |o, _, j| gb[j] = gb[j] + g[o]),
                        Binary::Sub => for_each2(&frame, &sa, &sb, |o, _, j| gb[j] = gb[j] - g[o]),
                        Binary::Mul => {
                            for_each2(&frame, &sa, &sb, |o, i, j| gb[j] = gb[j] + g[o] * a[i])
                        }
                        Binary::Div => for_each2(&frame, &sa, &sb, |o, i, j| {
                            gb[j] = gb[j] - g[o] * a[i] / (b[j] * b[j])
                        }),
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div, "div")
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let x = ctx.parents[0].data();
                let gx = ctx
                    .grad
                    .iter()
                    .zip(x)
                    .zip(ctx.out)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
            },
        )
    }

    /// `self [..., k] @ w [k, n]`.
    pub fn matmul(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let k = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("matmul", "lhs is a scalar"))?;
        if w.rank() != 2 || w.dim(0) != k {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} vs weight {:?}", self.shape(), w.shape()),
            ));
        }
        let n = w.dim(1);
        let m = self.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(), false, w.data(), false, &mut out, false);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), w.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (x, w) = (&ctx.parents[0], &ctx.parents[1]);
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(m, n, k, ctx.grad, false, w.data(), true, &mut gx, false);
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(k, m, n, x.data(), true, ctx.grad, false, &mut gw, false);
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Batched product over identical leading dims:
    /// `[.., m, k] @ [.., k, n]`, or `[.., m, k] @ [.., n, k]ᵀ` with `trans_b`.
    pub fn bmm(&self, other: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || ra != rb || self.shape()[..ra - 2] != other.shape()[..rb - 2] {
            return Err(Error::shape(
                "bmm",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.dim(ra - 2), self.dim(ra - 1));
        let (bk, n) = if trans_b {
            (other.dim(rb - 1), other.dim(rb - 2))
        } else {
            (other.dim(rb - 2), other.dim(rb - 1))
        };
        if bk != k {
            return Err(Error::shape(
                "bmm",
                format!("inner dims {:?} vs {:?} (trans_b={trans_b})", self.shape(), other.shape()),
            ));
        }
        let batch: usize = self.shape()[..ra - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (a, b) = (self.data(), other.data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = self.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            "bmm",
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                let (a, b, g) = (pa.data(), pb.data(), ctx.grad);
                let ga = pa.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &b[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        // C = A·B  => dA = dC·Bᵀ ; C = A·Bᵀ => dA = dC·B
                        gemm(m, n, k, gi, false, bi, !trans_b, out, false);
                    }
                    ga
                });
                let gb = pb.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &a[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB[n,k] = dCᵀ·A
                            gemm(n, m, k, gi, true, ai, false, out, false);
                        } else {
                            // dB[k,n] = Aᵀ·dC
                            gemm(k, m, n, ai, true, gi, false, out, false);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_, T>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..self.rank()).collect::<Vec<_>>() {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", self.rank()),
            ));
        }
        let (out, out_shape) = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let frame = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(permute_data(ctx.grad, &frame, &inverse).0)]
            }),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Materialized broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{:?} -> {:?}", self.shape(), shape),
                ))
            }
        }
        let st = broadcast_strides(self.shape(), shape);
        let a = self.data();
        let mut out = vec![T::zero(); numel(shape)];
        for_each2(shape, &st, &st, |o, i, _| out[o] = a[i]);
        let (frame, target) = (shape.to_vec(), self.shape().to_vec());
        Ok(Tensor::from_op(
            "broadcast_to",
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(reduce_to(ctx.grad, &frame, &target))]
            }),
        ))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let src = &ctx.grad[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} of {:?}", self.shape())))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all().scale(1.0 / self.numel().max(1) as f64)
    }

    pub fn concat(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
                ));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let sizes: Vec<usize> = tensors.iter().map(|t| t.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &s) in tensors.iter().zip(&sizes) {
                out.extend_from_slice(&t.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            out,
            tensors.iter().map(|t| (*t).clone()).collect(),
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut grads: Vec<Vec<T>> =
                    sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &s) in grads.iter_mut().zip(&sizes) {
                        g.extend_from_slice(&ctx.grad[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.dim(axis) {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape().last() {
            Some(&d) if d >= 1 => Ok(d),
            _ => Err(Error::shape(op, format!("needs a nonempty last dim, got {:?}", self.shape()))),
        }
    }

    /// Softmax over the last dimension (max-subtracted).
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let d = self.last_dim("softmax")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut gx = vec![T::zero(); ctx.out.len()];
                for ((gx, y), g) in gx.chunks_mut(d).zip(ctx.out.chunks(d)).zip(ctx.grad.chunks(d)) {
                    let dot: T = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
                    for i in 0..d {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let d = self.last_dim("log_softmax")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        Ok(Tensor::from_op(
            "log_softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut gx = vec![T::zero(); ctx.out.len()];
                for ((gx, y), g) in gx.chunks_mut(d).zip(ctx.out.chunks(d)).zip(ctx.grad.chunks(d)) {
                    let total: T = g.iter().copied().sum();
                    for i in 0..d {
                        gx[i] = g[i] - y[i].exp() * total;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last dimension, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = self.last_dim("layer_norm")?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", self.shape(), gain.shape(), bias.shape()),
            ));
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let rows = self.numel() / d;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let (gv, bv) = (gain.data(), bias.data());
        let mut out = vec![T::zero(); self.numel()];
        let rows_iter = self.data().chunks(d).zip(xhat.chunks_mut(d)).zip(out.chunks_mut(d));
        for (r, ((src, dst), y)) in rows_iter.enumerate() {
            let mean = src.iter().copied().sum::<T>() * inv_d;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (((o, y), &v), (&g, &b)) in dst.iter_mut().zip(y.iter_mut()).zip(src).zip(gv.iter().zip(bv)) {
                *o = (v - mean) * rs;
                *y = *o * g + b;
            }
        }
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (px, pg, pb) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
                let gain = pg.data();
                let g = ctx.grad;
                let gx = px.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for i in 0..d {
                            dxhat[i] = gr[i] * gain[i];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for i in 0..d {
                            gx[r * d + i] = rstd[r] * (dxhat[i] - m1 - xr[i] * m2);
                        }
                    }
                    gx
                });
                let gg = pg.requires_grad().then(|| {
                    let mut gg = vec![T::zero(); d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            gg[i] = gg[i] + gr[i] * xr[i];
                        }
                    }
                    gg
                });
                let gb = pb.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a = *a + b);
                    }
                    gb
                });
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Scales every last-dim slice to unit L2 norm; a zero slice is an error.
    pub fn l2_normalize(&self) -> Result<Tensor<T>> {
        let d = self.last_dim("l2_normalize")?;
        let mut norms = Vec::with_capacity(self.numel() / d);
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "cannot normalize a vector with norm {n}"
                )));
            }
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        Ok(Tensor::from_op(
            "l2_normalize",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut gx = vec![T::zero(); ctx.out.len()];
                for (r, ((gx, y), g)) in gx
                    .chunks_mut(d)
                    .zip(ctx.out.chunks(d))
                    .zip(ctx.grad.chunks(d))
                    .enumerate()
                {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for i in 0..d {
                        gx[i] = (g[i] - y[i] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Stack equally shaped tensors along a new leading-or-inner axis.
    pub fn stack(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let expanded = tensors
            .iter()
            .map(|t| {
                let mut s = t.shape().to_vec();
                if axis > s.len() {
                    return Err(Error::shape("stack", format!("axis {axis} of {s:?}")));
                }
                s.insert(axis, 1);
                t.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = expanded.iter().collect();
        Tensor::concat(&refs, axis)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}
