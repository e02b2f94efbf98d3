//! Forward kernels and their adjoints on plain tensors.
//!
//! The graph in [`crate::graph`] records which kernel produced each node and
//! calls the matching adjoint during the backward sweep.

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, strides_of, Tensor};

// ---------------------------------------------------------------------------
// matmul

/// Batch layout of a matmul: `a` is `[.., p, q]`, `b` is `[.., q, r]` with
/// identical leading extents, or `b` is a plain `[q, r]` matrix shared by
/// every batch entry.
struct MatmulDims {
    batch: usize,
    p: usize,
    q: usize,
    r: usize,
    b_shared: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MatmulDims> {
    let err = || NumericsError::dim("matmul", format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()));
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(err());
    }
    let (sa, sb) = (a.shape(), b.shape());
    let p = sa[sa.len() - 2];
    let q = sa[sa.len() - 1];
    let (qb, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if q != qb {
        return Err(err());
    }
    let lead_a = &sa[..sa.len() - 2];
    let lead_b = &sb[..sb.len() - 2];
    let b_shared = lead_b.is_empty();
    if !b_shared && lead_a != lead_b {
        return Err(err());
    }
    let mut out_shape = lead_a.to_vec();
    out_shape.extend_from_slice(&[p, r]);
    Ok(MatmulDims {
        batch: lead_a.iter().product(),
        p,
        q,
        r,
        b_shared,
        out_shape,
    })
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a, b)?;
    let mut out = vec![T::ZERO; d.batch * d.p * d.r];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..d.batch {
        let a_off = i * d.p * d.q;
        let b_off = if d.b_shared { 0 } else { i * d.q * d.r };
        let c_off = i * d.p * d.r;
        // SAFETY: offsets stay inside the buffers sized from the shapes above.
        unsafe {
            T::gemm(
                d.p,
                d.q,
                d.r,
                T::ONE,
                ad.as_ptr().add(a_off),
                d.q as isize,
                1,
                bd.as_ptr().add(b_off),
                d.r as isize,
                1,
                T::ZERO,
                out.as_mut_ptr().add(c_off),
                d.r as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(d.out_shape, out))
}

/// Gradients of `a @ b` with respect to `a` and `b` given the output
/// gradient `g`. Either side can be skipped.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let d = matmul_dims(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let ga = need_a.then(|| {
        let mut ga = vec![T::ZERO; a.len()];
        for i in 0..d.batch {
            let b_off = if d.b_shared { 0 } else { i * d.q * d.r };
            // ga[i] = g[i] (p x r) * b[i]^T (r x q)
            unsafe {
                T::gemm(
                    d.p,
                    d.r,
                    d.q,
                    T::ONE,
                    g.as_ptr().add(i * d.p * d.r),
                    d.r as isize,
                    1,
                    bd.as_ptr().add(b_off),
                    1,
                    d.r as isize,
                    T::ZERO,
                    ga.as_mut_ptr().add(i * d.p * d.q),
                    d.q as isize,
                    1,
                );
            }
        }
        ga
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::ZERO; b.len()];
        if d.b_shared {
            // Sum over the batch folds into one product: a^T (q x batch*p) * g.
            let rows = d.batch * d.p;
            unsafe {
                T::gemm(
                    d.q,
                    rows,
                    d.r,
                    T::ONE,
                    ad.as_ptr(),
                    1,
                    d.q as isize,
                    g.as_ptr(),
                    d.r as isize,
                    1,
                    T::ZERO,
                    gb.as_mut_ptr(),
                    d.r as isize,
                    1,
                );
            }
        } else {
            for i in 0..d.batch {
                unsafe {
                    T::gemm(
                        d.q,
                        d.p,
                        d.r,
                        T::ONE,
                        ad.as_ptr().add(i * d.p * d.q),
                        1,
                        d.q as isize,
                        g.as_ptr().add(i * d.p * d.r),
                        d.r as isize,
                        1,
                        T::ZERO,
                        gb.as_mut_ptr().add(i * d.q * d.r),
                        d.r as isize,
                        1,
                    );
                }
            }
        }
        gb
    });
    Ok((ga, gb))
}

// ---------------------------------------------------------------------------
// broadcasting elementwise ops

/// How an operand maps onto a broadcast output.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    /// Operand equals the trailing dims of the output: offset = i % len.
    Suffix(usize),
    /// Operand equals the leading dims followed by ones: offset = i / inner.
    Prefix(usize),
    General(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn offset(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(len) => i % len,
            Bcast::Prefix(inner) => i / inner,
            Bcast::General(map) => map[i],
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn bcast_plan(out: &[usize], operand: &[usize]) -> Bcast {
    if out == operand {
        return Bcast::Same;
    }
    let len: usize = operand.iter().product();
    if operand.len() <= out.len() && out[out.len() - operand.len()..] == *operand {
        return Bcast::Suffix(len.max(1));
    }
    if operand.len() == out.len() {
        if let Some(k) = operand.iter().position(|&d| d == 1) {
            if operand[..k] == out[..k] && operand[k..].iter().all(|&d| d == 1) {
                return Bcast::Prefix(out[k..].iter().product::<usize>().max(1));
            }
        }
    }
    // Right-aligned general mapping.
    let n_out: usize = out.iter().product();
    let pad = out.len() - operand.len();
    let op_strides = strides_of(operand);
    let mut eff = vec![0usize; out.len()];
    for (i, e) in eff.iter_mut().enumerate().skip(pad) {
        let j = i - pad;
        *e = if operand[j] == 1 { 0 } else { op_strides[j] };
    }
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n_out {
        map.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Bcast::General(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        NumericsError::dim(
            op.name(),
            format!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()),
        )
    })?;
    let n: usize = shape.iter().product();
    let pa = bcast_plan(&shape, a.shape());
    let pb = bcast_plan(&shape, b.shape());
    let out = match op {
        BinaryOp::Add => broadcast_apply(a.data(), b.data(), &pa, &pb, n, |x, y| x + y),
        BinaryOp::Sub => broadcast_apply(a.data(), b.data(), &pa, &pb, n, |x, y| x - y),
        BinaryOp::Mul => broadcast_apply(a.data(), b.data(), &pa, &pb, n, |x, y| x * y),
        BinaryOp::Div => broadcast_apply(a.data(), b.data(), &pa, &pb, n, |x, y| x / y),
    };
    Ok(Tensor::from_parts(shape, out))
}

fn broadcast_apply<T: Scalar>(ad: &[T], bd: &[T], pa: &Bcast, pb: &Bcast, n: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    match (pa, pb) {
        (Bcast::Same, Bcast::Same) => out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y))),
        (Bcast::Same, Bcast::Suffix(len)) => {
            for row in ad.chunks(*len) {
                out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Suffix(len), Bcast::Same) => {
            for row in bd.chunks(*len) {
                out.extend(ad.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Same, Bcast::Prefix(inner)) => {
            for (row, &y) in ad.chunks(*inner).zip(bd) {
                out.extend(row.iter().map(|&x| f(x, y)));
            }
        }
        (Bcast::Prefix(inner), Bcast::Same) => {
            for (row, &x) in bd.chunks(*inner).zip(ad) {
                out.extend(row.iter().map(|&y| f(x, y)));
            }
        }
        _ => out.extend((0..n).map(|i| f(ad[pa.offset(i)], bd[pb.offset(i)]))),
    }
    out
}

/// Sums a gradient of the broadcast output shape back to an operand shape.
pub(crate) fn reduce_to<T: Scalar>(g: &[T], out_shape: &[usize], operand: &[usize]) -> Vec<T> {
    let plan = bcast_plan(out_shape, operand);
    if let Bcast::Same = plan {
        return g.to_vec();
    }
    let len: usize = operand.iter().product();
    let mut acc = vec![T::ZERO; len];
    for (i, &v) in g.iter().enumerate() {
        acc[plan.offset(i)] += v;
    }
    acc
}

/// Adjoint of [`binary`]: returns gradients for `a` and `b`.
pub(crate) fn binary_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    op: BinaryOp,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let shape = broadcast_shape(a.shape(), b.shape()).expect("checked in forward");
    let pa = bcast_plan(&shape, a.shape());
    let pb = bcast_plan(&shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let ga = need_a.then(|| {
        let local: Vec<T> = match op {
            BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
            BinaryOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * bd[pb.offset(i)]).collect(),
            BinaryOp::Div => g.iter().enumerate().map(|(i, &gi)| gi / bd[pb.offset(i)]).collect(),
        };
        reduce_to(&local, &shape, a.shape())
    });
    let gb = need_b.then(|| {
        let local: Vec<T> = match op {
            BinaryOp::Add => g.to_vec(),
            BinaryOp::Sub => g.iter().map(|&gi| -gi).collect(),
            BinaryOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * ad[pa.offset(i)]).collect(),
            BinaryOp::Div => g
                .iter()
                .enumerate()
                .map(|(i, &gi)| {
                    let y = bd[pb.offset(i)];
                    -gi * ad[pa.offset(i)] / (y * y)
                })
                .collect(),
        };
        reduce_to(&local, &shape, b.shape())
    });
    (ga, gb)
}

// ---------------------------------------------------------------------------
// pointwise

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub(crate) fn silu_backward<T: Scalar>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &gi)| {
            let s = sigmoid(v);
            gi * s * (T::ONE + v * (T::ONE - s))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// softmax / layer norm over the last axis

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() == 0 {
        return Err(NumericsError::dim("softmax_rows", "needs at least one axis"));
    }
    let n = *x.shape().last().unwrap();
    let mut out = vec![T::ZERO; x.len()];
    if n == 0 {
        return Ok(Tensor::from_parts(x.shape().to_vec(), out));
    }
    for (row, (src, dst)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let m = src.iter().copied().fold(T::NEG_INFINITY, |a, b| a.max(b));
        if !m.is_finite() {
            return Err(NumericsError::DegenerateRow { row });
        }
        let mut s = T::ZERO;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        let inv = T::ONE / s;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let n = *y.shape().last().unwrap();
    let mut out = vec![T::ZERO; y.len()];
    if n == 0 {
        return out;
    }
    for ((yr, gr), dst) in y.data().chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    out
}

/// Normalizes each row of the last axis to zero mean and unit variance.
/// Returns the normalized tensor and the per-row reciprocal std.
pub fn layer_norm_rows<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    if x.ndim() == 0 || *x.shape().last().unwrap() == 0 {
        return Err(NumericsError::dim("layer_norm", "needs a non-empty last axis"));
    }
    let n = *x.shape().last().unwrap();
    let nf = T::from_usize(n);
    let eps = T::from_f64(eps);
    let rows = x.len() / n;
    let mut out = vec![T::ZERO; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        let mean = src.iter().copied().sum::<T>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::ONE / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * r;
        }
        rstd.push(r);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), rstd))
}

pub(crate) fn layer_norm_backward<T: Scalar>(xhat: &Tensor<T>, rstd: &[T], g: &[T]) -> Vec<T> {
    let n = *xhat.shape().last().unwrap();
    let nf = T::from_usize(n);
    let mut out = vec![T::ZERO; xhat.len()];
    for (((xr, gr), dst), &r) in xhat.data().chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)).zip(rstd) {
        let sg: T = gr.iter().copied().sum();
        let sgx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
        for ((d, &xi), &gi) in dst.iter_mut().zip(xr).zip(gr) {
            *d = r / nf * (nf * gi - sg - xi * sgx);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// reductions and shape ops

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(NumericsError::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

/// Sum over `axis`, removing it.
pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("sum_axis", x.shape(), axis)?;
    let (outer, ext, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::ZERO; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for k in 0..ext {
            let src = &xd[(o * ext + k) * inner..(o * ext + k + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("mean_axis", x.shape(), axis)?;
    let ext = x.shape()[axis];
    let s = sum_axis(x, axis)?;
    let inv = T::ONE / T::from_usize(ext.max(1));
    Ok(s.scale(inv))
}

/// Adjoint of [`sum_axis`]: broadcasts `g` back along `axis`.
pub(crate) fn expand_axis<T: Scalar>(g: &[T], in_shape: &[usize], axis: usize, scale: T) -> Vec<T> {
    let (outer, ext, inner) = split_axis(in_shape, axis);
    let mut out = vec![T::ZERO; outer * ext * inner];
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for k in 0..ext {
            let dst = &mut out[(o * ext + k) * inner..(o * ext + k + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale;
            }
        }
    }
    out
}

pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(NumericsError::dim(
            "permute",
            format!("{perm:?} is not a permutation of the axes of {:?}", x.shape()),
        ));
    }
    Ok(permute_data(x, perm))
}

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let xd = x.data();
    let nd = out_shape.len();
    if n == 0 || nd == 0 {
        out.extend_from_slice(xd);
        return Tensor::from_parts(out_shape, out);
    }
    // Odometer over the outer axes, strided run over the last one.
    let (inner, step) = (out_shape[nd - 1], src_strides[nd - 1]);
    let outer = nd - 1;
    let mut idx = vec![0usize; outer];
    let mut off = 0usize;
    for _ in 0..n / inner {
        if step == 1 {
            out.extend_from_slice(&xd[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| xd[off + j * step]));
        }
        for ax in (0..outer).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn permute_grad<T: Scalar>(g: &[T], out_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
    permute_data(&gt, &inverse_permutation(perm)).to_vec()
}

pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| NumericsError::dim("concat", "no inputs"))?;
    check_axis("concat", first.shape(), axis)?;
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for x in xs {
        let s = x.shape();
        let compatible = s.len() == first.ndim()
            && s.iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(NumericsError::dim(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", first.shape(), s),
            ));
        }
        shape[axis] += s[axis];
    }
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// `len` entries of `axis` starting at `start`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis("narrow", x.shape(), axis)?;
    if start + len > x.shape()[axis] {
        return Err(NumericsError::dim(
            "narrow",
            format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, ext, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub fn index_select<T: Scalar>(x: &Tensor<T>, axis: usize, index: &[usize]) -> Result<Tensor<T>> {
    check_axis("index_select", x.shape(), axis)?;
    let (outer, ext, inner) = split_axis(x.shape(), axis);
    if let Some(&bad) = index.iter().find(|&&i| i >= ext) {
        return Err(NumericsError::dim(
            "index_select",
            format!("index {bad} out of range for axis {axis} of {:?}", x.shape()),
        ));
    }
    let mut out = Vec::with_capacity(outer * index.len() * inner);
    for o in 0..outer {
        for &i in index {
            let base = (o * ext + i) * inner;
            out.extend_from_slice(&x.data()[base..base + inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = index.len();
    Ok(Tensor::from_parts(shape, out))
}

/// Accumulates slices of `src` into a zero tensor with `extent` entries
/// along `axis`: `out[.., index[i], ..] += src[.., i, ..]`.
pub fn index_add<T: Scalar>(src: &Tensor<T>, axis: usize, index: &[usize], extent: usize) -> Result<Tensor<T>> {
    check_axis("index_add", src.shape(), axis)?;
    if src.shape()[axis] != index.len() {
        return Err(NumericsError::dim(
            "index_add",
            format!("{} indices for axis of extent {}", index.len(), src.shape()[axis]),
        ));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= extent) {
        return Err(NumericsError::dim(
            "index_add",
            format!("index {bad} out of range for extent {extent}"),
        ));
    }
    let (outer, n, inner) = split_axis(src.shape(), axis);
    let mut out = vec![T::ZERO; outer * extent * inner];
    for o in 0..outer {
        for (k, &i) in index.iter().enumerate().take(n) {
            let s = &src.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
            let d = &mut out[(o * extent + i) * inner..(o * extent + i + 1) * inner];
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv += sv;
            }
        }
    }
    let mut shape = src.shape().to_vec();
    shape[axis] = extent;
    Ok(Tensor::from_parts(shape, out))
}

// ---------------------------------------------------------------------------
// deformable im2col

/// Geometry of a stride-1, same-padding `k x k` sampling window.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub k: usize,
    pub pad: usize,
}

impl Window {
    pub fn same(k: usize) -> Self {
        Window { k, pad: k / 2 }
    }
}

#[inline]
fn bilinear_taps<T: Scalar>(py: T, px: T, h: usize, w: usize) -> [(Option<usize>, T); 4] {
    let y0 = py.to_isize_floor();
    let x0 = px.to_isize_floor();
    let fy = py - T::from_f64(y0 as f64);
    let fx = px - T::from_f64(x0 as f64);
    let at = |y: isize, x: isize| -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
    };
    [
        (at(y0, x0), (T::ONE - fy) * (T::ONE - fx)),
        (at(y0, x0 + 1), (T::ONE - fy) * fx),
        (at(y0 + 1, x0), fy * (T::ONE - fx)),
        (at(y0 + 1, x0 + 1), fy * fx),
    ]
}

fn deform_dims<T: Scalar>(input: &Tensor<T>, offsets: &Tensor<T>, win: Window) -> Result<(usize, usize, usize, usize)> {
    if input.ndim() != 4 {
        return Err(NumericsError::dim(
            "deform_im2col",
            format!("input must be [B,C,H,W], got {:?}", input.shape()),
        ));
    }
    let (b, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let taps = win.k * win.k;
    if offsets.shape() != [b, 2 * taps, h, w] {
        return Err(NumericsError::dim(
            "deform_im2col",
            format!(
                "offsets must be {:?} for input {:?}, got {:?}",
                [b, 2 * taps, h, w],
                input.shape(),
                offsets.shape()
            ),
        ));
    }
    Ok((b, c, h, w))
}

/// Samples each `k x k` window at offset positions with bilinear
/// interpolation (zero outside the grid).
///
/// `offsets` is `[B, 2k², H, W]`, channel `2t` holding the row shift and
/// `2t + 1` the column shift of tap `t`, in cells. Output is
/// `[B, H*W, C*k²]` with column index `c * k² + t`.
pub fn deform_im2col<T: Scalar>(input: &Tensor<T>, offsets: &Tensor<T>, win: Window) -> Result<Tensor<T>> {
    let (b, c, h, w) = deform_dims(input, offsets, win)?;
    let taps = win.k * win.k;
    let cols = c * taps;
    let mut out = vec![T::ZERO; b * h * w * cols];
    let (xd, od) = (input.data(), offsets.data());
    let plane = h * w;
    // Corner table of one output position: invalid corners get weight 0 at
    // index 0, so the channel loop is branch free.
    let mut idx = vec![[0usize; 4]; taps];
    let mut wgt = vec![[T::ZERO; 4]; taps];
    let mut exact = vec![false; taps];
    for bi in 0..b {
        let x_b = &xd[bi * c * plane..(bi + 1) * c * plane];
        let o_b = &od[bi * 2 * taps * plane..(bi + 1) * 2 * taps * plane];
        for oy in 0..h {
            for ox in 0..w {
                let pos = oy * w + ox;
                for t in 0..taps {
                    let (ky, kx) = (t / win.k, t % win.k);
                    let py = T::from_usize(oy + ky) - T::from_usize(win.pad) + o_b[(2 * t) * plane + pos];
                    let px = T::from_usize(ox + kx) - T::from_usize(win.pad) + o_b[(2 * t + 1) * plane + pos];
                    for (k, (i, wv)) in bilinear_taps(py, px, h, w).into_iter().enumerate() {
                        idx[t][k] = i.unwrap_or(0);
                        wgt[t][k] = if i.is_some() { wv } else { T::ZERO };
                    }
                    // Taps landing exactly on a cell read a single value.
                    exact[t] = wgt[t][1] == T::ZERO && wgt[t][2] == T::ZERO && wgt[t][3] == T::ZERO;
                }
                let row = &mut out[(bi * plane + pos) * cols..(bi * plane + pos + 1) * cols];
                for (ci, dst) in row.chunks_exact_mut(taps).enumerate() {
                    let src = &x_b[ci * plane..(ci + 1) * plane];
                    for (((d, ix), wv), &one) in dst.iter_mut().zip(&idx).zip(&wgt).zip(&exact) {
                        *d = if one {
                            wv[0] * src[ix[0]]
                        } else {
                            wv[0] * src[ix[0]] + wv[1] * src[ix[1]] + wv[2] * src[ix[2]] + wv[3] * src[ix[3]]
                        };
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, plane, cols], out))
}

/// Adjoint of [`deform_im2col`] with respect to the input and the offsets.
pub(crate) fn deform_im2col_backward<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    win: Window,
    g: &[T],
    need_input: bool,
    need_offsets: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (b, c, h, w) = deform_dims(input, offsets, win).expect("checked in forward");
    let taps = win.k * win.k;
    let cols = c * taps;
    let plane = h * w;
    let (xd, od) = (input.data(), offsets.data());
    let mut gx = need_input.then(|| vec![T::ZERO; input.len()]);
    let mut go = need_offsets.then(|| vec![T::ZERO; offsets.len()]);
    for bi in 0..b {
        let x_b = &xd[bi * c * plane..(bi + 1) * c * plane];
        let o_base = bi * 2 * taps * plane;
        for oy in 0..h {
            for ox in 0..w {
                let pos = oy * w + ox;
                let grow = &g[(bi * plane + pos) * cols..(bi * plane + pos + 1) * cols];
                for t in 0..taps {
                    let (ky, kx) = (t / win.k, t % win.k);
                    let dy = od[o_base + (2 * t) * plane + pos];
                    let dx = od[o_base + (2 * t + 1) * plane + pos];
                    let py = T::from_usize(oy + ky) - T::from_usize(win.pad) + dy;
                    let px = T::from_usize(ox + kx) - T::from_usize(win.pad) + dx;
                    let corners = bilinear_taps(py, px, h, w);
                    if let Some(gx) = gx.as_mut() {
                        for ci in 0..c {
                            let gv = grow[ci * taps + t];
                            let dst = &mut gx[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                            for (idx, wgt) in corners {
                                if let Some(i) = idx {
                                    dst[i] += wgt * gv;
                                }
                            }
                        }
                    }
                    if let Some(go) = go.as_mut() {
                        let y0 = py.to_isize_floor();
                        let x0 = px.to_isize_floor();
                        let fy = py - T::from_f64(y0 as f64);
                        let fx = px - T::from_f64(x0 as f64);
                        let val = |src: &[T], y: isize, x: isize| -> T {
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                src[y as usize * w + x as usize]
                            } else {
                                T::ZERO
                            }
                        };
                        let mut gdy = T::ZERO;
                        let mut gdx = T::ZERO;
                        for ci in 0..c {
                            let gv = grow[ci * taps + t];
                            if gv == T::ZERO {
                                continue;
                            }
                            let src = &x_b[ci * plane..(ci + 1) * plane];
                            let v00 = val(src, y0, x0);
                            let v01 = val(src, y0, x0 + 1);
                            let v10 = val(src, y0 + 1, x0);
                            let v11 = val(src, y0 + 1, x0 + 1);
                            gdy += gv * ((T::ONE - fx) * (v10 - v00) + fx * (v11 - v01));
                            gdx += gv * ((T::ONE - fy) * (v01 - v00) + fy * (v11 - v10));
                        }
                        go[o_base + (2 * t) * plane + pos] += gdy;
                        go[o_base + (2 * t + 1) * plane + pos] += gdx;
                    }
                }
            }
        }
    }
    (gx, go)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_is_noop() {
        let m = t(&[2, 2], &[0.5, -1.0, 2.0, 7.0]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[4, 5], |i| (i % 7) as f64 - 3.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            let direct = matmul(&a.row(bi), &b).unwrap();
            assert_eq!(c.row(bi), direct);
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&t(&[2], &[2f64.ln(), 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_rows(&t(&[2], &[5.0, f64::NEG_INFINITY])).unwrap();
        assert_eq!(s.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_all_masked_row() {
        let x = t(&[2, 2], &[0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(softmax_rows(&x), Err(NumericsError::DegenerateRow { row: 1 })));
    }

    #[test]
    fn large_negative_sentinel_underflows_to_zero() {
        let x32 = Tensor::<f32>::from_f64(&[3], &[1.5, 1.5 - 1e9, -2.0]).unwrap();
        assert_eq!(softmax_rows(&x32).unwrap().data()[1], 0.0);
        let x64 = t(&[3], &[1.5, 1.5 - 1e9, -2.0]);
        assert_eq!(softmax_rows(&x64).unwrap().data()[1], 0.0);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0f64), 0.0);
        assert!((silu_scalar(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn broadcast_plans() {
        assert!(matches!(bcast_plan(&[2, 3], &[3]), Bcast::Suffix(3)));
        assert!(matches!(bcast_plan(&[2, 3], &[2, 1]), Bcast::Prefix(3)));
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 1, 1], &[10.0, 20.0]);
        let c = binary(&a, &b, BinaryOp::Add).unwrap();
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(c.get(&[1, 0, 2]), 23.0);
        assert_eq!(c.get(&[0, 1, 0]), 14.0);
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y.get(&[k, i, j]), x.get(&[i, j, k]));
                }
            }
        }
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 1], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(narrow(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(narrow(&c, 1, 3, 1).unwrap(), b);
    }

    #[test]
    fn index_add_accumulates_repeats() {
        let src = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = index_add(&src, 0, &[1, 1, 0], 3).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, 6.0, 4.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_axis_out_of_range() {
        let x = Tensor::<f32>::zeros(&[2, 2]);
        assert!(mean_axis(&x, 2).is_err());
    }

    #[test]
    fn bilinear_half_cell_shift_splits_impulse() {
        // 1x1x1x3 input with an impulse in the middle, single tap, shifted
        // half a cell along columns.
        let input = t(&[1, 1, 1, 3], &[0.0, 1.0, 0.0]);
        let mut off = vec![0.0; 3 * 2];
        // tap 0, column shift for every output position
        for p in 0..3 {
            off[3 + p] = 0.5;
        }
        let offsets = t(&[1, 2, 1, 3], &off);
        let cols = deform_im2col(&input, &offsets, Window { k: 1, pad: 0 }).unwrap();
        assert_eq!(cols.to_vec(), vec![0.5, 0.5, 0.0]);
    }
}
