//! Forward kernels and backward rules for the tape primitives. Everything
//! here is pure tensor math; recording and traversal live in `tape`.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, broadcast_strides, strides_of, Scalar, Tensor};

// ── elementwise with broadcast ──────────────────────────────────────

pub(crate) fn ew_binary<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..numel {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            ia += coords[d] * sa[d];
            ib += coords[d] * sb[d];
        }
        data.push(f(ad[ia], bd[ib]));
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Broadcast-expand `t` to `target` shape (copying data).
pub(crate) fn broadcast_to<E: Scalar>(t: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if t.shape() == target {
        return t.clone();
    }
    let st = broadcast_strides(t.shape(), target);
    let numel: usize = target.iter().product();
    let rank = target.len();
    let mut coords = vec![0usize; rank];
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut idx = 0;
        for d in 0..rank {
            idx += coords[d] * st[d];
        }
        data.push(t.data()[idx]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < target[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Tensor::from_vec(target.to_vec(), data).unwrap()
}

// ── matmul ──────────────────────────────────────────────────────────

/// out[m,n] += a[m,k] @ b[k,n]
pub(crate) fn mm_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + ap * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] @ b[k,n]^T
pub(crate) fn mm_nt_acc<E: Scalar>(g: &[E], b: &[E], m: usize, n: usize, k: usize, out: &mut [E]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ g[m,n]
pub(crate) fn mm_tn_acc<E: Scalar>(a: &[E], g: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + ap * gv;
            }
        }
    }
}

pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Per-batch element offsets into a and b (stride 0 across broadcast dims).
    pub a_offsets: Vec<usize>,
    pub b_offsets: Vec<usize>,
}

pub(crate) fn matmul_plan<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<MatmulPlan> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} @ {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch_a = &a.shape()[..a.rank() - 2];
    let batch_b = &b.shape()[..b.rank() - 2];
    let batch_shape = broadcast_shapes(batch_a, batch_b)?;
    let batch: usize = batch_shape.iter().product();

    let sa = broadcast_strides(batch_a, &batch_shape);
    let sb = broadcast_strides(batch_b, &batch_shape);
    let mut a_offsets = Vec::with_capacity(batch);
    let mut b_offsets = Vec::with_capacity(batch);
    let rank = batch_shape.len();
    let mut coords = vec![0usize; rank];
    for _ in 0..batch.max(1) {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank {
            ia += coords[d] * sa[d];
            ib += coords[d] * sb[d];
        }
        a_offsets.push(ia * m * ka);
        b_offsets.push(ib * kb * n);
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < batch_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }

    let mut out_shape = batch_shape;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        out_shape,
        batch: batch.max(1),
        m,
        k: ka,
        n,
        a_offsets,
        b_offsets,
    })
}

pub(crate) fn matmul_fw<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, plan: &MatmulPlan) -> Tensor<E> {
    let mut out = Tensor::zeros(plan.out_shape.clone());
    let (m, k, n) = (plan.m, plan.k, plan.n);
    for bi in 0..plan.batch {
        let ad = &a.data()[plan.a_offsets[bi]..plan.a_offsets[bi] + m * k];
        let bd = &b.data()[plan.b_offsets[bi]..plan.b_offsets[bi] + k * n];
        mm_acc(ad, bd, m, k, n, &mut out.data_mut()[bi * m * n..(bi + 1) * m * n]);
    }
    out
}

// ── axis helpers ────────────────────────────────────────────────────

/// Decompose `shape` around `axis` into (outer, extent, inner) sizes.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Apply `f` to each lane (slice along `axis`); lanes are gathered into a
/// scratch buffer and written back.
fn for_each_lane<E: Scalar>(
    data: &[E],
    shape: &[usize],
    axis: usize,
    out: &mut [E],
    mut f: impl FnMut(&[E], &mut [E]),
) {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut lane = vec![E::zero(); n];
    let mut lane_out = vec![E::zero(); n];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * n * inner + j;
            for (i, l) in lane.iter_mut().enumerate() {
                *l = data[base + i * inner];
            }
            f(&lane, &mut lane_out);
            for (i, &l) in lane_out.iter().enumerate() {
                out[base + i * inner] = l;
            }
        }
    }
}

pub(crate) fn softmax_fw<E: Scalar>(x: &Tensor<E>, axis: usize) -> Tensor<E> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    for_each_lane(x.data(), x.shape(), axis, out.data_mut(), |lane, lane_out| {
        let mx = lane.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut denom = E::zero();
        for (o, &v) in lane_out.iter_mut().zip(lane) {
            let e = (v - mx).exp();
            *o = e;
            denom = denom + e;
        }
        for o in lane_out.iter_mut() {
            *o = *o / denom;
        }
    });
    out
}

/// d(softmax)/dx pulled back through grad: s * (g - sum(g * s)) per lane.
pub(crate) fn softmax_bw<E: Scalar>(out: &Tensor<E>, grad: &Tensor<E>, axis: usize) -> Tensor<E> {
    let mut dx = Tensor::zeros(out.shape().to_vec());
    let (outer, n, inner) = axis_split(out.shape(), axis);
    for o in 0..outer {
        for j in 0..inner {
            let base = o * n * inner + j;
            let mut dot = E::zero();
            for i in 0..n {
                dot = dot + grad.data()[base + i * inner] * out.data()[base + i * inner];
            }
            for i in 0..n {
                let idx = base + i * inner;
                dx.data_mut()[idx] = out.data()[idx] * (grad.data()[idx] - dot);
            }
        }
    }
    dx
}

pub(crate) fn log_softmax_fw<E: Scalar>(x: &Tensor<E>, axis: usize) -> Tensor<E> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    for_each_lane(x.data(), x.shape(), axis, out.data_mut(), |lane, lane_out| {
        let mx = lane.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut denom = E::zero();
        for &v in lane {
            denom = denom + (v - mx).exp();
        }
        let lse = mx + denom.ln();
        for (o, &v) in lane_out.iter_mut().zip(lane) {
            *o = v - lse;
        }
    });
    out
}

/// d(log_softmax)/dx: g - softmax * sum(g) per lane.
pub(crate) fn log_softmax_bw<E: Scalar>(
    out: &Tensor<E>,
    grad: &Tensor<E>,
    axis: usize,
) -> Tensor<E> {
    let mut dx = Tensor::zeros(out.shape().to_vec());
    let (outer, n, inner) = axis_split(out.shape(), axis);
    for o in 0..outer {
        for j in 0..inner {
            let base = o * n * inner + j;
            let mut gsum = E::zero();
            for i in 0..n {
                gsum = gsum + grad.data()[base + i * inner];
            }
            for i in 0..n {
                let idx = base + i * inner;
                dx.data_mut()[idx] = grad.data()[idx] - out.data()[idx].exp() * gsum;
            }
        }
    }
    dx
}

pub(crate) fn sum_axis_fw<E: Scalar>(x: &Tensor<E>, axis: usize, keepdims: bool) -> Tensor<E> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    if keepdims {
        out_shape[axis] = 1;
    } else {
        out_shape.remove(axis);
    }
    let mut out = Tensor::zeros(out_shape);
    for o in 0..outer {
        for i in 0..n {
            for j in 0..inner {
                let od = &mut out.data_mut()[o * inner + j];
                *od = *od + x.data()[o * n * inner + i * inner + j];
            }
        }
    }
    out
}

/// Gradient of sum_axis: repeat grad along the reduced axis.
pub(crate) fn sum_axis_bw<E: Scalar>(
    grad: &Tensor<E>,
    in_shape: &[usize],
    axis: usize,
) -> Tensor<E> {
    let (outer, n, inner) = axis_split(in_shape, axis);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for o in 0..outer {
        for i in 0..n {
            for j in 0..inner {
                dx.data_mut()[o * n * inner + i * inner + j] = grad.data()[o * inner + j];
            }
        }
    }
    dx
}

// ── layer norm ──────────────────────────────────────────────────────

pub(crate) fn layer_norm_fw<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let d = *x.shape().last().ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Shape(format!(
            "layer_norm gamma/beta must have shape [{d}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    let nd = E::from_f64c(d as f64);
    for (xv, ov) in x.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(d)) {
        let mean = xv.iter().cloned().sum::<E>() / nd;
        let var = xv.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nd;
        let denom = (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in ov
            .iter_mut()
            .zip(xv)
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *o = g * ((v - mean) / denom) + b;
        }
    }
    Ok(out)
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_bw<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    grad: &Tensor<E>,
    eps: E,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let d = *x.shape().last().unwrap();
    let nd = E::from_f64c(d as f64);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![d]);
    let mut dbeta = Tensor::zeros(vec![d]);
    let mut xhat = vec![E::zero(); d];
    for ((xv, gv), dxv) in x
        .data()
        .chunks_exact(d)
        .zip(grad.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
    {
        let mean = xv.iter().cloned().sum::<E>() / nd;
        let var = xv.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nd;
        let denom = (var + eps).sqrt();
        for (h, &v) in xhat.iter_mut().zip(xv) {
            *h = (v - mean) / denom;
        }
        // dl/dxhat = g * gamma; then the standard two-correction pullback.
        let mut mean_dxhat = E::zero();
        let mut mean_dxhat_xhat = E::zero();
        for i in 0..d {
            let dxh = gv[i] * gamma.data()[i];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[i];
        }
        mean_dxhat = mean_dxhat / nd;
        mean_dxhat_xhat = mean_dxhat_xhat / nd;
        for i in 0..d {
            let dxh = gv[i] * gamma.data()[i];
            dxv[i] = (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat) / denom;
            dgamma.data_mut()[i] = dgamma.data_mut()[i] + gv[i] * xhat[i];
            dbeta.data_mut()[i] = dbeta.data_mut()[i] + gv[i];
        }
    }
    (dx, dgamma, dbeta)
}

// ── depthwise 1-d convolution ───────────────────────────────────────

/// x: (B, T, C), kernel: (C, W) with odd W, same padding, stride >= 1.
/// Output time extent is ceil(T / stride).
pub(crate) fn dw_conv1d_fw<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
) -> Result<Tensor<E>> {
    if x.rank() != 3 || kernel.rank() != 2 {
        return Err(Error::Shape(format!(
            "depthwise_conv1d expects x (B,T,C) and kernel (C,W), got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let (kc, w) = (kernel.dim(0), kernel.dim(1));
    if kc != c {
        return Err(Error::Shape(format!(
            "kernel channels {kc} do not match input channels {c}"
        )));
    }
    if w % 2 == 0 {
        return Err(Error::Config(format!("kernel width must be odd, got {w}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let pad = (w - 1) / 2;
    let t_out = if t == 0 { 0 } else { (t + 2 * pad - w) / stride + 1 };
    let mut out = Tensor::zeros(vec![b, t_out, c]);
    for bi in 0..b {
        for to in 0..t_out {
            let orow = &mut out.data_mut()[(bi * t_out + to) * c..(bi * t_out + to + 1) * c];
            for wi in 0..w {
                let ti = (to * stride + wi) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let xrow = &x.data()[(bi * t + ti as usize) * c..(bi * t + ti as usize + 1) * c];
                for ci in 0..c {
                    orow[ci] = orow[ci] + xrow[ci] * kernel.data()[ci * w + wi];
                }
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dkernel).
pub(crate) fn dw_conv1d_bw<E: Scalar>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    grad: &Tensor<E>,
    stride: usize,
) -> (Tensor<E>, Tensor<E>) {
    let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let w = kernel.dim(1);
    let pad = (w - 1) / 2;
    let t_out = grad.dim(1);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dk = Tensor::zeros(kernel.shape().to_vec());
    for bi in 0..b {
        for to in 0..t_out {
            let grow = &grad.data()[(bi * t_out + to) * c..(bi * t_out + to + 1) * c];
            for wi in 0..w {
                let ti = (to * stride + wi) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let xbase = (bi * t + ti as usize) * c;
                for ci in 0..c {
                    dx.data_mut()[xbase + ci] =
                        dx.data_mut()[xbase + ci] + grow[ci] * kernel.data()[ci * w + wi];
                    dk.data_mut()[ci * w + wi] =
                        dk.data_mut()[ci * w + wi] + grow[ci] * x.data()[xbase + ci];
                }
            }
        }
    }
    (dx, dk)
}

// ── shape movement ──────────────────────────────────────────────────

pub(crate) fn permute_fw<E: Scalar>(x: &Tensor<E>, axes: &[usize]) -> Result<Tensor<E>> {
    let rank = x.rank();
    if axes.len() != rank {
        return Err(Error::Shape(format!(
            "permute axes {:?} do not match rank {rank}",
            axes
        )));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::Shape(format!("invalid permutation {axes:?}")));
        }
        seen[a] = true;
    }
    let in_strides = strides_of(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let mut out = Tensor::zeros(out_shape.clone());
    let mut coords = vec![0usize; rank];
    let numel = x.numel();
    for o in 0..numel {
        let mut src = 0;
        for d in 0..rank {
            src += coords[d] * in_strides[axes[d]];
        }
        out.data_mut()[o] = x.data()[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Ok(out)
}

pub(crate) fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn concat_fw<E: Scalar>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    check_axis(first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        if p.rank() != first.rank() {
            return Err(Error::Shape("concat rank mismatch".into()));
        }
        for d in 0..first.rank() {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::Shape(format!(
                    "concat shape mismatch on dim {d}: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total;
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut out = Tensor::zeros(out_shape.clone());
    for o in 0..outer {
        let mut written = 0;
        for p in parts {
            let np = p.shape()[axis];
            let src = &p.data()[o * np * inner..(o + 1) * np * inner];
            let dst_base = o * total * inner + written * inner;
            out.data_mut()[dst_base..dst_base + np * inner].copy_from_slice(src);
            written += np;
        }
    }
    Ok(out)
}

pub(crate) fn slice_fw<E: Scalar>(
    x: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    check_axis(x.shape(), axis)?;
    let n = x.shape()[axis];
    if start + len > n {
        return Err(Error::Shape(format!(
            "slice {start}..{} out of range for axis extent {n}",
            start + len
        )));
    }
    let (outer, _, inner) = axis_split(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(out_shape);
    for o in 0..outer {
        let src = &x.data()[o * n * inner + start * inner..o * n * inner + (start + len) * inner];
        out.data_mut()[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Ok(out)
}

/// Scatter `grad` (shape of the slice) back into a zero tensor of `in_shape`.
pub(crate) fn slice_bw<E: Scalar>(
    grad: &Tensor<E>,
    in_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<E> {
    let n = in_shape[axis];
    let len = grad.shape()[axis];
    let (outer, _, inner) = axis_split(in_shape, axis);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for o in 0..outer {
        let dst = &mut dx.data_mut()[o * n * inner + start * inner..o * n * inner + (start + len) * inner];
        dst.copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}

// ── class gathering (CTC emissions) ─────────────────────────────────

/// x: (B, T, V), idx: (B, S) -> out (B, T, S) with out[b,t,s] = x[b,t,idx[b,s]].
pub(crate) fn gather_classes_fw<E: Scalar>(x: &Tensor<E>, idx: &[u32], s: usize) -> Result<Tensor<E>> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!(
            "gather_classes expects (B,T,V), got {:?}",
            x.shape()
        )));
    }
    let (b, t, v) = (x.dim(0), x.dim(1), x.dim(2));
    if idx.len() != b * s {
        return Err(Error::Shape(format!(
            "gather_classes index table has {} entries, expected {}",
            idx.len(),
            b * s
        )));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i as usize >= v) {
        return Err(Error::Data(format!(
            "gather_classes index {bad} out of vocabulary range {v}"
        )));
    }
    let mut out = Tensor::zeros(vec![b, t, s]);
    for bi in 0..b {
        let irow = &idx[bi * s..(bi + 1) * s];
        for ti in 0..t {
            let xrow = &x.data()[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            let orow = &mut out.data_mut()[(bi * t + ti) * s..(bi * t + ti + 1) * s];
            for (o, &i) in orow.iter_mut().zip(irow) {
                *o = xrow[i as usize];
            }
        }
    }
    Ok(out)
}

pub(crate) fn gather_classes_bw<E: Scalar>(
    grad: &Tensor<E>,
    idx: &[u32],
    in_shape: &[usize],
) -> Tensor<E> {
    let (b, t, v) = (in_shape[0], in_shape[1], in_shape[2]);
    let s = grad.dim(2);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for bi in 0..b {
        let irow = &idx[bi * s..(bi + 1) * s];
        for ti in 0..t {
            let grow = &grad.data()[(bi * t + ti) * s..(bi * t + ti + 1) * s];
            let xrow = &mut dx.data_mut()[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            for (&g, &i) in grow.iter().zip(irow) {
                xrow[i as usize] = xrow[i as usize] + g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let plan = matmul_plan(&eye, &b).unwrap();
        let out = matmul_fw(&eye, &b, &plan);
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn matmul_direct() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let plan = matmul_plan(&a, &b).unwrap();
        let out = matmul_fw(&a, &b, &plan);
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 11.0);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![4, 2]);
        assert!(matmul_plan(&a, &b).is_err());
    }

    #[test]
    fn matmul_broadcast_batch() {
        // (2,1,2,2) @ (2,2) -> (2,1,2,2)
        let a = Tensor::from_vec(vec![2, 1, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let plan = matmul_plan(&a, &b).unwrap();
        let out = matmul_fw(&a, &b, &plan);
        assert_eq!(out.shape(), &[2, 1, 2, 2]);
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.1f64, -0.3, 2.0, 1000.0, 0.0, -5.0]).unwrap();
        let s = softmax_fw(&x, 1);
        for row in s.data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 || v == 0.0));
        }
        // stabilized: huge logit saturates without overflow
        assert!((s.data()[3] - 1.0).abs() < 1e-12);
        assert!(s.data()[4].abs() < 1e-12);
    }

    #[test]
    fn dw_conv_identity_kernel() {
        let x = Tensor::from_vec(vec![1, 4, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::from_vec(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = dw_conv1d_fw(&x, &k, 1).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn dw_conv_ones_interior() {
        let x = Tensor::full(vec![1, 5, 1], 1.0f64);
        let k = Tensor::from_vec(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let out = dw_conv1d_fw(&x, &k, 1).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn dw_conv_rejects_even_kernel() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 1]);
        let k = Tensor::<f32>::zeros(vec![1, 4]);
        assert!(matches!(dw_conv1d_fw(&x, &k, 1), Err(Error::Config(_))));
    }

    #[test]
    fn dw_conv_stride_two_halves_time() {
        let x = Tensor::<f32>::zeros(vec![1, 7, 1]);
        let k = Tensor::<f32>::zeros(vec![1, 3]);
        let out = dw_conv1d_fw(&x, &k, 2).unwrap();
        assert_eq!(out.dim(1), 4); // ceil(7/2)
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat_fw(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = slice_fw(&c, 1, 0, 2).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = permute_fw(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute_fw(&p, &invert_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn gather_classes_basic() {
        let x = Tensor::from_vec(vec![1, 2, 3], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let out = gather_classes_fw(&x, &[2, 0], 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[2.0, 0.0, 5.0, 3.0]);
    }
}
