//! Differentiable primitives recorded on a [`Graph`].

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::graph::{GradSink, Var};
use crate::tensor::{strides, Tensor};

/// `c = a·b (+ beta·c)` where `a` is logically m×k and `b` k×n; `ta`/`tb`
/// mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover m*k, k*n and m*n elements under the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offset into a tensor of `shape` for every element of `out`, broadcasting.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let own = strides(shape);
    let mut st = vec![0; rank];
    for i in 0..shape.len() {
        let j = rank - shape.len() + i;
        if shape[i] != 1 {
            st[j] = own[i];
        }
    }
    offsets_for(out, &st)
}

/// Enumerates `Σ idx[d]*st[d]` over all multi-indices of `shape` in row-major order.
fn offsets_for(shape: &[usize], st: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return out;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= st[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

impl<'g> Var<'g> {
    fn binary(self, other: Var<'g>, kind: Binary, op: &'static str) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let out_shape = match broadcast_shape(a.shape(), b.shape()) {
            Some(s) => s,
            None => return shape_err(op, a.shape(), b.shape()),
        };
        let same = a.shape() == b.shape();
        let (oa, ob) = if same {
            (Vec::new(), Vec::new())
        } else {
            (
                broadcast_offsets(a.shape(), &out_shape),
                broadcast_offsets(b.shape(), &out_shape),
            )
        };
        let numel: usize = out_shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = if same {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..numel)
                .map(|i| f(a.data()[oa[i]], b.data()[ob[i]]))
                .collect()
        };
        let (na, nb) = (self.node(), other.node());
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.graph().record(value, &[self, other], move |g, sink| {
            let ia = |i: usize| if same { i } else { oa[i] };
            let ib = |i: usize| if same { i } else { ob[i] };
            if sink.wants(na) {
                let slot = sink.slot(na);
                for (i, &gi) in g.data().iter().enumerate() {
                    let d = match kind {
                        Binary::Add | Binary::Sub => 1.0,
                        Binary::Mul => b.data()[ib(i)],
                        Binary::Div => 1.0 / b.data()[ib(i)],
                    };
                    slot[ia(i)] += gi * d;
                }
            }
            if sink.wants(nb) {
                let slot = sink.slot(nb);
                for (i, &gi) in g.data().iter().enumerate() {
                    let d = match kind {
                        Binary::Add => 1.0,
                        Binary::Sub => -1.0,
                        Binary::Mul => a.data()[ia(i)],
                        Binary::Div => {
                            let y = b.data()[ib(i)];
                            -a.data()[ia(i)] / (y * y)
                        }
                    };
                    slot[ib(i)] += gi * d;
                }
            }
        }))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Mul, "mul")
    }

    /// Elementwise quotient; callers guarantee a nonzero divisor.
    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Div, "div")
    }

    fn unary(self, value: Tensor, deriv: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let node = self.node();
        let out = Rc::new(value);
        let y = Rc::clone(&out);
        self.graph().record((*out).clone(), &[self], move |g, sink| {
            let slot = sink.slot(node);
            for (i, gi) in g.data().iter().enumerate() {
                slot[i] += gi * deriv(x.data()[i], y.data()[i]);
            }
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| c * x);
        self.unary(v, move |_, _| c)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, |_, _| 1.0)
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exponential with the argument capped at 700 to stay finite.
    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(|x| x.min(700.0).exp());
        self.unary(v, |x, y| if x < 700.0 { y } else { 0.0 })
    }

    /// Natural log; non-positive inputs are floored at `f64::MIN_POSITIVE`.
    pub fn ln(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(f64::MIN_POSITIVE).ln());
        self.unary(v, |x, _| 1.0 / x.max(f64::MIN_POSITIVE))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let s: f64 = x.data().iter().sum();
        let node = self.node();
        self.graph().record(Tensor::scalar(s), &[self], move |g, sink| {
            let gi = g.item();
            sink.slot(node).iter_mut().for_each(|v| *v += gi);
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("sum_axis", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += x.data()[(o * len + j) * inner + i];
                }
            }
        }
        let node = self.node();
        Ok(self
            .graph()
            .record(Tensor::from_parts(shape, data), &[self], move |g, sink| {
                let slot = sink.slot(node);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            slot[(o * len + j) * inner + i] += g.data()[o * inner + i];
                        }
                    }
                }
            }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshape(shape)?;
        let node = self.node();
        Ok(self.graph().record(value, &[self], move |g, sink| {
            sink.add(node, g.data());
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of {rank} axes"),
            });
        }
        let in_st = strides(x.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let st: Vec<usize> = axes.iter().map(|&a| in_st[a]).collect();
        let offs = offsets_for(&out_shape, &st);
        let data = offs.iter().map(|&o| x.data()[o]).collect();
        let node = self.node();
        Ok(self
            .graph()
            .record(Tensor::from_parts(out_shape, data), &[self], move |g, sink| {
                let slot = sink.slot(node);
                for (i, &o) in offs.iter().enumerate() {
                    slot[o] += g.data()[i];
                }
            }))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]`. A rank-2 operand
    /// broadcasts over the other's batch dimensions.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the trailing two axes.
    pub fn matmul_t(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return shape_err("matmul", sa, sb);
        }
        let batch_dims_a = &sa[..sa.len() - 2];
        let batch_dims_b = &sb[..sb.len() - 2];
        let (batch_dims, bcast_a, bcast_b) = if batch_dims_a == batch_dims_b {
            (batch_dims_a.to_vec(), false, false)
        } else if batch_dims_b.is_empty() {
            (batch_dims_a.to_vec(), false, true)
        } else if batch_dims_a.is_empty() {
            (batch_dims_b.to_vec(), true, false)
        } else {
            return shape_err("matmul", sa, sb);
        };
        let batch: usize = batch_dims.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let a_off = move |i: usize| if bcast_a { 0 } else { i * m * k };
        let b_off = move |i: usize| if bcast_b { 0 } else { i * k * n };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[a_off(i)..],
                false,
                &b.data()[b_off(i)..],
                trans_b,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let mut shape = batch_dims;
        shape.extend([m, n]);
        let (na, nb) = (self.node(), other.node());
        Ok(self
            .graph()
            .record(Tensor::from_parts(shape, out), &[self, other], move |g, sink| {
                let gd = g.data();
                if sink.wants(na) {
                    let slot = sink.slot(na);
                    for i in 0..batch {
                        // dA = dC · B^T  (or dC · Bs when B is stored n×k)
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            false,
                            &b.data()[b_off(i)..],
                            !trans_b,
                            &mut slot[a_off(i)..],
                            1.0,
                        );
                    }
                }
                if sink.wants(nb) {
                    let slot = sink.slot(nb);
                    for i in 0..batch {
                        if trans_b {
                            gemm(
                                n,
                                m,
                                k,
                                &gd[i * m * n..],
                                true,
                                &a.data()[a_off(i)..],
                                false,
                                &mut slot[b_off(i)..],
                                1.0,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &a.data()[a_off(i)..],
                                true,
                                &gd[i * m * n..],
                                false,
                                &mut slot[b_off(i)..],
                                1.0,
                            );
                        }
                    }
                }
            }))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x.data()[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let out = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yv = Rc::clone(&out);
        let node = self.node();
        Ok(self.graph().record((*out).clone(), &[self], move |g, sink| {
            let slot = sink.slot(node);
            let (y, gd) = (yv.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        slot[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
        }))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (x.data()[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    y[at(j)] = x.data()[at(j)] - lse;
                }
            }
        }
        let out = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yv = Rc::clone(&out);
        let node = self.node();
        Ok(self.graph().record((*out).clone(), &[self], move |g, sink| {
            let slot = sink.slot(node);
            let (y, gd) = (yv.data(), g.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let total: f64 = (0..len).map(|j| gd[at(j)]).sum();
                    for j in 0..len {
                        slot[at(j)] += gd[at(j)] - y[at(j)].exp() * total;
                    }
                }
            }
        }))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let d = *x.shape().last().ok_or(Error::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return shape_err("layer_norm", x.shape(), gv.shape());
        }
        let rows = x.numel() / d.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let (nx, ng, nb) = (self.node(), gamma.node(), beta.node());
        Ok(self.graph().record(
            Tensor::from_parts(x.shape().to_vec(), y),
            &[self, gamma, beta],
            move |g, sink| {
                let gd = g.data();
                if sink.wants(nb) {
                    let slot = sink.slot(nb);
                    for r in 0..rows {
                        for j in 0..d {
                            slot[j] += gd[r * d + j];
                        }
                    }
                }
                if sink.wants(ng) {
                    let slot = sink.slot(ng);
                    for r in 0..rows {
                        for j in 0..d {
                            slot[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if sink.wants(nx) {
                    let slot = sink.slot(nx);
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv.data()[j];
                            slot[r * d + j] +=
                                rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                }
            },
        ))
    }

    /// Training-mode batch normalization of `[B, F]` over the batch axis.
    /// Returns the output with the batch mean and biased variance per feature.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
    ) -> Result<(Var<'g>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                msg: format!("expected [batch, features], got {:?}", x.shape()),
            });
        }
        let (b, f) = (x.shape()[0], x.shape()[1]);
        if gamma.shape() != [f] || beta.shape() != [f] {
            return shape_err("batch_norm", x.shape(), &gamma.shape());
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..b {
            for j in 0..f {
                mean[j] += x.data()[r * f + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for r in 0..b {
            for j in 0..f {
                var[j] += (x.data()[r * f + j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * f];
        let mut y = vec![0.0; b * f];
        for r in 0..b {
            for j in 0..f {
                let h = (x.data()[r * f + j] - mean[j]) * rstd[j];
                xhat[r * f + j] = h;
                y[r * f + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let (nx, ng, nb) = (self.node(), gamma.node(), beta.node());
        let out = self.graph().record(
            Tensor::from_parts(vec![b, f], y),
            &[self, gamma, beta],
            move |g, sink| {
                let gd = g.data();
                if sink.wants(nb) {
                    let slot = sink.slot(nb);
                    for r in 0..b {
                        for j in 0..f {
                            slot[j] += gd[r * f + j];
                        }
                    }
                }
                if sink.wants(ng) {
                    let slot = sink.slot(ng);
                    for r in 0..b {
                        for j in 0..f {
                            slot[j] += gd[r * f + j] * xhat[r * f + j];
                        }
                    }
                }
                if sink.wants(nx) {
                    let mut mean_dh = vec![0.0; f];
                    let mut mean_dh_h = vec![0.0; f];
                    for r in 0..b {
                        for j in 0..f {
                            let dh = gd[r * f + j] * gv.data()[j];
                            mean_dh[j] += dh / b as f64;
                            mean_dh_h[j] += dh * xhat[r * f + j] / b as f64;
                        }
                    }
                    let slot = sink.slot(nx);
                    for r in 0..b {
                        for j in 0..f {
                            let dh = gd[r * f + j] * gv.data()[j];
                            slot[r * f + j] +=
                                rstd[j] * (dh - mean_dh[j] - xhat[r * f + j] * mean_dh_h[j]);
                        }
                    }
                }
            },
        );
        Ok((out, mean, var))
    }

    /// Unit L2 norm along the last axis; rows with norm below `1e-12` are
    /// scaled by `1e12` instead, so zero rows stay zero.
    pub fn l2_normalize(self) -> Var<'g> {
        const EPS: f64 = 1e-12;
        let x = self.value();
        let d = x.shape().last().copied().unwrap_or(1).max(1);
        let rows = x.numel() / d;
        let mut norms = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            norms[r] = n;
            for j in 0..d {
                y[r * d + j] = row[j] / n;
            }
        }
        let out = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yv = Rc::clone(&out);
        let node = self.node();
        self.graph().record((*out).clone(), &[self], move |g, sink| {
            let slot = sink.slot(node);
            let (y, gd) = (yv.data(), g.data());
            for r in 0..rows {
                let n = norms[r];
                let s = &gd[r * d..(r + 1) * d];
                if n > EPS {
                    let dot: f64 = (0..d).map(|j| y[r * d + j] * s[j]).sum();
                    for j in 0..d {
                        slot[r * d + j] += (s[j] - y[r * d + j] * dot) / n;
                    }
                } else {
                    for j in 0..d {
                        slot[r * d + j] += s[j] / n;
                    }
                }
            }
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        let (outer, full, inner) = axis_split(x.shape(), axis);
        if start + len > full {
            return Err(Error::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis length {full}", start + len),
            });
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let node = self.node();
        Ok(self
            .graph()
            .record(Tensor::from_parts(shape, data), &[self], move |g, sink| {
                let slot = sink.slot(node);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    for t in 0..len * inner {
                        slot[base + t] += g.data()[o * len * inner + t];
                    }
                }
            }))
    }

    /// Gathers rows (axis 0) by index; repeated indices accumulate gradient.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::InvalidAxis {
                op: "index_select",
                axis: 0,
                rank: 0,
            });
        }
        let rows = x.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument {
                op: "index_select",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let width = x.numel() / rows.max(1);
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let idx = indices.to_vec();
        let node = self.node();
        Ok(self
            .graph()
            .record(Tensor::from_parts(shape, data), &[self], move |g, sink| {
                let slot = sink.slot(node);
                for (r, &i) in idx.iter().enumerate() {
                    for t in 0..width {
                        slot[i * width + t] += g.data()[r * width + t];
                    }
                }
            }))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or(Error::InvalidArgument {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    let graph = first.graph();
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    for v in &values[1..] {
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return shape_err("concat", &base, s);
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let nodes: Vec<_> = parts.iter().map(Var::node).collect();
    Ok(graph.record(Tensor::from_parts(shape, data), parts, move |g, sink| {
        let mut offset = 0;
        for (&node, &l) in nodes.iter().zip(&lens) {
            if sink.wants(node) {
                let slot = sink.slot(node);
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    for t in 0..l * inner {
                        slot[o * l * inner + t] += g.data()[src + t];
                    }
                }
            }
            offset += l;
        }
    }))
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let lifted = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend(p.shape());
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&lifted, 0)
}

/// Align-corners bilinear resize of a `[C, H, W]` map. Exact on affine
/// ramps; resizing to the same size is the identity.
pub fn bilinear_upsample<'g>(map: Var<'g>, out_h: usize, out_w: usize) -> Result<Var<'g>> {
    let x = map.value();
    if x.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument {
            op: "bilinear_upsample",
            msg: format!("map {:?} to {out_h}x{out_w}", x.shape()),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = if out > 1 {
                    o as f64 * (inp - 1) as f64 / (out - 1) as f64
                } else {
                    0.0
                };
                let lo = (src.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let mut data = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &x.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                data[(ch * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    let node = map.node();
    Ok(map.graph().record(
        Tensor::from_parts(vec![c, out_h, out_w], data),
        &[map],
        move |g, sink: &mut GradSink<'_>| {
            let slot = sink.slot(node);
            for ch in 0..c {
                let dst = &mut slot[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gi = g.data()[(ch * out_h + oy) * out_w + ox];
                        dst[y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gi * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gi * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gi * fy * fx;
                    }
                }
            }
        },
    ))
}

/// Pairwise cosine similarity of the rows of `[M, D]` and `[N, D]`, clamped
/// into `[0, 1]`. Zero rows give similarity 0.
pub fn cosine_matrix<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let s = a.l2_normalize().matmul_t(b.l2_normalize())?;
    Ok(s.clamp(0.0, 1.0))
}
