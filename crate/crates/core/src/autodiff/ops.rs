use std::rc::Rc;

use super::{GradBuffer, Var};
use crate::error::{Error, Result};
use crate::tensor::{axis_split, Scalar};

/// Output shape of a same-rank broadcast, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let sa: Vec<usize> = strides(a)
        .into_iter()
        .zip(a)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let sb: Vec<usize> = strides(b)
        .into_iter()
        .zip(b)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (a, b) = (self.value(), other.value());
        let mut value = vec![T::zero(); out.iter().product()];
        for_each_broadcast(&out, &sa, &sb, |o, i, j| value[o] = f(a[i], b[j]));
        let (ia, ib) = (self.id, other.id);
        let out_shape = out.clone();
        self.tape.push(
            op,
            &[self, other],
            out,
            value,
            move |g, buf: &mut GradBuffer<T>| {
                if let Some(ga) = buf.slot(ia) {
                    for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                        ga[i] = ga[i] + g[o] * da(a[i], b[j])
                    });
                }
                if let Some(gb) = buf.slot(ib) {
                    for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                        gb[j] = gb[j] + g[o] * db(a[i], b[j])
                    });
                }
            },
        )
    }

    /// Elementwise sum with same-rank broadcasting over unit extents.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            |_, _| T::one(),
            |_, _| -T::one(),
        )
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let value: Vec<T> = x.iter().map(|&v| f(v)).collect();
        let y: Rc<[T]> = value.clone().into();
        let id = self.id;
        self.tape
            .push(op, &[self], self.shape(), value, move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * df(x[i], y[i]);
                    }
                }
            })
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        self.unary("scale", |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary("add_scalar", |v| v + c, |_, _| T::one())
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary("tanh", |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(
            "sigmoid",
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF computed via erf.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", gelu_fwd, |x, _| gelu_grad(x))
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let total = x.iter().copied().sum();
        let id = self.id;
        self.tape
            .push("sum", &[self], vec![1], vec![total], move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    gx.iter_mut().for_each(|v| *v = *v + g[0]);
                }
            })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::from_usize(self.numel()).unwrap_or_else(T::one);
        self.sum()?.scale(T::one() / n)
    }

    /// Mean over the last axis; the axis is removed (a rank-1 input yields
    /// shape `[1]`).
    pub fn mean_last_axis(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let k = *shape.last().expect("tensors have rank >= 1");
        let rows = self.numel() / k;
        let inv = T::one() / T::from_usize(k).unwrap_or_else(T::one);
        let x = self.value();
        let value: Vec<T> = x
            .chunks(k)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let mut out = shape[..shape.len() - 1].to_vec();
        if out.is_empty() {
            out.push(1);
        }
        debug_assert_eq!(out.iter().product::<usize>(), rows);
        let id = self.id;
        self.tape
            .push("mean_last_axis", &[self], out, value, move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    for (r, chunk) in gx.chunks_mut(k).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = *v + g[r] * inv);
                    }
                }
            })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        let id = self.id;
        self.tape.push(
            "reshape",
            &[self],
            shape,
            self.value().to_vec(),
            move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                }
            },
        )
    }

    /// Matrix product of `[p, q]` and `[q, r]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut value = vec![T::zero(); p * r];
        matmul_into(&a, &b, &mut value, p, q, r);
        let (ia, ib) = (self.id, other.id);
        self.tape.push(
            "matmul",
            &[self, other],
            vec![p, r],
            value,
            move |g, buf| {
                if let Some(ga) = buf.slot(ia) {
                    // ga[i,k] += sum_j g[i,j] b[k,j]
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let brow = &b[k * r..(k + 1) * r];
                            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            ga[i * q + k] = ga[i * q + k] + dot;
                        }
                    }
                }
                if let Some(gb) = buf.slot(ib) {
                    // gb[k,j] += sum_i a[i,k] g[i,j]
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let aik = a[i * q + k];
                            let brow = &mut gb[k * r..(k + 1) * r];
                            brow.iter_mut()
                                .zip(grow)
                                .for_each(|(o, &x)| *o = *o + aik * x);
                        }
                    }
                }
            },
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {s:?}"),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value();
        let mut value = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = x[i * n + j];
            }
        }
        let id = self.id;
        self.tape
            .push("transpose", &[self], vec![n, m], value, move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[j * m + i];
                        }
                    }
                }
            })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let x = self.value();
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            value.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out = shape.clone();
        out[axis] = len;
        let id = self.id;
        self.tape
            .push("narrow", &[self], out, value, move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                }
            })
    }

    /// Shifts content along `axis` by `offset` positions with zero fill:
    /// `out[.., t, ..] = x[.., t - offset, ..]` where that index exists.
    pub fn shift(self, axis: usize, offset: isize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "shift",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let x = self.value();
        let mut value = vec![T::zero(); x.len()];
        let src_of = move |t: usize| -> Option<usize> {
            let s = t as isize - offset;
            (0..extent as isize).contains(&s).then_some(s as usize)
        };
        for o in 0..outer {
            for t in 0..extent {
                if let Some(s) = src_of(t) {
                    let dst = (o * extent + t) * inner;
                    let src = (o * extent + s) * inner;
                    value[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
        }
        let id = self.id;
        self.tape
            .push("shift", &[self], shape, value, move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    for o in 0..outer {
                        for t in 0..extent {
                            if let Some(s) = src_of(t) {
                                let dst = (o * extent + t) * inner;
                                let src = (o * extent + s) * inner;
                                for k in 0..inner {
                                    gx[src + k] = gx[src + k] + g[dst + k];
                                }
                            }
                        }
                    }
                }
            })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let x = self.value();
        let mut value = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent)
                    .map(|k| x[at(k)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..extent {
                    let e = (x[at(k)] - max).exp();
                    value[at(k)] = e;
                    total = total + e;
                }
                for k in 0..extent {
                    value[at(k)] = value[at(k)] / total;
                }
            }
        }
        let y: Rc<[T]> = value.clone().into();
        let id = self.id;
        self.tape
            .push("softmax", &[self], shape, value, move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * extent + k) * inner + i;
                            let dot: T = (0..extent).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..extent {
                                gx[at(k)] = gx[at(k)] + y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            })
    }

    /// Layer normalization over the last axis followed by an affine map.
    /// Variance uses the population (1/n) normalizer.
    pub fn layer_norm(self, gain: Var<'t, T>, shift: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let k = *shape.last().expect("tensors have rank >= 1");
        if gain.shape() != [k] || shift.shape() != [k] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / shift {:?} must both be [{k}] for input {shape:?}",
                    gain.shape(),
                    shift.shape()
                ),
            ));
        }
        let x = self.value();
        let (gv, bv) = (gain.value(), shift.value());
        let rows = x.len() / k;
        let kf = T::from_usize(k).unwrap_or_else(T::one);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut value = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let mean = row.iter().copied().sum::<T>() / kf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / kf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..k {
                let h = (row[j] - mean) * is;
                xhat[r * k + j] = h;
                value[r * k + j] = h * gv[j] + bv[j];
            }
        }
        let (ix, ig, ib) = (self.id, gain.id, shift.id);
        self.tape.push(
            "layer_norm",
            &[self, gain, shift],
            shape,
            value,
            move |g, buf| {
                if let Some(gg) = buf.slot(ig) {
                    for r in 0..rows {
                        for j in 0..k {
                            gg[j] = gg[j] + g[r * k + j] * xhat[r * k + j];
                        }
                    }
                }
                if let Some(gb) = buf.slot(ib) {
                    for r in 0..rows {
                        for j in 0..k {
                            gb[j] = gb[j] + g[r * k + j];
                        }
                    }
                }
                if let Some(gx) = buf.slot(ix) {
                    for r in 0..rows {
                        let dxhat: Vec<T> = (0..k).map(|j| g[r * k + j] * gv[j]).collect();
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = (0..k).map(|j| dxhat[j] * xhat[r * k + j]).sum();
                        for j in 0..k {
                            let d = (kf * dxhat[j] - sum_d - xhat[r * k + j] * sum_dx) * inv_std[r]
                                / kf;
                            gx[r * k + j] = gx[r * k + j] + d;
                        }
                    }
                }
            },
        )
    }

    /// Mean cross-entropy of `[B, C]` logits against class indices in
    /// `0..C`, evaluated through log-sum-exp.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Data(format!(
                "cross_entropy: target class {bad} out of range for {c} classes"
            )));
        }
        let z = self.value();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let bf = T::from_usize(b).unwrap_or_else(T::one);
        let targets = targets.to_vec();
        let id = self.id;
        self.tape.push(
            "cross_entropy",
            &[self],
            vec![1],
            vec![loss / bf],
            move |g, buf| {
                if let Some(gx) = buf.slot(id) {
                    let s = g[0] / bf;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gx[i * c + j] = gx[i * c + j] + s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            },
        )
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no operands"))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} out of range for {base:?}"),
        ));
    }
    let mut extents = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{s:?} does not match {base:?} off axis {axis}"),
            ));
        }
        extents.push(s[axis]);
    }
    let total: usize = extents.iter().sum();
    let (outer, _, inner) = axis_split(&base, axis);
    let values: Vec<Rc<[T]>> = parts.iter().map(|p| p.value()).collect();
    let mut value = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            value.extend_from_slice(&v[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut out = base.clone();
    out[axis] = total;
    let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
    first.tape.push("concat", parts, out, value, move |g, buf| {
        let mut offset = 0;
        for (&id, &e) in ids.iter().zip(&extents) {
            if let Some(gx) = buf.slot(id) {
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + e) * inner];
                    gx[o * e * inner..(o + 1) * e * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a = *a + b);
                }
            }
            offset += e;
        }
    })
}

pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    p: usize,
    q: usize,
    r: usize,
) {
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            orow.iter_mut()
                .zip(brow)
                .for_each(|(o, &x)| *o = *o + aik * x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_and_singleton() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2], &[0.0, 0.0]));
        assert_eq!(&*x.softmax(0).unwrap().value(), &[0.5, 0.5]);
        let one = tape.constant(&t(&[1], &[7.3]));
        assert_eq!(&*one.softmax(0).unwrap().value(), &[1.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.softmax(0).unwrap().value();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((y[i] - v.exp() / denom).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_axis_zero_of_matrix() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2, 3], &[1.0, 5.0, -2.0, 3.0, 5.0, 0.0]));
        let y = x.softmax(0).unwrap().value();
        for j in 0..3 {
            assert!((y[j] + y[3 + j] - 1.0).abs() < 1e-12);
        }
        assert!((y[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn activations_at_fixed_points() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(&t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().unwrap().item(), 0.5);
        assert_eq!(z.tanh().unwrap().item(), 0.0);
        assert_eq!(z.gelu().unwrap().item(), 0.0);
        let r = tape.constant(&t(&[2], &[-1.0, 2.0])).relu().unwrap();
        assert_eq!(&*r.value(), &[0.0, 2.0]);
    }

    #[test]
    fn gelu_matches_erf_form() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(&t(&[1], &[1.0])).gelu().unwrap().item();
        let expect = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((y - expect).abs() < 1e-7);
        assert!((y - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[4], &[3.0; 4]));
        let g = tape.constant(&Tensor::full(vec![4], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap();
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_matches_two_pass_formula() {
        let data = [0.3, -1.2, 2.5, 0.7, -0.4];
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[5], &data));
        let g = tape.constant(&Tensor::full(vec![5], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![5]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        let mean = data.iter().sum::<f64>() / 5.0;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for (i, v) in data.iter().enumerate() {
            assert!((y[i] - (v - mean) / (var + 1e-5).sqrt()).abs() < 1e-6);
        }
        let m = y.iter().sum::<f64>() / 5.0;
        let s = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0;
        assert!(m.abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-4);
    }

    #[test]
    fn matmul_identity_and_direct_sum() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(&Tensor::from_fn(vec![3, 3], |i| {
            if i % 4 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let m = tape.constant(&Tensor::from_fn(vec![3, 2], |i| i as f64 * 0.5 - 1.0));
        assert_eq!(&*eye.matmul(m).unwrap().value(), &*m.value());

        let a = [1.5, -2.0, 0.25, 3.0, 0.5, -1.0];
        let b = [0.1, 2.0, -0.3, 1.0, 4.0, -2.5];
        let out = tape
            .constant(&t(&[2, 3], &a))
            .matmul(tape.constant(&t(&[3, 2], &b)))
            .unwrap()
            .value();
        let expect = [
            a[0] * b[0] + a[1] * b[2] + a[2] * b[4],
            a[0] * b[1] + a[1] * b[3] + a[2] * b[5],
            a[3] * b[0] + a[4] * b[2] + a[5] * b[4],
            a[3] * b[1] + a[4] * b[3] + a[5] * b[5],
        ];
        for i in 0..4 {
            assert!((out[i] - expect[i]).abs() < 1e-7);
        }
        assert!(tape
            .constant(&t(&[2, 3], &a))
            .matmul(tape.constant(&t(&[2, 3], &a)))
            .is_err());
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(&t(&[2, 1], &[10.0, 20.0]));
        let y = a.mul(b).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert_eq!(&*y.value(), &[10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap(), &[30.0, 30.0, 30.0]);
        assert_eq!(g.get(b).unwrap(), &[6.0, 6.0]);
    }

    #[test]
    fn shift_and_narrow_and_concat() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        assert_eq!(&*x.shift(1, 1).unwrap().value(), &[0.0, 1.0, 2.0]);
        assert_eq!(&*x.shift(1, -1).unwrap().value(), &[2.0, 3.0, 0.0]);
        assert_eq!(&*x.narrow(1, 1, 2).unwrap().value(), &[2.0, 3.0]);
        let y = tape.constant(&t(&[1, 2], &[8.0, 9.0]));
        assert_eq!(
            &*concat(&[x, y], 1).unwrap().value(),
            &[1.0, 2.0, 3.0, 8.0, 9.0]
        );
        assert!(concat(&[x, y], 0).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(&Tensor::zeros(vec![1, 4]));
        assert!((uniform.cross_entropy(&[2]).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let confident = tape.constant(&t(&[1, 3], &[0.0, 60.0, 0.0]));
        assert!(confident.cross_entropy(&[1]).unwrap().item() < 1e-6);
        assert!(confident.cross_entropy(&[3]).is_err());
    }
}
