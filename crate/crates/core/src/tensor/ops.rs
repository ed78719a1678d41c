//! Elementwise, shape, reduction and matrix ops with their VJPs.

use super::Tensor;
use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Real;

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_2d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::BadShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a rank-2 tensor".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn permute_raw<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// (outer, axis_len, inner) decomposition for slicing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            |g, ps| {
                ps.iter()
                    .map(|p| p.requires_grad().then(|| g.to_vec()))
                    .collect()
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            |g, ps| {
                vec![
                    ps[0].requires_grad().then(|| g.to_vec()),
                    ps[1].requires_grad().then(|| g.iter().map(|&v| -v).collect()),
                ]
            },
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            |g, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                vec![
                    ps[0]
                        .requires_grad()
                        .then(|| g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect()),
                    ps[1]
                        .requires_grad()
                        .then(|| g.iter().zip(a).map(|(&gv, &av)| gv * av).collect()),
                ]
            },
        ))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    /// Multiply every element by a single-element tensor (layer scale).
    pub fn scale(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::BadShape {
                op: "scale",
                shape: s.shape().to_vec(),
                reason: "scale factor must have one element".into(),
            });
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|&v| v * sv).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            move |g, ps| {
                let x = ps[0].data();
                let ds = ps[1].requires_grad().then(|| {
                    let mut acc = T::zero();
                    for (&gv, &xv) in g.iter().zip(x) {
                        acc += gv * xv;
                    }
                    vec![acc]
                });
                vec![
                    ps[0]
                        .requires_grad()
                        .then(|| g.iter().map(|&v| v * sv).collect()),
                    ds,
                ]
            },
        ))
    }

    /// Add a length-m vector to every row of an [n, m] matrix.
    pub fn add_row(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, m) = require_2d("add_row", self)?;
        if v.rank() != 1 || v.shape()[0] != m {
            return Err(Error::DimMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let vd = v.data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(self.data()[i * m + j] + vd[j]);
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone(), v.clone()],
            move |g, ps| {
                let dv = ps[1].requires_grad().then(|| {
                    let mut dv = vec![T::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            dv[j] += g[i * m + j];
                        }
                    }
                    dv
                });
                vec![ps[0].requires_grad().then(|| g.to_vec()), dv]
            },
        ))
    }

    /// Multiply every row of an [n, m] matrix by a length-m vector.
    pub fn mul_row(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, m) = require_2d("mul_row", self)?;
        if v.rank() != 1 || v.shape()[0] != m {
            return Err(Error::DimMismatch {
                op: "mul_row",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let vd = v.data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(self.data()[i * m + j] * vd[j]);
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone(), v.clone()],
            move |g, ps| {
                let x = ps[0].data();
                let vd = ps[1].data();
                let dx = ps[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); n * m];
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * m + j] = g[i * m + j] * vd[j];
                        }
                    }
                    dx
                });
                let dv = ps[1].requires_grad().then(|| {
                    let mut dv = vec![T::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            dv[j] += g[i * m + j] * x[i * m + j];
                        }
                    }
                    dv
                });
                vec![dx, dv]
            },
        ))
    }

    pub fn exp(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v.exp()).collect();
        let y = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&y).map(|(&gv, &yv)| gv * yv).collect())]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |g, ps| {
            let x = ps[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        fn sig<T: Real>(x: T) -> T {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        let data: Vec<T> = self.data().iter().map(|&v| sig(v)).collect();
        let y = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(&y)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect(),
            )]
        })
    }

    /// Numerically stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
    pub fn softplus(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) + (-v.abs()).exp().ln_1p())
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |g, ps| {
            // d softplus = sigmoid(x)
            let x = ps[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        let s = if xv >= T::zero() {
                            T::one() / (T::one() + (-xv).exp())
                        } else {
                            let e = xv.exp();
                            e / (T::one() + e)
                        };
                        gv * s
                    })
                    .collect(),
            )]
        })
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (n, m) = require_2d("transpose", self)?;
        let x = self.data();
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = x[i * m + j];
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone()],
            move |g, _| {
                let mut dg = vec![T::zero(); n * m];
                for j in 0..m {
                    for i in 0..n {
                        dg[i * m + j] = g[j * n + i];
                    }
                }
                vec![Some(dg)]
            },
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute: {axes:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_raw(self.data(), self.shape(), axes);
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let g_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            move |g, _| vec![Some(permute_raw(g, &g_shape, &inverse))],
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                reason: format!("incompatible with {} elements", self.numel()),
            });
        }
        Ok(Tensor::from_op(
            shape,
            self.data().to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Select rows of an [n, m] matrix: out[i, :] = self[idx[i], :].
    /// Gradients scatter-add back, so repeated indices are fine.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (n, m) = require_2d("gather_rows", self)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(&x[i * m..(i + 1) * m]);
        }
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), m],
            data,
            vec![self.clone()],
            move |g, _| {
                let mut dx = vec![T::zero(); n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..m {
                        dx[i * m + j] += g[r * m + j];
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Broadcast a length-c vector over an h x w grid: out[k, y, x] = self[k].
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        if self.rank() != 1 {
            return Err(Error::BadShape {
                op: "broadcast_spatial",
                shape: self.shape().to_vec(),
                reason: "expected a rank-1 tensor".into(),
            });
        }
        let c = self.shape()[0];
        let hw = h * w;
        let mut data = Vec::with_capacity(c * hw);
        for &v in self.data() {
            data.extend(std::iter::repeat(v).take(hw));
        }
        Ok(Tensor::from_op(
            vec![c, h, w],
            data,
            vec![self.clone()],
            move |g, _| {
                let mut dv = vec![T::zero(); c];
                for k in 0..c {
                    for t in 0..hw {
                        dv[k] += g[k * hw + t];
                    }
                }
                vec![Some(dv)]
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().mul_scalar(T::from_f64(1.0 / n as f64))
    }

    /// Column (axis 0) or row (axis 1) sums of an [n, m] matrix.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (n, m) = require_2d("sum_axis", self)?;
        let x = self.data();
        match axis {
            0 => {
                let mut out = vec![T::zero(); m];
                for i in 0..n {
                    for j in 0..m {
                        out[j] += x[i * m + j];
                    }
                }
                Ok(Tensor::from_op(
                    vec![m],
                    out,
                    vec![self.clone()],
                    move |g, _| {
                        let mut dx = Vec::with_capacity(n * m);
                        for _ in 0..n {
                            dx.extend_from_slice(g);
                        }
                        vec![Some(dx)]
                    },
                ))
            }
            1 => {
                let mut out = vec![T::zero(); n];
                for i in 0..n {
                    for j in 0..m {
                        out[i] += x[i * m + j];
                    }
                }
                Ok(Tensor::from_op(
                    vec![n],
                    out,
                    vec![self.clone()],
                    move |g, _| {
                        let mut dx = Vec::with_capacity(n * m);
                        for &gi in g.iter().take(n) {
                            dx.extend(std::iter::repeat(gi).take(m));
                        }
                        vec![Some(dx)]
                    },
                ))
            }
            _ => Err(Error::InvalidArgument(format!(
                "sum_axis: axis {axis} out of range for rank 2"
            ))),
        }
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "softmax: axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = x[at(0)];
                for j in 1..len {
                    m = m.max(x[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    data[at(j)] = e;
                    s += e;
                }
                let inv = T::one() / s;
                for j in 0..len {
                    data[at(j)] *= inv;
                }
            }
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, _| {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Log-softmax along `axis`, max-shifted for stability.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "log_softmax: axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = x[at(0)];
                for j in 1..len {
                    m = m.max(x[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    s += (x[at(j)] - m).exp();
                }
                let lse = m + s.ln();
                for j in 0..len {
                    data[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g, _| {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut gsum = T::zero();
                        for j in 0..len {
                            gsum += g[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = require_2d("matmul", self)?;
        let (k2, n) = require_2d("matmul", rhs)?;
        if k != k2 {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data = kernels::mm_nn(self.data(), rhs.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            move |g, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                vec![
                    ps[0]
                        .requires_grad()
                        .then(|| kernels::mm_nt(g, b, m, n, k)),
                    ps[1]
                        .requires_grad()
                        .then(|| kernels::mm_tn(a, g, m, k, n)),
                ]
            },
        ))
    }
}

/// Concatenate tensors along `axis`. All other dimensions must agree.
pub fn concat<T: Real>(axis: usize, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidArgument("concat: no inputs".into()));
    };
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidArgument(format!(
            "concat: axis {axis} out of range for rank {rank}"
        )));
    }
    for p in parts {
        if p.rank() != rank {
            return Err(Error::DimMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::DimMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let axis_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total_axis: usize = axis_lens.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;

    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for (p, &len) in parts.iter().zip(&axis_lens) {
            let block = len * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_op(
        shape,
        data,
        parts.to_vec(),
        move |g, ps| {
            let mut grads: Vec<Option<Vec<T>>> = axis_lens
                .iter()
                .zip(ps)
                .map(|(&len, p)| {
                    p.requires_grad()
                        .then(|| Vec::with_capacity(outer * len * inner))
                })
                .collect();
            let mut cursor = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&axis_lens) {
                    let block = len * inner;
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[cursor..cursor + block]);
                    }
                    cursor += block;
                }
            }
            grads
        },
    ))
}
