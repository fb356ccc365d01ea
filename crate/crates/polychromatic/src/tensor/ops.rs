//! Differentiable tensor operations.
//!
//! Elementwise binaries broadcast with trailing-dimension alignment (sizes
//! must match or be 1 after right-aligning the shapes). Invalid floating
//! point inputs follow IEEE semantics; nothing is clamped silently.

use super::kernel;
use super::{BackwardArgs, Scalar, Tensor, TensorError, TensorResult};

// ── broadcasting helpers ─────────────────────────────────────────────────────

fn broadcast_shape(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let l = dim_from_right(lhs, rank, i);
        let r = dim_from_right(rhs, rank, i);
        out[i] = if l == r {
            l
        } else if l == 1 {
            r
        } else if r == 1 {
            l
        } else {
            return Err(TensorError::Broadcast {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Row-major strides of `shape` padded on the left to `rank`, with stride 0
/// on broadcast (size-1 or padded) axes so indices collapse onto them.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; rank];
    let pad = rank - shape.len();
    let mut stride = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { stride };
        stride *= shape[i];
    }
    strides
}

/// Maps every linear index of `out_shape` to the linear index in an operand
/// with the given broadcast strides.
struct IndexMap {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
    identity: bool,
}

impl IndexMap {
    fn new(operand_shape: &[usize], out_shape: &[usize]) -> Self {
        let identity = operand_shape == out_shape;
        IndexMap {
            strides: broadcast_strides(operand_shape, out_shape.len()),
            out_shape: out_shape.to_vec(),
            identity,
        }
    }

    #[inline]
    fn map(&self, mut linear: usize) -> usize {
        if self.identity {
            return linear;
        }
        let mut idx = 0usize;
        for d in (0..self.out_shape.len()).rev() {
            let size = self.out_shape[d];
            let coord = linear % size;
            linear /= size;
            idx += coord * self.strides[d];
        }
        idx
    }
}

fn binary_op<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    forward: fn(T, T) -> T,
    backward: fn(T, T, T, T) -> (T, T), // (a, b, out, out_grad) -> (da, db)
) -> TensorResult<T> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    let map_a = IndexMap::new(a.shape(), &out_shape);
    let map_b = IndexMap::new(b.shape(), &out_shape);

    let a_data = a.data();
    let b_data = b.data();
    let mut out = Vec::with_capacity(numel);
    if map_a.identity && map_b.identity {
        for (&av, &bv) in a_data.iter().zip(b_data.iter()) {
            out.push(forward(av, bv));
        }
    } else {
        for i in 0..numel {
            out.push(forward(a_data[map_a.map(i)], b_data[map_b.map(i)]));
        }
    }
    drop(a_data);
    drop(b_data);

    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out_shape.clone(),
        out,
        vec![pa, pb],
        move |args: &BackwardArgs<'_, T>| {
            let a = &args.parents[0];
            let b = &args.parents[1];
            let a_data = a.data();
            let b_data = b.data();
            let accumulate = |target: &Tensor<T>, pick_a: bool| {
                target.with_grad_buffer(|buf| {
                    for (i, (&og, &ov)) in
                        args.out_grad.iter().zip(args.out_data.iter()).enumerate()
                    {
                        let ia = map_a.map(i);
                        let ib = map_b.map(i);
                        let (da, db) = backward(a_data[ia], b_data[ib], ov, og);
                        if pick_a {
                            buf[ia] = buf[ia] + da;
                        } else {
                            buf[ib] = buf[ib] + db;
                        }
                    }
                });
            };
            if a.needs_grad() {
                accumulate(a, true);
            }
            if b.needs_grad() {
                accumulate(b, false);
            }
        },
    ))
}

fn unary_op<T: Scalar>(
    a: &Tensor<T>,
    forward: impl Fn(T) -> T,
    backward: impl Fn(T, T, T) -> T + 'static, // (a, out, out_grad) -> da
) -> Tensor<T> {
    let out: Vec<T> = a.data().iter().map(|&v| forward(v)).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        move |args: &BackwardArgs<'_, T>| {
            let parent = &args.parents[0];
            let data = parent.data();
            parent.with_grad_buffer(|buf| {
                for i in 0..buf.len() {
                    buf[i] = buf[i] + backward(data[i], args.out_data[i], args.out_grad[i]);
                }
            });
        },
    )
}

// ── elementwise ──────────────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> TensorResult<T> {
        binary_op("add", self, other, |a, b| a + b, |_, _, _, og| (og, og))
    }

    pub fn sub(&self, other: &Tensor<T>) -> TensorResult<T> {
        binary_op("sub", self, other, |a, b| a - b, |_, _, _, og| (og, -og))
    }

    pub fn mul(&self, other: &Tensor<T>) -> TensorResult<T> {
        binary_op(
            "mul",
            self,
            other,
            |a, b| a * b,
            |a, b, _, og| (og * b, og * a),
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> TensorResult<T> {
        binary_op(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b, out, og| (og / b, -og * out / b),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        unary_op(self, |v| v + c, |_, _, og| og)
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        unary_op(self, |v| v * c, move |_, _, og| og * c)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary_op(self, |v| -v, |_, _, og| -og)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary_op(self, |v| v.exp(), |_, out, og| og * out)
    }

    pub fn ln(&self) -> Tensor<T> {
        unary_op(self, |v| v.ln(), |a, _, og| og / a)
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary_op(self, |v| v.tanh(), |_, out, og| og * (T::one() - out * out))
    }

    pub fn erf(&self) -> Tensor<T> {
        let two_over_sqrt_pi = T::from_f64(2.0 / std::f64::consts::PI.sqrt());
        unary_op(
            self,
            |v| Scalar::erf(v),
            move |a, _, og| og * two_over_sqrt_pi * (-a * a).exp(),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary_op(
            self,
            |v| {
                // Split form avoids exp overflow on large |v|.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, out, og| og * out * (T::one() - out),
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        unary_op(self, |v| v.sqrt(), move |_, out, og| og * half / out)
    }

    /// Elementwise max(x, c); gradient flows where x > c.
    pub fn max_const(&self, c: T) -> Tensor<T> {
        unary_op(
            self,
            |v| if v > c { v } else { c },
            move |a, _, og| if a > c { og } else { T::zero() },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.max_const(T::zero())
    }
}

// ── matrix / shape ops ──────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> TensorResult<T> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        if other.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = kernel::matmul(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |args: &BackwardArgs<'_, T>| {
                let a = &args.parents[0];
                let b = &args.parents[1];
                if a.needs_grad() {
                    let b_data = b.data();
                    a.with_grad_buffer(|buf| {
                        kernel::matmul_nt_acc(args.out_grad, &b_data, buf, m, n, k);
                    });
                }
                if b.needs_grad() {
                    let a_data = a.data();
                    b.with_grad_buffer(|buf| {
                        kernel::matmul_tn_acc(&a_data, args.out_grad, buf, m, k, n);
                    });
                }
            },
        ))
    }

    pub fn transpose(&self) -> TensorResult<T> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = kernel::transpose(&self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            move |args: &BackwardArgs<'_, T>| {
                let parent = &args.parents[0];
                let back = kernel::transpose(args.out_grad, c, r);
                parent.accumulate_grad(&back);
            },
        ))
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> TensorResult<T> {
        let expected: usize = new_shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape,
            });
        }
        Ok(Tensor::from_op(
            new_shape,
            self.to_vec(),
            vec![self.clone()],
            |args: &BackwardArgs<'_, T>| {
                args.parents[0].accumulate_grad(args.out_grad);
            },
        ))
    }

    pub fn unsqueeze(&self, axis: usize) -> TensorResult<T> {
        let mut shape = self.shape().to_vec();
        if axis > shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "unsqueeze",
                axis,
                rank: shape.len(),
            });
        }
        shape.insert(axis, 1);
        self.reshape(shape)
    }

    /// Index along `axis`, dropping that axis from the result.
    pub fn select(&self, axis: usize, index: usize) -> TensorResult<T> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "select",
                axis,
                rank: shape.len(),
            });
        }
        if index >= shape[axis] {
            return Err(TensorError::IndexOutOfBounds {
                op: "select",
                index,
                axis,
                size: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let d = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }

        let data = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * d + index) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
        drop(data);

        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |args: &BackwardArgs<'_, T>| {
                args.parents[0].with_grad_buffer(|buf| {
                    for o in 0..outer {
                        let dst = (o * d + index) * inner;
                        let src = o * inner;
                        for r in 0..inner {
                            buf[dst + r] = buf[dst + r] + args.out_grad[src + r];
                        }
                    }
                });
            },
        ))
    }

    /// Concatenates same-rank tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> TensorResult<T> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "expects at least one tensor".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut out_shape = first.shape().to_vec();
        let mut axis_total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for (d, (&a, &b)) in out_shape.iter().zip(p.shape().iter()).enumerate() {
                if d != axis && a != b {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        for o in 0..outer {
            for (p, &asz) in parts.iter().zip(axis_sizes.iter()) {
                let data = p.data();
                let start = o * asz * inner;
                out.extend_from_slice(&data[start..start + asz * inner]);
            }
        }

        Ok(Tensor::from_op(
            out_shape,
            out,
            parts.to_vec(),
            move |args: &BackwardArgs<'_, T>| {
                let block: usize = axis_sizes.iter().sum::<usize>() * inner;
                let mut offset = 0usize;
                for (p, &asz) in args.parents.iter().zip(axis_sizes.iter()) {
                    if p.needs_grad() {
                        p.with_grad_buffer(|buf| {
                            for o in 0..outer {
                                let src = o * block + offset;
                                let dst = o * asz * inner;
                                for r in 0..asz * inner {
                                    buf[dst + r] = buf[dst + r] + args.out_grad[src + r];
                                }
                            }
                        });
                    }
                    offset += asz * inner;
                }
            },
        ))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> TensorResult<T> {
        let expanded: Vec<Tensor<T>> = parts
            .iter()
            .map(|p| p.unsqueeze(0))
            .collect::<Result<_, _>>()?;
        Tensor::concat(&expanded, 0)
    }

    /// Embedding lookup: rows of `self` ([vocab, dim]) selected by `ids`.
    pub fn embedding(&self, ids: &[usize]) -> TensorResult<T> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "embedding",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (vocab, dim) = (self.shape()[0], self.shape()[1]);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embedding",
                    index: id,
                    axis: 0,
                    size: vocab,
                });
            }
        }
        let data = self.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&data[id * dim..(id + 1) * dim]);
        }
        drop(data);
        let ids_owned: Vec<usize> = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids_owned.len(), dim],
            out,
            vec![self.clone()],
            move |args: &BackwardArgs<'_, T>| {
                args.parents[0].with_grad_buffer(|buf| {
                    for (row, &id) in ids_owned.iter().enumerate() {
                        let src = row * dim;
                        let dst = id * dim;
                        for c in 0..dim {
                            buf[dst + c] = buf[dst + c] + args.out_grad[src + c];
                        }
                    }
                });
            },
        ))
    }
}

// ── reductions ──────────────────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let d = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, d, inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn sum_all(&self) -> TensorResult<T> {
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            |args: &BackwardArgs<'_, T>| {
                let og = args.out_grad[0];
                args.parents[0].with_grad_buffer(|buf| {
                    for g in buf.iter_mut() {
                        *g = *g + og;
                    }
                });
            },
        ))
    }

    pub fn mean_all(&self) -> TensorResult<T> {
        let n = T::from_usize(self.numel());
        Ok(self.sum_all()?.mul_scalar(T::one() / n))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> TensorResult<T> {
        self.reduce_axis("sum_axis", axis, keepdim, T::one())
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> TensorResult<T> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "mean_axis",
                axis,
                rank: self.rank(),
            });
        }
        let inv_n = T::one() / T::from_usize(self.shape()[axis]);
        self.reduce_axis("mean_axis", axis, keepdim, inv_n)
    }

    fn reduce_axis(
        &self,
        op: &'static str,
        axis: usize,
        keepdim: bool,
        scale: T,
    ) -> TensorResult<T> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                rank: self.rank(),
            });
        }
        let (outer, d, inner) = axis_split(self.shape(), axis);
        let out_shape = reduced_shape(self.shape(), axis, keepdim);
        let data = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..d {
                let base = (o * d + i) * inner;
                for r in 0..inner {
                    out[o * inner + r] = out[o * inner + r] + data[base + r];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        drop(data);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |args: &BackwardArgs<'_, T>| {
                args.parents[0].with_grad_buffer(|buf| {
                    for o in 0..outer {
                        for i in 0..d {
                            let base = (o * d + i) * inner;
                            for r in 0..inner {
                                buf[base + r] =
                                    buf[base + r] + args.out_grad[o * inner + r] * scale;
                            }
                        }
                    }
                });
            },
        ))
    }

    /// Max along `axis`; gradient routes to the first maximal element of each lane.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> TensorResult<T> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "max_axis",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, d, inner) = axis_split(self.shape(), axis);
        let out_shape = reduced_shape(self.shape(), axis, keepdim);
        let data = self.data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..d {
                let base = (o * d + i) * inner;
                for r in 0..inner {
                    let v = data[base + r];
                    let slot = o * inner + r;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = i;
                    }
                }
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |args: &BackwardArgs<'_, T>| {
                args.parents[0].with_grad_buffer(|buf| {
                    for o in 0..outer {
                        for r in 0..inner {
                            let slot = o * inner + r;
                            let src = (o * d + arg[slot]) * inner + r;
                            buf[src] = buf[src] + args.out_grad[slot];
                        }
                    }
                });
            },
        ))
    }

    /// Index of the maximum along `axis` (ties resolve to the lowest index).
    /// Non-differentiable; returns plain indices plus the reduced shape.
    pub fn argmax_axis(&self, axis: usize) -> Result<(Vec<usize>, Vec<usize>), TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "argmax",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, d, inner) = axis_split(self.shape(), axis);
        let data = self.data();
        let mut best = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..d {
                let base = (o * d + i) * inner;
                for r in 0..inner {
                    let v = data[base + r];
                    let slot = o * inner + r;
                    if v > best[slot] {
                        best[slot] = v;
                        arg[slot] = i;
                    }
                }
            }
        }
        Ok((arg, reduced_shape(self.shape(), axis, false)))
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> TensorResult<T> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let (outer, d, inner) = axis_split(self.shape(), axis);
        let data = self.data();
        let mut out = data.clone();
        for o in 0..outer {
            for r in 0..inner {
                let mut max = T::neg_infinity();
                for i in 0..d {
                    max = max.max(out[(o * d + i) * inner + r]);
                }
                let mut sum = T::zero();
                for i in 0..d {
                    let idx = (o * d + i) * inner + r;
                    let e = (out[idx] - max).exp();
                    out[idx] = e;
                    sum = sum + e;
                }
                let inv = T::one() / sum;
                for i in 0..d {
                    let idx = (o * d + i) * inner + r;
                    out[idx] = out[idx] * inv;
                }
            }
        }
        drop(data);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |args: &BackwardArgs<'_, T>| {
                // dx_i = p_i (g_i − Σ_j p_j g_j) per lane
                args.parents[0].with_grad_buffer(|buf| {
                    for o in 0..outer {
                        for r in 0..inner {
                            let mut dot = T::zero();
                            for i in 0..d {
                                let idx = (o * d + i) * inner + r;
                                dot = dot + args.out_data[idx] * args.out_grad[idx];
                            }
                            for i in 0..d {
                                let idx = (o * d + i) * inner + r;
                                buf[idx] =
                                    buf[idx] + args.out_data[idx] * (args.out_grad[idx] - dot);
                            }
                        }
                    }
                });
            },
        ))
    }
}
