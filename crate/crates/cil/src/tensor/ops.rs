//! Tensor primitives: forward values plus analytic backward rules.

use rayon::prelude::*;

use super::{numel, BackwardCtx, Tensor};

/// Work threshold below which batched matmuls stay on one thread.
const PAR_MATMUL_FLOPS: usize = 1 << 14;

impl Tensor {
    pub(crate) fn with_grad_buf(&self, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad() {
            return;
        }
        let len = self.len();
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

/// Checks trailing-axis broadcast compatibility and returns the output shape.
/// Either the shapes are identical or the smaller one equals a suffix of the
/// larger one.
fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if &big[big.len() - small.len()..] != small {
        panic!("{op}: incompatible shapes {a:?} and {b:?} (broadcast is leading-axes only)");
    }
    big.to_vec()
}

/// Reduce a gradient of `big_len` down to `small_len` by summing the tiles a
/// trailing-broadcast operand was repeated over.
fn reduce_broadcast(grad: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for (i, g) in grad.iter().enumerate() {
        out[i % small_len] += g;
    }
    out
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    fwd: impl Fn(f64, f64) -> f64,
    backward: super::BackwardFn,
) -> Tensor {
    let shape = broadcast_shape(op, a.shape(), b.shape());
    let out_len = numel(&shape);
    let values = a.with_values(|av| {
        b.with_values(|bv| {
            let mut out = Vec::with_capacity(out_len);
            if av.len() == bv.len() {
                out.extend(av.iter().zip(bv).map(|(&x, &y)| fwd(x, y)));
            } else if av.len() > bv.len() {
                out.extend((0..out_len).map(|i| fwd(av[i], bv[i % bv.len()])));
            } else {
                out.extend((0..out_len).map(|i| fwd(av[i % av.len()], bv[i])));
            }
            out
        })
    });
    Tensor::from_op(shape, values, vec![a.clone(), b.clone()], backward)
}

impl Tensor {
    // ----- elementwise binary -----

    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_broadcast(
            "add",
            self,
            other,
            |x, y| x + y,
            Box::new(|ctx: &BackwardCtx| {
                for p in &ctx.parents[..2] {
                    let plen = p.len();
                    if plen == ctx.out_grad.len() {
                        p.accumulate_grad(ctx.out_grad);
                    } else {
                        p.accumulate_grad(&reduce_broadcast(ctx.out_grad, plen));
                    }
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_broadcast(
            "sub",
            self,
            other,
            |x, y| x - y,
            Box::new(|ctx: &BackwardCtx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                if a.len() == ctx.out_grad.len() {
                    a.accumulate_grad(ctx.out_grad);
                } else {
                    a.accumulate_grad(&reduce_broadcast(ctx.out_grad, a.len()));
                }
                let neg: Vec<f64> = ctx.out_grad.iter().map(|g| -g).collect();
                if b.len() == ctx.out_grad.len() {
                    b.accumulate_grad(&neg);
                } else {
                    b.accumulate_grad(&reduce_broadcast(&neg, b.len()));
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_broadcast(
            "mul",
            self,
            other,
            |x, y| x * y,
            Box::new(|ctx: &BackwardCtx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let n = ctx.out_grad.len();
                let da: Vec<f64> = b.with_values(|bv| {
                    (0..n).map(|i| ctx.out_grad[i] * bv[i % bv.len()]).collect()
                });
                if a.len() == n {
                    a.accumulate_grad(&da);
                } else {
                    a.accumulate_grad(&reduce_broadcast(&da, a.len()));
                }
                let db: Vec<f64> = a.with_values(|av| {
                    (0..n).map(|i| ctx.out_grad[i] * av[i % av.len()]).collect()
                });
                if b.len() == n {
                    b.accumulate_grad(&db);
                } else {
                    b.accumulate_grad(&reduce_broadcast(&db, b.len()));
                }
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary_broadcast(
            "div",
            self,
            other,
            |x, y| x / y,
            Box::new(|ctx: &BackwardCtx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let n = ctx.out_grad.len();
                let da: Vec<f64> = b.with_values(|bv| {
                    (0..n).map(|i| ctx.out_grad[i] / bv[i % bv.len()]).collect()
                });
                if a.len() == n {
                    a.accumulate_grad(&da);
                } else {
                    a.accumulate_grad(&reduce_broadcast(&da, a.len()));
                }
                let db: Vec<f64> = a.with_values(|av| {
                    b.with_values(|bv| {
                        (0..n)
                            .map(|i| {
                                let bi = bv[i % bv.len()];
                                -ctx.out_grad[i] * av[i % av.len()] / (bi * bi)
                            })
                            .collect()
                    })
                });
                if b.len() == n {
                    b.accumulate_grad(&db);
                } else {
                    b.accumulate_grad(&reduce_broadcast(&db, b.len()));
                }
            }),
        )
    }

    // ----- elementwise unary -----

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        // dx given (x, y, g)
        back: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let values: Vec<f64> = self.with_values(|v| v.iter().map(|&x| fwd(x)).collect());
        Tensor::from_op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let p = &ctx.parents[0];
                let dx: Vec<f64> = p.with_values(|xv| {
                    xv.iter()
                        .zip(ctx.out_values)
                        .zip(ctx.out_grad)
                        .map(|((&x, &y), &g)| back(x, y, g))
                        .collect()
                });
                p.accumulate_grad(&dx);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y, g| g * y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _, g| g / x)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y, g| g * (1.0 - y * y))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y, g| g * 0.5 / y)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _, g| -g)
    }

    /// Multiply by a plain constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _, g| c * g)
    }

    /// Add a plain constant.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _, g| g)
    }

    // ----- matmul -----

    /// Batched matrix product over the last two axes. Leading (batch) axes
    /// must match exactly, or the right operand may be a plain matrix shared
    /// across the batch. Rank-1 operands are rejected; reshape first.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (ash, bsh) = (self.shape(), other.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            panic!("matmul: operands must have rank >= 2, got {ash:?} x {bsh:?}");
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let broadcast_rhs = b_batch.is_empty() && !a_batch.is_empty();
        if k != k2 || (!broadcast_rhs && a_batch != b_batch) {
            panic!("matmul: incompatible shapes {ash:?} x {bsh:?}");
        }
        let batch = numel(a_batch).max(1);
        let mut shape = a_batch.to_vec();
        shape.push(m);
        shape.push(n);

        let values = self.with_values(|av| {
            other.with_values(|bv| {
                let mut out = vec![0.0; batch * m * n];
                matmul_forward(av, bv, &mut out, batch, m, k, n, broadcast_rhs);
                out
            })
        });
        Tensor::from_op(
            shape,
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let g = ctx.out_grad;
                // dA[i] += dC[i] . B[i]^T
                b.with_values(|bv| {
                    a.with_grad_buf(|ga| {
                        matmul_grad_lhs(g, bv, ga, batch, m, k, n, broadcast_rhs);
                    });
                });
                // dB[i] += A[i]^T . dC[i], summed over the batch when B is shared.
                a.with_values(|av| {
                    b.with_grad_buf(|gb| {
                        matmul_grad_rhs(av, g, gb, batch, m, k, n, broadcast_rhs);
                    });
                });
            }),
        )
    }

    // ----- shape movement -----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.len(),
            "reshape: cannot view {:?} as {:?}",
            self.shape(),
            shape
        );
        let prev = self.shape().to_vec();
        Tensor::from_op(
            shape.to_vec(),
            self.values(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let _ = &prev;
                ctx.parents[0].accumulate_grad(ctx.out_grad);
            }),
        )
    }

    /// Permute axes; `axes` is the source axis for each output axis.
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(
            axes.len(),
            shape.len(),
            "permute: axes {:?} do not match shape {:?}",
            axes,
            shape
        );
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let values = self.with_values(|v| permute_values(v, shape, axes));
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let fwd_out_shape = out_shape.clone();
        Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let dg = permute_values(ctx.out_grad, &fwd_out_shape, &inverse);
                ctx.parents[0].accumulate_grad(&dg);
            }),
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Tensor {
        let rank = self.shape().len();
        assert!(rank >= 2, "transpose: rank must be >= 2, got {:?}", self.shape());
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Concatenate along an existing axis.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no tensors given");
        let first = parts[0].shape().to_vec();
        assert!(axis < first.len(), "concat: axis {} out of range for {:?}", axis, first);
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                panic!("concat: shape {s:?} does not match {first:?} on non-{axis} axes");
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let lead: usize = first[..axis].iter().product();
        let trail: usize = first[axis + 1..].iter().product();
        let mut values = vec![0.0; numel(&shape)];
        let out_row = axis_total * trail;
        let mut offset = 0;
        for p in parts {
            let rows = p.shape()[axis] * trail;
            p.with_values(|pv| {
                for l in 0..lead {
                    values[l * out_row + offset..l * out_row + offset + rows]
                        .copy_from_slice(&pv[l * rows..(l + 1) * rows]);
                }
            });
            offset += rows;
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            shape,
            values,
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx| {
                let mut offset = 0;
                for (p, &sz) in ctx.parents.iter().zip(&sizes) {
                    let rows = sz * trail;
                    let mut dg = vec![0.0; lead * rows];
                    for l in 0..lead {
                        dg[l * rows..(l + 1) * rows].copy_from_slice(
                            &ctx.out_grad[l * out_row + offset..l * out_row + offset + rows],
                        );
                    }
                    p.accumulate_grad(&dg);
                    offset += rows;
                }
            }),
        )
    }

    /// Take `[start, end)` along one axis.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let shape = self.shape();
        assert!(
            axis < shape.len() && start < end && end <= shape[axis],
            "slice: range {start}..{end} on axis {axis} invalid for shape {shape:?}"
        );
        let lead: usize = shape[..axis].iter().product();
        let trail: usize = shape[axis + 1..].iter().product();
        let in_row = shape[axis] * trail;
        let out_rows = (end - start) * trail;
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let mut values = vec![0.0; lead * out_rows];
        self.with_values(|v| {
            for l in 0..lead {
                let src = l * in_row + start * trail;
                values[l * out_rows..(l + 1) * out_rows].copy_from_slice(&v[src..src + out_rows]);
            }
        });
        let in_len = self.len();
        Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut dg = vec![0.0; in_len];
                for l in 0..lead {
                    let dst = l * in_row + start * trail;
                    dg[dst..dst + out_rows]
                        .copy_from_slice(&ctx.out_grad[l * out_rows..(l + 1) * out_rows]);
                }
                ctx.parents[0].accumulate_grad(&dg);
            }),
        )
    }

    // ----- lookups -----

    /// Row lookup into an embedding table `[vocab, dim]`; `ids` may describe
    /// any batch shape, and the output is `[..batch.., dim]`.
    pub fn embedding_lookup(table: &Tensor, ids: &[usize], batch_shape: &[usize]) -> Tensor {
        let tsh = table.shape();
        assert_eq!(tsh.len(), 2, "embedding_lookup: table must be [vocab, dim], got {tsh:?}");
        assert_eq!(
            numel(batch_shape),
            ids.len(),
            "embedding_lookup: {} ids do not fill batch shape {:?}",
            ids.len(),
            batch_shape
        );
        let (vocab, dim) = (tsh[0], tsh[1]);
        for &id in ids {
            assert!(id < vocab, "embedding_lookup: id {id} out of range (vocab {vocab})");
        }
        let mut shape = batch_shape.to_vec();
        shape.push(dim);
        let mut values = vec![0.0; ids.len() * dim];
        table.with_values(|tv| {
            for (i, &id) in ids.iter().enumerate() {
                values[i * dim..(i + 1) * dim].copy_from_slice(&tv[id * dim..(id + 1) * dim]);
            }
        });
        let ids_owned = ids.to_vec();
        Tensor::from_op(
            shape,
            values,
            vec![table.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                ctx.parents[0].with_grad_buf(|gt| {
                    for (i, &id) in ids_owned.iter().enumerate() {
                        let g = &ctx.out_grad[i * dim..(i + 1) * dim];
                        for (slot, gi) in gt[id * dim..(id + 1) * dim].iter_mut().zip(g) {
                            *slot += gi;
                        }
                    }
                });
            }),
        )
    }

    /// From `[batch, rows, dim]`, pick one row per batch element: output
    /// `[batch, dim]` with `out[b] = x[b, idx[b]]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "gather_rows: expected [batch, rows, dim], got {shape:?}");
        let (batch, rows, dim) = (shape[0], shape[1], shape[2]);
        assert_eq!(idx.len(), batch, "gather_rows: {} indices for batch {}", idx.len(), batch);
        for &i in idx {
            assert!(i < rows, "gather_rows: row {i} out of range ({rows})");
        }
        let mut values = vec![0.0; batch * dim];
        self.with_values(|v| {
            for (b, &i) in idx.iter().enumerate() {
                let src = (b * rows + i) * dim;
                values[b * dim..(b + 1) * dim].copy_from_slice(&v[src..src + dim]);
            }
        });
        let idx_owned = idx.to_vec();
        let in_len = self.len();
        Tensor::from_op(
            vec![batch, dim],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut dg = vec![0.0; in_len];
                for (b, &i) in idx_owned.iter().enumerate() {
                    let dst = (b * rows + i) * dim;
                    dg[dst..dst + dim].copy_from_slice(&ctx.out_grad[b * dim..(b + 1) * dim]);
                }
                ctx.parents[0].accumulate_grad(&dg);
            }),
        )
    }

    // ----- reductions -----

    /// Sum over every element, producing a scalar.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.with_values(|v| v.iter().sum());
        let n = self.len();
        Tensor::from_op(
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.out_grad[0];
                ctx.parents[0].accumulate_grad(&vec![g; n]);
            }),
        )
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum along one axis (the axis is removed).
    pub fn sum(&self, axis: usize) -> Tensor {
        let shape = self.shape();
        assert!(axis < shape.len(), "sum: axis {axis} out of range for {shape:?}");
        let n = shape[axis];
        let trail: usize = shape[axis + 1..].iter().product();
        let lead: usize = shape[..axis].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let mut values = vec![0.0; lead * trail];
        self.with_values(|v| {
            for l in 0..lead {
                for t in 0..n {
                    let base = (l * n + t) * trail;
                    for j in 0..trail {
                        values[l * trail + j] += v[base + j];
                    }
                }
            }
        });
        let in_len = self.len();
        Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut dg = vec![0.0; in_len];
                for l in 0..lead {
                    for t in 0..n {
                        let base = (l * n + t) * trail;
                        dg[base..base + trail]
                            .copy_from_slice(&ctx.out_grad[l * trail..(l + 1) * trail]);
                    }
                }
                ctx.parents[0].accumulate_grad(&dg);
            }),
        )
    }

    /// Mean along one axis (the axis is removed).
    pub fn mean(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis];
        self.sum(axis).scale(1.0 / n as f64)
    }

    // ----- normalizations -----

    /// Softmax along `axis`; rows of the result are non-negative and sum to 1.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (shape, values) = self.axis_map(axis, |row_in, row_out| {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        });
        let ax = AxisView::new(&shape, axis);
        Tensor::from_op(
            shape,
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut dg = vec![0.0; ctx.out_grad.len()];
                ax.for_each_group(|idxs| {
                    let dot: f64 = idxs
                        .iter()
                        .map(|&i| ctx.out_grad[i] * ctx.out_values[i])
                        .sum();
                    for &i in idxs {
                        dg[i] = ctx.out_values[i] * (ctx.out_grad[i] - dot);
                    }
                });
                ctx.parents[0].accumulate_grad(&dg);
            }),
        )
    }

    /// Numerically stable `log(softmax(x))` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let (shape, values) = self.axis_map(axis, |row_in, row_out| {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row_in.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = x - lse;
            }
        });
        let ax = AxisView::new(&shape, axis);
        Tensor::from_op(
            shape,
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let mut dg = vec![0.0; ctx.out_grad.len()];
                ax.for_each_group(|idxs| {
                    let gsum: f64 = idxs.iter().map(|&i| ctx.out_grad[i]).sum();
                    for &i in idxs {
                        dg[i] = ctx.out_grad[i] - ctx.out_values[i].exp() * gsum;
                    }
                });
                ctx.parents[0].accumulate_grad(&dg);
            }),
        )
    }

    /// Normalize to zero mean / unit variance along `axis` (no scale/shift;
    /// apply those as separate broadcast mul/add).
    pub fn layer_norm(&self, axis: usize, eps: f64) -> Tensor {
        let (shape, values) = self.axis_map(axis, move |row_in, row_out| {
            let n = row_in.len() as f64;
            let mu: f64 = row_in.iter().sum::<f64>() / n;
            let var: f64 = row_in.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - mu) * r;
            }
        });
        let ax = AxisView::new(&shape, axis);
        Tensor::from_op(
            shape,
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let p = &ctx.parents[0];
                let mut dg = vec![0.0; ctx.out_grad.len()];
                p.with_values(|xv| {
                    ax.for_each_group(|idxs| {
                        let n = idxs.len() as f64;
                        let mu: f64 = idxs.iter().map(|&i| xv[i]).sum::<f64>() / n;
                        let var: f64 =
                            idxs.iter().map(|&i| (xv[i] - mu) * (xv[i] - mu)).sum::<f64>() / n;
                        let r = 1.0 / (var + eps).sqrt();
                        let gmean: f64 = idxs.iter().map(|&i| ctx.out_grad[i]).sum::<f64>() / n;
                        let gy_mean: f64 = idxs
                            .iter()
                            .map(|&i| ctx.out_grad[i] * ctx.out_values[i])
                            .sum::<f64>()
                            / n;
                        for &i in idxs {
                            dg[i] = r * (ctx.out_grad[i] - gmean - ctx.out_values[i] * gy_mean);
                        }
                    });
                });
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Apply `f` to each 1-D lane along `axis`, returning (shape, values).
    fn axis_map(
        &self,
        axis: usize,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> (Vec<usize>, Vec<f64>) {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
        let ax = AxisView::new(&shape, axis);
        let mut out = vec![0.0; self.len()];
        self.with_values(|v| {
            let mut row_in = vec![0.0; shape[axis]];
            let mut row_out = vec![0.0; shape[axis]];
            ax.for_each_group(|idxs| {
                for (slot, &i) in row_in.iter_mut().zip(idxs) {
                    *slot = v[i];
                }
                f(&row_in, &mut row_out);
                for (&o, &i) in row_out.iter().zip(idxs) {
                    out[i] = o;
                }
            });
        });
        (shape, out)
    }
}

/// Precomputed iteration pattern for per-lane ops along one axis.
#[derive(Clone)]
struct AxisView {
    lead: usize,
    n: usize,
    trail: usize,
}

impl AxisView {
    fn new(shape: &[usize], axis: usize) -> AxisView {
        AxisView {
            lead: shape[..axis].iter().product(),
            n: shape[axis],
            trail: shape[axis + 1..].iter().product(),
        }
    }

    fn for_each_group(&self, mut f: impl FnMut(&[usize])) {
        let mut idxs = vec![0usize; self.n];
        for l in 0..self.lead {
            for t in 0..self.trail {
                for (j, slot) in idxs.iter_mut().enumerate() {
                    *slot = (l * self.n + j) * self.trail + t;
                }
                f(&idxs);
            }
        }
    }
}

fn permute_values(v: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; v.len()];
    let mut out_idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &oi) in out_idx.iter().enumerate() {
            src += oi * in_strides[axes[i]];
        }
        *slot = v[src];
        // Odometer increment over the output multi-index.
        for i in (0..rank).rev() {
            out_idx[i] += 1;
            if out_idx[i] < out_shape[i] {
                break;
            }
            out_idx[i] = 0;
        }
    }
    out
}

// ----- dgemm plumbing -----

#[allow(clippy::too_many_arguments)]
fn gemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
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

#[allow(clippy::too_many_arguments)]
fn matmul_forward(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    broadcast_rhs: bool,
) {
    let run = |(i, cs): (usize, &mut [f64])| {
        let asl = &a[i * m * k..(i + 1) * m * k];
        let bsl = if broadcast_rhs { b } else { &b[i * k * n..(i + 1) * k * n] };
        gemm_rowmajor(m, k, n, asl, false, bsl, false, 0.0, cs);
    };
    if batch > 1 && batch * m * k * n >= PAR_MATMUL_FLOPS {
        c.par_chunks_mut(m * n).enumerate().for_each(run);
    } else {
        c.chunks_mut(m * n).enumerate().for_each(run);
    }
}

/// dA[i] += dC[i] . B[i]^T  (a per-slice [m,n] x [n,k] product).
#[allow(clippy::too_many_arguments)]
fn matmul_grad_lhs(
    g: &[f64],
    b: &[f64],
    ga: &mut [f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    broadcast_rhs: bool,
) {
    let run = |(i, gas): (usize, &mut [f64])| {
        let gsl = &g[i * m * n..(i + 1) * m * n];
        let bsl = if broadcast_rhs { b } else { &b[i * k * n..(i + 1) * k * n] };
        // B^T is [n, k]: element (r, c) = B[c * n + r], i.e. transposed view.
        gemm_rowmajor(m, n, k, gsl, false, bsl, true, 1.0, gas);
    };
    if batch > 1 && batch * m * k * n >= PAR_MATMUL_FLOPS {
        ga.par_chunks_mut(m * k).enumerate().for_each(run);
    } else {
        ga.chunks_mut(m * k).enumerate().for_each(run);
    }
}

/// dB[i] += A[i]^T . dC[i]; when B is shared across the batch the per-slice
/// contributions accumulate sequentially so the result is deterministic.
#[allow(clippy::too_many_arguments)]
fn matmul_grad_rhs(
    a: &[f64],
    g: &[f64],
    gb: &mut [f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    broadcast_rhs: bool,
) {
    if broadcast_rhs {
        for i in 0..batch {
            let asl = &a[i * m * k..(i + 1) * m * k];
            let gsl = &g[i * m * n..(i + 1) * m * n];
            gemm_rowmajor(k, m, n, asl, true, gsl, false, 1.0, gb);
        }
    } else {
        let run = |(i, gbs): (usize, &mut [f64])| {
            let asl = &a[i * m * k..(i + 1) * m * k];
            let gsl = &g[i * m * n..(i + 1) * m * n];
            gemm_rowmajor(k, m, n, asl, true, gsl, false, 1.0, gbs);
        };
        if batch > 1 && batch * m * k * n >= PAR_MATMUL_FLOPS {
            gb.par_chunks_mut(k * n).enumerate().for_each(run);
        } else {
            gb.chunks_mut(k * n).enumerate().for_each(run);
        }
    }
}
