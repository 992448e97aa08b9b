//! Differentiable operations recorded on the [`Tape`].
//!
//! Each op validates shapes eagerly (the error names the op and the
//! offending dimensions), computes its value, and registers a closure
//! returning per-parent gradient contributions. Fused kernels with
//! hand-derived VJPs (convolution, LSTM) live in sibling modules.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ops_raw::{matmul_raw, transpose_slice};
use crate::autodiff::tensor::{c, Real, Tensor};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

fn structure(op: &str, msg: String) -> Error {
    Error::Structure(format!("{op}: {msg}"))
}

impl<F: Real> Tape<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(structure(op, format!("operand shapes {sa:?} vs {sb:?} differ")));
        }
        Ok(())
    }

    // ---- elementwise arithmetic ------------------------------------------

    /// Elementwise `a + b` (identical shapes).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip(&self.value(b), |x, y| x + y)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |up| vec![up.clone(), up.clone()]),
        ))
    }

    /// Elementwise `a - b` (identical shapes).
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip(&self.value(b), |x, y| x - y)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |up| vec![up.clone(), up.map(|g| -g)]),
        ))
    }

    /// Elementwise `a * b` (identical shapes).
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let value = va.zip(&vb, |x, y| x * y)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |up| {
                vec![
                    up.zip(&vb, |g, y| g * y).expect("mul backward shape"),
                    up.zip(&va, |g, x| g * x).expect("mul backward shape"),
                ]
            }),
        ))
    }

    /// Elementwise negation.
    pub fn neg(&self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| -v);
        Ok(self.push_op(value, vec![x], Box::new(move |up| vec![up.map(|g| -g)])))
    }

    /// Multiply by a compile-time-known scalar constant.
    pub fn scale(&self, x: Var, k: f64) -> Result<Var> {
        let kf = c::<F>(k);
        let value = self.value(x).map(|v| v * kf);
        Ok(self.push_op(value, vec![x], Box::new(move |up| vec![up.map(|g| g * kf)])))
    }

    /// Add a scalar constant to every element.
    pub fn add_scalar(&self, x: Var, k: f64) -> Result<Var> {
        let kf = c::<F>(k);
        let value = self.value(x).map(|v| v + kf);
        Ok(self.push_op(value, vec![x], Box::new(move |up| vec![up.clone()])))
    }

    /// Elementwise square.
    pub fn square(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let value = vx.map(|v| v * v);
        let two = c::<F>(2.0);
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![up.zip(&vx, |g, v| g * two * v).expect("square backward")]),
        ))
    }

    /// Multiply a tensor by a rank-0 variable (both receive gradients).
    pub fn mul_by_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.len() != 1 {
            return Err(structure(
                "mul_by_scalar_var",
                format!("scale must hold one element, got shape {:?}", vs.shape()),
            ));
        }
        let sv = vs.data()[0];
        let vx = self.value(x);
        let value = vx.map(|v| v * sv);
        let s_shape = vs.shape().to_vec();
        Ok(self.push_op(
            value,
            vec![x, s],
            Box::new(move |up| {
                let dx = up.map(|g| g * sv);
                let ds: F = up.data().iter().zip(vx.data()).map(|(&g, &x)| g * x).sum();
                let ds_t = Tensor::new(s_shape.clone(), vec![ds]).expect("scalar grad");
                vec![dx, ds_t]
            }),
        ))
    }

    /// Extract element `i` of a rank-1 tensor as a rank-0 value.
    pub fn index_scalar(&self, x: Var, i: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 1 {
            return Err(structure(
                "index_scalar",
                format!("expects a rank-1 input, got shape {:?}", vx.shape()),
            ));
        }
        if i >= vx.len() {
            return Err(structure(
                "index_scalar",
                format!("index {i} out of range for length {}", vx.len()),
            ));
        }
        let n = vx.len();
        let value = Tensor::scalar(vx.data()[i]);
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| {
                let mut g = Tensor::zeros(&[n]);
                g.data_mut()[i] = up.data()[0];
                vec![g]
            }),
        ))
    }

    // ---- activations ------------------------------------------------------

    /// Rectified linear unit; gradient at exactly zero is zero.
    pub fn relu(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let value = vx.map(|v| if v > F::zero() { v } else { F::zero() });
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| {
                vec![up
                    .zip(&vx, |g, v| if v > F::zero() { g } else { F::zero() })
                    .expect("relu backward")]
            }),
        ))
    }

    /// Hyperbolic tangent.
    pub fn tanh(&self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        let y = value.clone();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| {
                vec![up.zip(&y, |g, t| g * (F::one() - t * t)).expect("tanh backward")]
            }),
        ))
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        let y = value.clone();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| {
                vec![up.zip(&y, |g, s| g * s * (F::one() - s)).expect("sigmoid backward")]
            }),
        ))
    }

    /// Elementwise exponential.
    pub fn exp(&self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        let y = value.clone();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![up.zip(&y, |g, e| g * e).expect("exp backward")]),
        ))
    }

    /// Clamp to `[lo, hi]`; gradient passes through unchanged inside the
    /// interval and is zero outside it.
    pub fn clip(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Config(format!("clip: empty interval [{lo}, {hi}]")));
        }
        let lof = c::<F>(lo);
        let hif = c::<F>(hi);
        let vx = self.value(x);
        let value = vx.map(|v| v.max(lof).min(hif));
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| {
                vec![up
                    .zip(&vx, |g, v| if v >= lof && v <= hif { g } else { F::zero() })
                    .expect("clip backward")]
            }),
        ))
    }

    // ---- broadcasting -----------------------------------------------------

    /// Add a rank-1 bias over the last axis of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let vb = self.value(bias);
        if vx.rank() == 0 || vb.rank() != 1 || vb.len() != *vx.shape().last().unwrap() {
            return Err(structure(
                "add_bias",
                format!("input {:?} incompatible with bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let last = vb.len();
        let mut value = vx.clone();
        {
            let d = value.data_mut();
            let b = vb.data();
            for (i, v) in d.iter_mut().enumerate() {
                *v = *v + b[i % last];
            }
        }
        Ok(self.push_op(
            value,
            vec![x, bias],
            Box::new(move |up| {
                let mut db = vec![F::zero(); last];
                for (i, &g) in up.data().iter().enumerate() {
                    db[i % last] = db[i % last] + g;
                }
                vec![up.clone(), Tensor::new(vec![last], db).expect("bias grad")]
            }),
        ))
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let total: F = vx.data().iter().copied().sum();
        let shape = vx.shape().to_vec();
        Ok(self.push_op(
            Tensor::scalar(total),
            vec![x],
            Box::new(move |up| vec![Tensor::full(&shape, up.data()[0])]),
        ))
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(structure("mean_all", "input has no elements".into()));
        }
        let n = c::<F>(vx.len() as f64);
        let total: F = vx.data().iter().copied().sum();
        let shape = vx.shape().to_vec();
        Ok(self.push_op(
            Tensor::scalar(total / n),
            vec![x],
            Box::new(move |up| vec![Tensor::full(&shape, up.data()[0] / n)]),
        ))
    }

    /// Mean over axis 1 of a rank-3 tensor: `[B, T, C] -> [B, C]`.
    pub fn mean_axis1(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(structure(
                "mean_axis1",
                format!("expects rank-3 input, got shape {:?}", vx.shape()),
            ));
        }
        let (b, t, ch) = (vx.dim(0), vx.dim(1), vx.dim(2));
        if t == 0 {
            return Err(structure("mean_axis1", "time axis is empty".into()));
        }
        let tf = c::<F>(t as f64);
        let mut out = vec![F::zero(); b * ch];
        let d = vx.data();
        for bi in 0..b {
            for ti in 0..t {
                let row = (bi * t + ti) * ch;
                for ci in 0..ch {
                    out[bi * ch + ci] = out[bi * ch + ci] + d[row + ci];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v / tf;
        }
        Ok(self.push_op(
            Tensor::new(vec![b, ch], out)?,
            vec![x],
            Box::new(move |up| {
                let mut g = Tensor::zeros(&[b, t, ch]);
                {
                    let gd = g.data_mut();
                    let ud = up.data();
                    for bi in 0..b {
                        for ti in 0..t {
                            let row = (bi * t + ti) * ch;
                            for ci in 0..ch {
                                gd[row + ci] = ud[bi * ch + ci] / tf;
                            }
                        }
                    }
                }
                vec![g]
            }),
        ))
    }

    // ---- shaping ----------------------------------------------------------

    /// View under a new shape with the same element count.
    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let value = vx.reshaped(shape)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![up.reshaped(old.clone()).expect("reshape backward")]),
        ))
    }

    /// Swap the last two axes of a rank-3 tensor: `[B, T, C] -> [B, C, T]`.
    pub fn transpose12(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(structure(
                "transpose12",
                format!("expects rank-3 input, got shape {:?}", vx.shape()),
            ));
        }
        let (b, t, ch) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let value = transpose12_raw(&vx, b, t, ch);
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![transpose12_raw(up, b, ch, t)]),
        ))
    }

    /// Transpose a rank-2 tensor.
    pub fn transpose2d(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(structure(
                "transpose2d",
                format!("expects rank-2 input, got shape {:?}", vx.shape()),
            ));
        }
        let (m, n) = (vx.dim(0), vx.dim(1));
        let value = transpose2d_raw(&vx, m, n);
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![transpose2d_raw(up, n, m)]),
        ))
    }

    /// Concatenate tensors along the last axis; leading dims must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(structure("concat_last", "no inputs".into()));
        }
        let values: Vec<Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        if values[0].rank() == 0 {
            return Err(structure("concat_last", "rank-0 inputs unsupported".into()));
        }
        for v in &values {
            if &v.shape()[..v.rank() - 1] != lead {
                return Err(structure(
                    "concat_last",
                    format!(
                        "leading dims differ: {:?} vs {:?}",
                        values[0].shape(),
                        v.shape()
                    ),
                ));
            }
        }
        let lasts: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total_last: usize = lasts.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total_last);
        for r in 0..rows {
            for (v, &l) in values.iter().zip(&lasts) {
                out.extend_from_slice(&v.data()[r * l..(r + 1) * l]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        let lead_vec = lead.to_vec();
        Ok(self.push_op(
            Tensor::new(shape, out)?,
            parts.to_vec(),
            Box::new(move |up| {
                let ud = up.data();
                let mut grads: Vec<Tensor<F>> = Vec::with_capacity(lasts.len());
                let mut offset = 0usize;
                for &l in &lasts {
                    let mut buf = Vec::with_capacity(rows * l);
                    for r in 0..rows {
                        let start = r * total_last + offset;
                        buf.extend_from_slice(&ud[start..start + l]);
                    }
                    let mut shape = lead_vec.clone();
                    shape.push(l);
                    grads.push(Tensor::new(shape, buf).expect("concat backward"));
                    offset += l;
                }
                grads
            }),
        ))
    }

    /// `[B, T, H*d] -> [B*H, T, d]`: expose heads as extra batch entries.
    pub fn split_heads(&self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || heads == 0 || vx.dim(2) % heads != 0 {
            return Err(structure(
                "split_heads",
                format!("shape {:?} not splittable into {heads} heads", vx.shape()),
            ));
        }
        let (b, t, hd) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let d = hd / heads;
        let value = split_heads_raw(&vx, b, t, heads, d);
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![merge_heads_raw(up, b, t, heads, d)]),
        ))
    }

    /// `[B*H, T, d] -> [B, T, H*d]`: inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 || heads == 0 || vx.dim(0) % heads != 0 {
            return Err(structure(
                "merge_heads",
                format!("shape {:?} not mergeable from {heads} heads", vx.shape()),
            ));
        }
        let (bh, t, d) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let b = bh / heads;
        let value = merge_heads_raw(&vx, b, t, heads, d);
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![split_heads_raw(up, b, t, heads, d)]),
        ))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Rank-2 matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0) {
            return Err(structure(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        let value = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], value)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |up| {
                // dA = up . B^T ; dB = A^T . up
                let bt = transpose2d_raw(&vb, k, n);
                let da = matmul_raw(up.data(), bt.data(), m, n, k);
                let at = transpose2d_raw(&va, m, k);
                let db = matmul_raw(at.data(), up.data(), k, m, n);
                vec![
                    Tensor::new(vec![m, k], da).expect("matmul dA"),
                    Tensor::new(vec![k, n], db).expect("matmul dB"),
                ]
            }),
        ))
    }

    /// Batched matrix product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1)
        {
            return Err(structure(
                "bmm",
                format!("incompatible shapes {:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (bs, m, k, n) = (va.dim(0), va.dim(1), va.dim(2), vb.dim(2));
        let mut out = Vec::with_capacity(bs * m * n);
        for bi in 0..bs {
            let av = &va.data()[bi * m * k..(bi + 1) * m * k];
            let bv = &vb.data()[bi * k * n..(bi + 1) * k * n];
            out.extend(matmul_raw(av, bv, m, k, n));
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push_op(
            value,
            vec![a, b],
            Box::new(move |up| {
                let mut da = Vec::with_capacity(bs * m * k);
                let mut db = Vec::with_capacity(bs * k * n);
                for bi in 0..bs {
                    let av = &va.data()[bi * m * k..(bi + 1) * m * k];
                    let bv = &vb.data()[bi * k * n..(bi + 1) * k * n];
                    let uv = &up.data()[bi * m * n..(bi + 1) * m * n];
                    let bt = transpose_slice(bv, k, n);
                    da.extend(matmul_raw(uv, &bt, m, n, k));
                    let at = transpose_slice(av, m, k);
                    db.extend(matmul_raw(&at, uv, k, m, n));
                }
                vec![
                    Tensor::new(vec![bs, m, k], da).expect("bmm dA"),
                    Tensor::new(vec![bs, k, n], db).expect("bmm dB"),
                ]
            }),
        ))
    }

    // ---- softmax ------------------------------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(structure("softmax_last", "rank-0 input unsupported".into()));
        }
        let last = *vx.shape().last().unwrap();
        if last == 0 {
            return Err(structure("softmax_last", "empty last axis".into()));
        }
        let groups = vx.len() / last;
        let mut out = vec![F::zero(); vx.len()];
        let d = vx.data();
        for g in 0..groups {
            let row = &d[g * last..(g + 1) * last];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[g * last + j] = e;
                z = z + e;
            }
            for j in 0..last {
                out[g * last + j] = out[g * last + j] / z;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let y = value.clone();
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| {
                let yd = y.data();
                let ud = up.data();
                let mut g = vec![F::zero(); yd.len()];
                for gi in 0..groups {
                    let base = gi * last;
                    let mut dot = F::zero();
                    for j in 0..last {
                        dot = dot + ud[base + j] * yd[base + j];
                    }
                    for j in 0..last {
                        g[base + j] = yd[base + j] * (ud[base + j] - dot);
                    }
                }
                vec![Tensor::new(y.shape().to_vec(), g).expect("softmax backward")]
            }),
        ))
    }

    // ---- pooling -------------------------------------------------------------

    /// Non-overlapping max pooling with width 2 over axis 1 of `[B, T, C]`.
    /// An odd trailing element is dropped. Ties route the gradient to the
    /// earlier position.
    pub fn maxpool1d_2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(structure(
                "maxpool1d_2",
                format!("expects rank-3 input, got shape {:?}", vx.shape()),
            ));
        }
        let (b, t, ch) = (vx.dim(0), vx.dim(1), vx.dim(2));
        if t < 2 {
            return Err(structure(
                "maxpool1d_2",
                format!("time axis {t} too short to pool"),
            ));
        }
        let to = t / 2;
        let d = vx.data();
        let mut out = Vec::with_capacity(b * to * ch);
        let mut arg = Vec::with_capacity(b * to * ch);
        for bi in 0..b {
            for o in 0..to {
                let r0 = (bi * t + 2 * o) * ch;
                let r1 = (bi * t + 2 * o + 1) * ch;
                for ci in 0..ch {
                    let (v0, v1) = (d[r0 + ci], d[r1 + ci]);
                    if v1 > v0 {
                        out.push(v1);
                        arg.push(r1 + ci);
                    } else {
                        out.push(v0);
                        arg.push(r0 + ci);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, to, ch], out)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| {
                let mut g = Tensor::zeros(&[b, t, ch]);
                {
                    let gd = g.data_mut();
                    for (i, &src) in arg.iter().enumerate() {
                        gd[src] = gd[src] + up.data()[i];
                    }
                }
                vec![g]
            }),
        ))
    }

    // ---- normalization & regularization ---------------------------------------

    /// Batch normalization in training mode over the channel (last) axis.
    ///
    /// Accepts `[N, C]` or `[B, T, C]`; statistics pool every non-channel
    /// position with the biased (population) variance. Returns the normalized
    /// output plus the batch mean/variance so the caller can fold them into
    /// running statistics.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor<F>, Tensor<F>)> {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let ch = match vx.rank() {
            2 => vx.dim(1),
            3 => vx.dim(2),
            r => {
                return Err(structure(
                    "batchnorm",
                    format!("expects rank-2 or rank-3 input, got rank {r}"),
                ))
            }
        };
        if vg.shape() != [ch] || vb.shape() != [ch] {
            return Err(structure(
                "batchnorm",
                format!(
                    "gamma {:?} / beta {:?} incompatible with {ch} channels",
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let rows = vx.len() / ch;
        if rows == 0 {
            return Err(structure("batchnorm", "no rows to normalize".into()));
        }
        let nf = c::<F>(rows as f64);
        let epsf = c::<F>(eps);
        let d = vx.data();
        let mut mean = vec![F::zero(); ch];
        for r in 0..rows {
            for ci in 0..ch {
                mean[ci] = mean[ci] + d[r * ch + ci];
            }
        }
        for m in mean.iter_mut() {
            *m = *m / nf;
        }
        let mut var = vec![F::zero(); ch];
        for r in 0..rows {
            for ci in 0..ch {
                let dv = d[r * ch + ci] - mean[ci];
                var[ci] = var[ci] + dv * dv;
            }
        }
        for v in var.iter_mut() {
            *v = *v / nf;
        }
        let inv: Vec<F> = var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let mut xhat = vec![F::zero(); vx.len()];
        let mut out = vec![F::zero(); vx.len()];
        let (gd, bd) = (vg.data(), vb.data());
        for r in 0..rows {
            for ci in 0..ch {
                let idx = r * ch + ci;
                let h = (d[idx] - mean[ci]) * inv[ci];
                xhat[idx] = h;
                out[idx] = gd[ci] * h + bd[ci];
            }
        }
        let mean_t = Tensor::new(vec![ch], mean)?;
        let var_t = Tensor::new(vec![ch], var.clone())?;
        let xhat_t = Tensor::new(vx.shape().to_vec(), xhat)?;
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let vg_c = vg.clone();
        let y = self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(move |up| {
                let ud = up.data();
                let hd = xhat_t.data();
                let gamd = vg_c.data();
                let mut dgamma = vec![F::zero(); ch];
                let mut dbeta = vec![F::zero(); ch];
                let mut mean_u = vec![F::zero(); ch];
                let mut mean_uh = vec![F::zero(); ch];
                for r in 0..rows {
                    for ci in 0..ch {
                        let idx = r * ch + ci;
                        dgamma[ci] = dgamma[ci] + ud[idx] * hd[idx];
                        dbeta[ci] = dbeta[ci] + ud[idx];
                        mean_u[ci] = mean_u[ci] + ud[idx];
                        mean_uh[ci] = mean_uh[ci] + ud[idx] * hd[idx];
                    }
                }
                for ci in 0..ch {
                    mean_u[ci] = mean_u[ci] / nf;
                    mean_uh[ci] = mean_uh[ci] / nf;
                }
                let mut dx = vec![F::zero(); ud.len()];
                for r in 0..rows {
                    for ci in 0..ch {
                        let idx = r * ch + ci;
                        dx[idx] = gamd[ci]
                            * inv[ci]
                            * (ud[idx] - mean_u[ci] - hd[idx] * mean_uh[ci]);
                    }
                }
                vec![
                    Tensor::new(xhat_t.shape().to_vec(), dx).expect("batchnorm dx"),
                    Tensor::new(vec![ch], dgamma).expect("batchnorm dgamma"),
                    Tensor::new(vec![ch], dbeta).expect("batchnorm dbeta"),
                ]
            }),
        );
        Ok((y, mean_t, var_t))
    }

    /// Batch normalization in inference mode using frozen running statistics.
    pub fn batchnorm_infer(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
        eps: f64,
    ) -> Result<Var> {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let ch = match vx.rank() {
            2 => vx.dim(1),
            3 => vx.dim(2),
            r => {
                return Err(structure(
                    "batchnorm",
                    format!("expects rank-2 or rank-3 input, got rank {r}"),
                ))
            }
        };
        if vg.shape() != [ch]
            || vb.shape() != [ch]
            || running_mean.shape() != [ch]
            || running_var.shape() != [ch]
        {
            return Err(structure(
                "batchnorm",
                format!("parameter shapes incompatible with {ch} channels"),
            ));
        }
        let rows = vx.len() / ch;
        let epsf = c::<F>(eps);
        let inv: Vec<F> =
            running_var.data().iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let rm = running_mean.data().to_vec();
        let d = vx.data();
        let (gd, bd) = (vg.data(), vb.data());
        let mut out = vec![F::zero(); vx.len()];
        let mut xhat = vec![F::zero(); vx.len()];
        for r in 0..rows {
            for ci in 0..ch {
                let idx = r * ch + ci;
                let h = (d[idx] - rm[ci]) * inv[ci];
                xhat[idx] = h;
                out[idx] = gd[ci] * h + bd[ci];
            }
        }
        let xhat_t = Tensor::new(vx.shape().to_vec(), xhat)?;
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let vg_c = vg.clone();
        Ok(self.push_op(
            value,
            vec![x, gamma, beta],
            Box::new(move |up| {
                let ud = up.data();
                let hd = xhat_t.data();
                let gamd = vg_c.data();
                let mut dgamma = vec![F::zero(); ch];
                let mut dbeta = vec![F::zero(); ch];
                let mut dx = vec![F::zero(); ud.len()];
                for r in 0..rows {
                    for ci in 0..ch {
                        let idx = r * ch + ci;
                        dgamma[ci] = dgamma[ci] + ud[idx] * hd[idx];
                        dbeta[ci] = dbeta[ci] + ud[idx];
                        dx[idx] = ud[idx] * gamd[ci] * inv[ci];
                    }
                }
                vec![
                    Tensor::new(xhat_t.shape().to_vec(), dx).expect("batchnorm dx"),
                    Tensor::new(vec![ch], dgamma).expect("batchnorm dgamma"),
                    Tensor::new(vec![ch], dbeta).expect("batchnorm dbeta"),
                ]
            }),
        ))
    }

    /// Inverted dropout with a deterministic mask drawn from `seed`.
    /// Kept elements scale by `1 / (1 - rate)`; the same mask drives the
    /// backward pass.
    pub fn dropout(&self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout: rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let vx = self.value(x);
        let keep = 1.0 - rate;
        let inv_keep = c::<F>(1.0 / keep);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask_vals: Vec<F> = (0..vx.len())
            .map(|_| {
                let u: f64 = rng.random();
                if u < keep {
                    inv_keep
                } else {
                    F::zero()
                }
            })
            .collect();
        let mask = Tensor::new(vx.shape().to_vec(), mask_vals)?;
        let value = vx.zip(&mask, |v, m| v * m)?;
        Ok(self.push_op(
            value,
            vec![x],
            Box::new(move |up| vec![up.zip(&mask, |g, m| g * m).expect("dropout backward")]),
        ))
    }
}

/// Scaled dot-product attention over rank-2 operands; returns `(output,
/// weights)`. Queries `[n, d_k]`, keys `[m, d_k]`, values `[m, d_v]`.
pub fn scaled_dot_attention<F: Real>(
    tape: &Tape<F>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape_of(q), tape.shape_of(k), tape.shape_of(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Structure(format!(
            "scaled_dot_attention: incompatible shapes q{qs:?} k{ks:?} v{vs:?}"
        )));
    }
    let dk = qs[1];
    if dk == 0 {
        return Err(Error::Structure("scaled_dot_attention: zero-width keys".into()));
    }
    let kt = tape.transpose2d(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = tape.softmax_last(scaled)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

// ---- raw tensor shufflers shared by forward and backward paths ----------------

fn transpose2d_raw<F: Real>(t: &Tensor<F>, m: usize, n: usize) -> Tensor<F> {
    Tensor::new(vec![n, m], transpose_slice(t.data(), m, n)).expect("transpose shape")
}

fn transpose12_raw<F: Real>(t: &Tensor<F>, b: usize, d1: usize, d2: usize) -> Tensor<F> {
    let mut out = vec![F::zero(); b * d1 * d2];
    let d = t.data();
    for bi in 0..b {
        for i in 0..d1 {
            for j in 0..d2 {
                out[bi * d1 * d2 + j * d1 + i] = d[bi * d1 * d2 + i * d2 + j];
            }
        }
    }
    Tensor::new(vec![b, d2, d1], out).expect("transpose12 shape")
}

fn split_heads_raw<F: Real>(
    x: &Tensor<F>,
    b: usize,
    t: usize,
    h: usize,
    d: usize,
) -> Tensor<F> {
    let mut out = vec![F::zero(); b * h * t * d];
    let xd = x.data();
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let src = (bi * t + ti) * h * d + hi * d;
                let dst = ((bi * h + hi) * t + ti) * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
    }
    Tensor::new(vec![b * h, t, d], out).expect("split_heads shape")
}

fn merge_heads_raw<F: Real>(
    x: &Tensor<F>,
    b: usize,
    t: usize,
    h: usize,
    d: usize,
) -> Tensor<F> {
    let mut out = vec![F::zero(); b * t * h * d];
    let xd = x.data();
    for bi in 0..b {
        for hi in 0..h {
            for ti in 0..t {
                let src = ((bi * h + hi) * t + ti) * d;
                let dst = (bi * t + ti) * h * d + hi * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
    }
    Tensor::new(vec![b, t, h * d], out).expect("merge_heads shape")
}
