//! Fused 1-D convolution over the time axis.
//!
//! Layout follows the rest of the model: activations are `[B, T, C]`,
//! kernels are `[K, C_in, C_out]`. Padding is "same" with zeros, so odd
//! kernel widths keep the time dimension unchanged.

use crate::autodiff::tensor::{Real, Tensor};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

impl<F: Real> Tape<F> {
    /// `conv1d(x[B,T,Cin], kernel[K,Cin,M], bias[M]) -> [B,T,M]` with same
    /// zero padding; `K` must be odd so the padding is symmetric.
    pub fn conv1d(&self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let vk = self.value(kernel);
        let vb = self.value(bias);
        if vx.rank() != 3 || vk.rank() != 3 || vb.rank() != 1 {
            return Err(Error::Structure(format!(
                "conv1d: expected ranks (3,3,1), got x{:?} k{:?} b{:?}",
                vx.shape(),
                vk.shape(),
                vb.shape()
            )));
        }
        let (b, t, cin) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (k, kc, m) = (vk.dim(0), vk.dim(1), vk.dim(2));
        if kc != cin || vb.len() != m {
            return Err(Error::Structure(format!(
                "conv1d: kernel {:?} / bias {:?} incompatible with input {:?}",
                vk.shape(),
                vb.shape(),
                vx.shape()
            )));
        }
        if k % 2 == 0 || k == 0 {
            return Err(Error::Config(format!(
                "conv1d: kernel width {k} must be odd for same padding"
            )));
        }
        let pad = (k - 1) / 2;

        let xd = vx.data();
        let kd = vk.data();
        let bd = vb.data();
        let mut out = vec![F::zero(); b * t * m];
        for bi in 0..b {
            for ti in 0..t {
                let orow = (bi * t + ti) * m;
                out[orow..orow + m].copy_from_slice(bd);
                for j in 0..k {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = (bi * t + src as usize) * cin;
                    for ci in 0..cin {
                        let xv = xd[xrow + ci];
                        if xv == F::zero() {
                            continue;
                        }
                        let krow = (j * cin + ci) * m;
                        for mi in 0..m {
                            out[orow + mi] = out[orow + mi] + xv * kd[krow + mi];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t, m], out)?;
        Ok(self.push_op(
            value,
            vec![x, kernel, bias],
            Box::new(move |up| {
                let ud = up.data();
                let xd = vx.data();
                let kd = vk.data();
                let mut dx = vec![F::zero(); b * t * cin];
                let mut dk = vec![F::zero(); k * cin * m];
                let mut db = vec![F::zero(); m];
                for bi in 0..b {
                    for ti in 0..t {
                        let urow = (bi * t + ti) * m;
                        for mi in 0..m {
                            db[mi] = db[mi] + ud[urow + mi];
                        }
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let xrow = (bi * t + src as usize) * cin;
                            for ci in 0..cin {
                                let krow = (j * cin + ci) * m;
                                let mut acc = F::zero();
                                for mi in 0..m {
                                    let g = ud[urow + mi];
                                    acc = acc + g * kd[krow + mi];
                                    dk[krow + mi] = dk[krow + mi] + g * xd[xrow + ci];
                                }
                                dx[xrow + ci] = dx[xrow + ci] + acc;
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(vec![b, t, cin], dx).expect("conv1d dx"),
                    Tensor::new(vec![k, cin, m], dk).expect("conv1d dk"),
                    Tensor::new(vec![m], db).expect("conv1d db"),
                ]
            }),
        ))
    }
}
