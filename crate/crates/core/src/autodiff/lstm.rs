//! Fused LSTM over a full sequence, with backpropagation through time.
//!
//! One node covers the whole scan: the forward pass caches per-step gate
//! activations and cell states, and the backward closure replays them in
//! reverse. Gate layout along the `4H` axis is `[input, forget, cell, output]`.
//! Recurrent dropout takes a fixed per-sequence mask (variational style)
//! applied to `h_{t-1}` before the recurrent matmul.

use crate::autodiff::ops_raw::{colsum, matmul_acc, transpose_slice};
use crate::autodiff::tensor::{Real, Tensor};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

struct StepCache<F> {
    i: Vec<F>,
    f: Vec<F>,
    g: Vec<F>,
    o: Vec<F>,
    c: Vec<F>,
    c_prev: Vec<F>,
    h_tilde: Vec<F>,
}

impl<F: Real> Tape<F> {
    /// Run an LSTM over `x[B,T,D]`, returning the hidden sequence `[B,T,H]`.
    ///
    /// `wx[D,4H]`, `wh[H,4H]`, `bias[4H]`. With `reversed` the scan walks the
    /// time axis backwards while outputs stay aligned to input positions, so
    /// a bidirectional layer is two calls and a concat. `recurrent_mask`
    /// (shape `[B,H]`, inverted-dropout scaling baked in) gates `h_{t-1}`
    /// identically at every step of one sequence.
    pub fn lstm_seq(
        &self,
        x: Var,
        wx: Var,
        wh: Var,
        bias: Var,
        reversed: bool,
        recurrent_mask: Option<&Tensor<F>>,
    ) -> Result<Var> {
        let vx = self.value(x);
        let vwx = self.value(wx);
        let vwh = self.value(wh);
        let vb = self.value(bias);
        if vx.rank() != 3 || vwx.rank() != 2 || vwh.rank() != 2 || vb.rank() != 1 {
            return Err(Error::Structure(format!(
                "lstm_seq: expected ranks (3,2,2,1), got x{:?} wx{:?} wh{:?} b{:?}",
                vx.shape(),
                vwx.shape(),
                vwh.shape(),
                vb.shape()
            )));
        }
        let (b, t, d) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let h = vwh.dim(0);
        if vwx.shape() != [d, 4 * h] || vwh.shape() != [h, 4 * h] || vb.len() != 4 * h {
            return Err(Error::Structure(format!(
                "lstm_seq: wx{:?} wh{:?} b{:?} inconsistent with input {:?}",
                vwx.shape(),
                vwh.shape(),
                vb.shape(),
                vx.shape()
            )));
        }
        if t == 0 {
            return Err(Error::Structure("lstm_seq: empty time axis".into()));
        }
        if let Some(m) = recurrent_mask {
            if m.shape() != [b, h] {
                return Err(Error::Structure(format!(
                    "lstm_seq: recurrent mask {:?} must be [{b}, {h}]",
                    m.shape()
                )));
            }
        }

        let mask = recurrent_mask.map(|m| m.data().to_vec());
        let xd = vx.data();
        let wxd = vwx.data();
        let whd = vwh.data();
        let bd = vb.data();
        let time_at = move |s: usize| if reversed { t - 1 - s } else { s };

        let mut out = vec![F::zero(); b * t * h];
        let mut cache: Vec<StepCache<F>> = Vec::with_capacity(t);
        let mut h_prev = vec![F::zero(); b * h];
        let mut c_prev = vec![F::zero(); b * h];

        for s in 0..t {
            let ti = time_at(s);
            let h_tilde: Vec<F> = match &mask {
                Some(m) => h_prev.iter().zip(m).map(|(&hv, &mv)| hv * mv).collect(),
                None => h_prev.clone(),
            };
            // z = x_t . wx + h_tilde . wh + b
            let mut z = vec![F::zero(); b * 4 * h];
            for bi in 0..b {
                z[bi * 4 * h..(bi + 1) * 4 * h].copy_from_slice(bd);
            }
            let x_t: Vec<F> = (0..b)
                .flat_map(|bi| xd[(bi * t + ti) * d..(bi * t + ti) * d + d].iter().copied())
                .collect();
            matmul_acc(&x_t, wxd, b, d, 4 * h, &mut z);
            matmul_acc(&h_tilde, whd, b, h, 4 * h, &mut z);

            let mut gi = vec![F::zero(); b * h];
            let mut gf = vec![F::zero(); b * h];
            let mut gg = vec![F::zero(); b * h];
            let mut go = vec![F::zero(); b * h];
            let mut cnew = vec![F::zero(); b * h];
            for bi in 0..b {
                for hi in 0..h {
                    let zrow = bi * 4 * h;
                    let sig = |v: F| F::one() / (F::one() + (-v).exp());
                    let iv = sig(z[zrow + hi]);
                    let fv = sig(z[zrow + h + hi]);
                    let gv = z[zrow + 2 * h + hi].tanh();
                    let ov = sig(z[zrow + 3 * h + hi]);
                    let cv = fv * c_prev[bi * h + hi] + iv * gv;
                    let hv = ov * cv.tanh();
                    gi[bi * h + hi] = iv;
                    gf[bi * h + hi] = fv;
                    gg[bi * h + hi] = gv;
                    go[bi * h + hi] = ov;
                    cnew[bi * h + hi] = cv;
                    out[(bi * t + ti) * h + hi] = hv;
                }
            }
            cache.push(StepCache {
                i: gi,
                f: gf,
                g: gg,
                o: go,
                c: cnew.clone(),
                c_prev: c_prev.clone(),
                h_tilde,
            });
            for bi in 0..b {
                for hi in 0..h {
                    h_prev[bi * h + hi] = out[(bi * t + ti) * h + hi];
                }
            }
            c_prev = cnew;
        }

        let value = Tensor::new(vec![b, t, h], out)?;
        let mask_b = mask;
        Ok(self.push_op(
            value,
            vec![x, wx, wh, bias],
            Box::new(move |up| {
                let ud = up.data();
                let mut dx = vec![F::zero(); b * t * d];
                let mut dwx = vec![F::zero(); d * 4 * h];
                let mut dwh = vec![F::zero(); h * 4 * h];
                let mut db = vec![F::zero(); 4 * h];
                let mut dh_next = vec![F::zero(); b * h];
                let mut dc_next = vec![F::zero(); b * h];
                let wxt = transpose_slice(vwx.data(), d, 4 * h);
                let wht = transpose_slice(vwh.data(), h, 4 * h);

                for s in (0..t).rev() {
                    let ti = if reversed { t - 1 - s } else { s };
                    let st = &cache[s];
                    let mut dz = vec![F::zero(); b * 4 * h];
                    for bi in 0..b {
                        for hi in 0..h {
                            let k = bi * h + hi;
                            let dh = ud[(bi * t + ti) * h + hi] + dh_next[k];
                            let tc = st.c[k].tanh();
                            let dov = dh * tc;
                            let dc = dc_next[k] + dh * st.o[k] * (F::one() - tc * tc);
                            let div = dc * st.g[k];
                            let dfv = dc * st.c_prev[k];
                            let dgv = dc * st.i[k];
                            let zrow = bi * 4 * h;
                            dz[zrow + hi] = div * st.i[k] * (F::one() - st.i[k]);
                            dz[zrow + h + hi] = dfv * st.f[k] * (F::one() - st.f[k]);
                            dz[zrow + 2 * h + hi] = dgv * (F::one() - st.g[k] * st.g[k]);
                            dz[zrow + 3 * h + hi] = dov * st.o[k] * (F::one() - st.o[k]);
                            dc_next[k] = dc * st.f[k];
                        }
                    }
                    // Parameter gradients: dwx += x_t^T . dz, dwh += h~^T . dz.
                    let x_t: Vec<F> = (0..b)
                        .flat_map(|bi| {
                            vx.data()[(bi * t + ti) * d..(bi * t + ti) * d + d]
                                .iter()
                                .copied()
                        })
                        .collect();
                    let x_tt = transpose_slice(&x_t, b, d);
                    matmul_acc(&x_tt, &dz, d, b, 4 * h, &mut dwx);
                    let htt = transpose_slice(&st.h_tilde, b, h);
                    matmul_acc(&htt, &dz, h, b, 4 * h, &mut dwh);
                    colsum(&dz, b, 4 * h, &mut db);
                    // Input gradient at this time step: dz . wx^T.
                    let mut dxt = vec![F::zero(); b * d];
                    matmul_acc(&dz, &wxt, b, 4 * h, d, &mut dxt);
                    for bi in 0..b {
                        for di in 0..d {
                            dx[(bi * t + ti) * d + di] = dxt[bi * d + di];
                        }
                    }
                    // Carry to previous step: dh~ = dz . wh^T, then undo mask.
                    let mut dht = vec![F::zero(); b * h];
                    matmul_acc(&dz, &wht, b, 4 * h, h, &mut dht);
                    if let Some(m) = &mask_b {
                        for k in 0..b * h {
                            dht[k] = dht[k] * m[k];
                        }
                    }
                    dh_next = dht;
                }
                vec![
                    Tensor::new(vec![b, t, d], dx).expect("lstm dx"),
                    Tensor::new(vec![d, 4 * h], dwx).expect("lstm dwx"),
                    Tensor::new(vec![h, 4 * h], dwh).expect("lstm dwh"),
                    Tensor::new(vec![4 * h], db).expect("lstm db"),
                ]
            }),
        ))
    }
}
