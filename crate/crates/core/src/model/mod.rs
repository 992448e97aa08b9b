//! The hierarchical probabilistic RUL model.
//!
//! Architecture, front to back: a multi-kernel 1-D convolution block
//! (parallel kernels, shared output width, batch-normalized and max-pooled),
//! a bidirectional LSTM, dual attention (temporal heads over time steps and
//! sensor heads over channels, fused by a learned two-way softmax gate), a
//! small dense encoder for the raw operating settings, and a two-layer dense
//! trunk ending in two linear heads: the RUL mean and the log-variance of a
//! Gaussian predictive distribution (clipped for stability). Targets are
//! scaled by the RUL cap inside the model, so heads operate near unit range.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::tensor::{c, Real, Tensor};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, splitmix64};

/// Which pipeline stages are active; turning one off removes its
/// contribution (and its parameters where applicable).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub dual_attention: bool,
    pub condition_encoder: bool,
    pub uncertainty_head: bool,
    pub rul_weighting: bool,
    pub denoising: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            dual_attention: true,
            condition_encoder: true,
            uncertainty_head: true,
            rul_weighting: true,
            denoising: true,
        }
    }
}

impl AblationFlags {
    /// Disable one stage by name (accepts "dual-attention" or
    /// "no-dual-attention" style spellings, hyphens or underscores).
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        let key = name.trim().to_ascii_lowercase().replace('_', "-");
        let key = key.strip_prefix("no-").unwrap_or(&key);
        match key {
            "dual-attention" => self.dual_attention = false,
            "condition-encoder" => self.condition_encoder = false,
            "uncertainty" | "uncertainty-head" => self.uncertainty_head = false,
            "rul-weighting" => self.rul_weighting = false,
            "denoising" => self.denoising = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected dual-attention, \
                     condition-encoder, uncertainty-head, rul-weighting or denoising)"
                )))
            }
        }
        Ok(())
    }
}

/// Model hyperparameters. [`ModelConfig::default`] matches the reference
/// setup except for `feature_count`, which always comes from preprocessing.
/// Deserialization fills omitted fields from the defaults, so partial
/// config files work.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub window_len: usize,
    pub feature_count: usize,
    pub inception_kernels: Vec<usize>,
    pub inception_filters: usize,
    pub lstm_units: usize,
    pub recurrent_dropout: f64,
    pub attn_heads: usize,
    /// Per-head attention width; `None` uses the post-LSTM width.
    pub attn_key_dim: Option<usize>,
    pub cond_units: (usize, usize),
    pub cond_dropout: f64,
    pub dense_units: (usize, usize),
    pub dense_dropout: f64,
    pub logvar_clip: (f64, f64),
    /// RUL cap; targets are divided by this inside the model.
    pub target_scale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_len: 30,
            feature_count: 12,
            inception_kernels: vec![3, 5, 7],
            inception_filters: 32,
            lstm_units: 64,
            recurrent_dropout: 0.2,
            attn_heads: 4,
            attn_key_dim: None,
            cond_units: (64, 32),
            cond_dropout: 0.2,
            dense_units: (64, 32),
            dense_dropout: 0.48,
            logvar_clip: (-5.0, 3.0),
            target_scale: crate::cmapss::RUL_CAP,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    /// Post-LSTM channel width.
    pub fn lstm_out_width(&self) -> usize {
        2 * self.lstm_units
    }

    /// Time-axis length after the pooling stage.
    pub fn pooled_len(&self) -> usize {
        self.window_len / 2
    }

    /// Effective per-head attention width.
    pub fn key_dim(&self) -> usize {
        self.attn_key_dim.unwrap_or(self.lstm_out_width())
    }

    /// Validate dimensional and range invariants.
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::Config(format!(
                "window_len {} too short to pool",
                self.window_len
            )));
        }
        if self.feature_count == 0 {
            return Err(Error::Config("feature_count must be positive".into()));
        }
        if self.inception_kernels.is_empty() {
            return Err(Error::Config("at least one convolution kernel required".into()));
        }
        for &k in &self.inception_kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!(
                    "convolution kernel width {k} must be odd"
                )));
            }
        }
        if self.inception_filters == 0 || self.lstm_units == 0 {
            return Err(Error::Config("filter and LSTM widths must be positive".into()));
        }
        if self.attn_heads == 0 || self.lstm_out_width() % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide the post-LSTM width {}",
                self.attn_heads,
                self.lstm_out_width()
            )));
        }
        if self.key_dim() == 0 {
            return Err(Error::Config("attention key width must be positive".into()));
        }
        if self.cond_units.0 == 0
            || self.cond_units.1 == 0
            || self.dense_units.0 == 0
            || self.dense_units.1 == 0
        {
            return Err(Error::Config("dense widths must be positive".into()));
        }
        for (name, rate) in [
            ("recurrent_dropout", self.recurrent_dropout),
            ("cond_dropout", self.cond_dropout),
            ("dense_dropout", self.dense_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} outside [0, 1)")));
            }
        }
        if self.logvar_clip.0 >= self.logvar_clip.1 {
            return Err(Error::Config(format!(
                "log-variance clip interval [{}, {}] is empty",
                self.logvar_clip.0, self.logvar_clip.1
            )));
        }
        if self.target_scale <= 0.0 {
            return Err(Error::Config("target_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("bad batch-norm momentum or epsilon".into()));
        }
        Ok(())
    }
}

/// One named tensor with its training/regularization roles.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub trainable: bool,
    pub regularized: bool,
}

/// Named parameter collection; BTreeMap keeps every walk deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Param<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>, trainable: bool, regularized: bool) {
        self.params
            .insert(name.to_string(), Param { value, trainable, regularized });
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Structure(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<Tensor<F>> {
        Ok(self.get(name)?.value.clone())
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Structure(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Structure(format!(
                "parameter '{name}': cannot replace shape {:?} with {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Convert every tensor through f64 into another float type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let params = self
            .params
            .iter()
            .map(|(n, p)| {
                (
                    n.clone(),
                    Param {
                        value: p.value.cast::<G>(),
                        trainable: p.trainable,
                        regularized: p.regularized,
                    },
                )
            })
            .collect();
        ParamStore { params }
    }
}

/// Register every trainable parameter as a gradient-tracking tape leaf.
pub fn param_leaves<F: Real>(tape: &Tape<F>, store: &ParamStore<F>) -> BTreeMap<String, Var> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.clone(), tape.leaf(p.value.clone(), true)))
        .collect()
}

fn glorot<F: Real>(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64, name: &str) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng::stream(seed, &format!("init/{name}"));
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| c::<F>(r.random_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

/// Initialize a parameter store for a config: Glorot-uniform kernels, zero
/// biases (except the log-variance bias at 1.0 with a zero kernel), unit
/// batch-norm scales. Every tensor draws from its own named stream, so two
/// inits with the same seed are identical regardless of evaluation order.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let bn = |store: &mut ParamStore<F>, prefix: &str, width: usize| {
        store.insert(&format!("{prefix}.gamma"), Tensor::full(&[width], F::one()), true, false);
        store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[width]), true, false);
        store.insert(
            &format!("{prefix}.running_mean"),
            Tensor::zeros(&[width]),
            false,
            false,
        );
        store.insert(
            &format!("{prefix}.running_var"),
            Tensor::full(&[width], F::one()),
            false,
            false,
        );
    };

    let f = cfg.feature_count;
    let m = cfg.inception_filters;
    for &k in &cfg.inception_kernels {
        let name = format!("conv.k{k}.kernel");
        store.insert(&name, glorot(&[k, f, m], k * f, k * m, seed, &name), true, true);
        store.insert(&format!("conv.k{k}.bias"), Tensor::zeros(&[m]), true, false);
    }
    let c0 = cfg.inception_kernels.len() * m;
    bn(&mut store, "conv.bn", c0);

    let h = cfg.lstm_units;
    for dir in ["fwd", "bwd"] {
        let wx = format!("lstm.{dir}.wx");
        store.insert(&wx, glorot(&[c0, 4 * h], c0, 4 * h, seed, &wx), true, true);
        let wh = format!("lstm.{dir}.wh");
        store.insert(&wh, glorot(&[h, 4 * h], h, 4 * h, seed, &wh), true, true);
        store.insert(&format!("lstm.{dir}.bias"), Tensor::zeros(&[4 * h]), true, false);
    }

    let cw = cfg.lstm_out_width();
    let dk = cfg.key_dim();
    let hd = cfg.attn_heads * dk;
    let mha = |store: &mut ParamStore<F>, prefix: &str, d_model: usize| {
        for proj in ["wq", "wk", "wv"] {
            let name = format!("{prefix}.{proj}");
            store.insert(&name, glorot(&[d_model, hd], d_model, hd, seed, &name), true, true);
            store.insert(&format!("{prefix}.b{}", &proj[1..]), Tensor::zeros(&[hd]), true, false);
        }
        let wo = format!("{prefix}.wo");
        store.insert(&wo, glorot(&[hd, d_model], hd, d_model, seed, &wo), true, true);
        store.insert(&format!("{prefix}.bo"), Tensor::zeros(&[d_model]), true, false);
    };
    mha(&mut store, "attn.time", cw);
    if cfg.ablation.dual_attention {
        mha(&mut store, "attn.sensor", cfg.pooled_len());
        store.insert("attn.fusion.w", Tensor::zeros(&[2]), true, false);
    }

    if cfg.ablation.condition_encoder {
        let (c1, c2) = cfg.cond_units;
        store.insert("cond.d1.kernel", glorot(&[3, c1], 3, c1, seed, "cond.d1.kernel"), true, true);
        store.insert("cond.d1.bias", Tensor::zeros(&[c1]), true, false);
        bn(&mut store, "cond.bn1", c1);
        store.insert(
            "cond.d2.kernel",
            glorot(&[c1, c2], c1, c2, seed, "cond.d2.kernel"),
            true,
            true,
        );
        store.insert("cond.d2.bias", Tensor::zeros(&[c2]), true, false);
        bn(&mut store, "cond.bn2", c2);
    }

    let trunk_in = if cfg.ablation.condition_encoder { cw + cfg.cond_units.1 } else { cw };
    let (d1, d2) = cfg.dense_units;
    store.insert(
        "head.d1.kernel",
        glorot(&[trunk_in, d1], trunk_in, d1, seed, "head.d1.kernel"),
        true,
        true,
    );
    store.insert("head.d1.bias", Tensor::zeros(&[d1]), true, false);
    bn(&mut store, "head.bn1", d1);
    store.insert("head.d2.kernel", glorot(&[d1, d2], d1, d2, seed, "head.d2.kernel"), true, true);
    store.insert("head.d2.bias", Tensor::zeros(&[d2]), true, false);
    bn(&mut store, "head.bn2", d2);

    store.insert(
        "head.mean.kernel",
        glorot(&[d2, 1], d2, 1, seed, "head.mean.kernel"),
        true,
        true,
    );
    store.insert("head.mean.bias", Tensor::zeros(&[1]), true, false);
    if cfg.ablation.uncertainty_head {
        store.insert("head.logvar.kernel", Tensor::zeros(&[d2, 1]), true, true);
        store.insert("head.logvar.bias", Tensor::full(&[1], F::one()), true, false);
    }
    Ok(store)
}

/// Trainable parameter count for a config.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(init_params::<f32>(cfg, 0)?.trainable_count())
}

/// Forward-pass mode: training enables dropout (masks derived from the
/// given seed plus a per-layer counter) and batch statistics.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Infer,
}

/// Everything the forward pass hands back to the trainer.
pub struct ForwardOutput<F: Real> {
    /// Scaled RUL means, shape `[B]`.
    pub mean: Var,
    /// Clipped log-variances in scaled space, shape `[B]`; absent when the
    /// uncertainty head is ablated.
    pub log_var: Option<Var>,
    /// Batch statistics per batch-norm prefix, for running-stat updates.
    pub bn_stats: Vec<(String, Tensor<F>, Tensor<F>)>,
}

struct LayerCtx<'a, F: Real> {
    tape: &'a Tape<F>,
    cfg: &'a ModelConfig,
    store: &'a ParamStore<F>,
    leaves: &'a BTreeMap<String, Var>,
    mode: Mode,
    dropout_counter: u64,
    bn_stats: Vec<(String, Tensor<F>, Tensor<F>)>,
}

impl<'a, F: Real> LayerCtx<'a, F> {
    fn leaf(&self, name: &str) -> Result<Var> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::Structure(format!("forward: missing parameter '{name}'")))
    }

    fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.leaf(&format!("{prefix}.gamma"))?;
        let beta = self.leaf(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train { .. } => {
                let (y, mean, var) =
                    self.tape.batchnorm_train(x, gamma, beta, self.cfg.bn_eps)?;
                self.bn_stats.push((prefix.to_string(), mean, var));
                Ok(y)
            }
            Mode::Infer => {
                let rm = self.store.value(&format!("{prefix}.running_mean"))?;
                let rv = self.store.value(&format!("{prefix}.running_var"))?;
                self.tape.batchnorm_infer(x, gamma, beta, &rm, &rv, self.cfg.bn_eps)
            }
        }
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.dropout_counter += 1;
        match self.mode {
            Mode::Train { dropout_seed } if rate > 0.0 => {
                let seed = splitmix64(dropout_seed ^ self.dropout_counter);
                self.tape.dropout(x, rate, seed)
            }
            _ => Ok(x),
        }
    }

    /// `[B, T, C_in] . W[C_in, N] + b` applied per time step.
    fn dense3(&self, x: Var, kernel: &str, bias: &str) -> Result<Var> {
        let shape = self.tape.shape_of(x);
        let (b, t, cin) = (shape[0], shape[1], shape[2]);
        let w = self.leaf(kernel)?;
        let n = self.tape.shape_of(w)[1];
        let flat = self.tape.reshape(x, vec![b * t, cin])?;
        let y = self.tape.matmul(flat, w)?;
        let y = self.tape.add_bias(y, self.leaf(bias)?)?;
        self.tape.reshape(y, vec![b, t, n])
    }

    /// Multi-head attention over `x[B, T, d_model]` with explicit
    /// projections; `prefix` names the parameter group.
    fn mha(&self, x: Var, prefix: &str) -> Result<Var> {
        let heads = self.cfg.attn_heads;
        let dk = self.cfg.key_dim();
        let q = self.dense3(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.dense3(x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.dense3(x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let qh = self.tape.split_heads(q, heads)?;
        let kh = self.tape.split_heads(k, heads)?;
        let vh = self.tape.split_heads(v, heads)?;
        let kt = self.tape.transpose12(kh)?;
        let scores = self.tape.bmm(qh, kt)?;
        let scaled = self.tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let weights = self.tape.softmax_last(scaled)?;
        let ctx = self.tape.bmm(weights, vh)?;
        let merged = self.tape.merge_heads(ctx, heads)?;
        self.dense3(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if !self.tape.value(v).all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activation leaving {layer}"
            )));
        }
        Ok(())
    }
}

/// Run the model. `windows` is `[B, L, F]`, `settings` is `[B, 3]` (raw
/// operating settings of each window's final cycle).
pub fn forward<F: Real>(
    tape: &Tape<F>,
    cfg: &ModelConfig,
    store: &ParamStore<F>,
    leaves: &BTreeMap<String, Var>,
    windows: Var,
    settings: Var,
    mode: Mode,
) -> Result<ForwardOutput<F>> {
    cfg.validate()?;
    let wshape = tape.shape_of(windows);
    if wshape.len() != 3 || wshape[1] != cfg.window_len || wshape[2] != cfg.feature_count {
        return Err(Error::Structure(format!(
            "forward: windows shape {:?} does not match [B, {}, {}]",
            wshape, cfg.window_len, cfg.feature_count
        )));
    }
    let b = wshape[0];
    let sshape = tape.shape_of(settings);
    if sshape != [b, 3] {
        return Err(Error::Structure(format!(
            "forward: settings shape {sshape:?} does not match [{b}, 3]"
        )));
    }

    let mut ctx = LayerCtx {
        tape,
        cfg,
        store,
        leaves,
        mode,
        dropout_counter: 0,
        bn_stats: Vec::new(),
    };

    // Convolution block: parallel odd-width kernels, shared filter count.
    let mut branches = Vec::with_capacity(cfg.inception_kernels.len());
    for &k in &cfg.inception_kernels {
        let kernel = ctx.leaf(&format!("conv.k{k}.kernel"))?;
        let bias = ctx.leaf(&format!("conv.k{k}.bias"))?;
        let y = tape.conv1d(windows, kernel, bias)?;
        branches.push(tape.relu(y)?);
    }
    let merged = tape.concat_last(&branches)?;
    let normed = ctx.batchnorm(merged, "conv.bn")?;
    let pooled_time = tape.maxpool1d_2(normed)?;
    ctx.check_finite(pooled_time, "the convolution block")?;

    // Bidirectional LSTM with per-sequence recurrent dropout masks.
    let h = cfg.lstm_units;
    let rec_mask = |ctx: &mut LayerCtx<F>| -> Option<Tensor<F>> {
        match ctx.mode {
            Mode::Train { dropout_seed } if cfg.recurrent_dropout > 0.0 => {
                ctx.dropout_counter += 1;
                let seed = splitmix64(dropout_seed ^ ctx.dropout_counter);
                let mut r = rng::stream(seed, "recurrent-mask");
                let keep = 1.0 - cfg.recurrent_dropout;
                let data: Vec<F> = (0..b * h)
                    .map(|_| {
                        if r.random::<f64>() < keep {
                            c::<F>(1.0 / keep)
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                Some(Tensor::new(vec![b, h], data).expect("mask shape"))
            }
            _ => None,
        }
    };
    let mask_f = rec_mask(&mut ctx);
    let fwd = tape.lstm_seq(
        pooled_time,
        ctx.leaf("lstm.fwd.wx")?,
        ctx.leaf("lstm.fwd.wh")?,
        ctx.leaf("lstm.fwd.bias")?,
        false,
        mask_f.as_ref(),
    )?;
    let mask_b = rec_mask(&mut ctx);
    let bwd = tape.lstm_seq(
        pooled_time,
        ctx.leaf("lstm.bwd.wx")?,
        ctx.leaf("lstm.bwd.wh")?,
        ctx.leaf("lstm.bwd.bias")?,
        true,
        mask_b.as_ref(),
    )?;
    let seq = tape.concat_last(&[fwd, bwd])?;
    ctx.check_finite(seq, "the bidirectional LSTM")?;

    // Dual attention: temporal heads attend over time steps; sensor heads
    // attend over channels (time becomes the embedding); a learned softmax
    // gate fuses the two views.
    let temporal = ctx.mha(seq, "attn.time")?;
    let fused = if cfg.ablation.dual_attention {
        let channels_first = tape.transpose12(seq)?;
        let sensor = ctx.mha(channels_first, "attn.sensor")?;
        let sensor = tape.transpose12(sensor)?;
        let gate = tape.softmax_last(ctx.leaf("attn.fusion.w")?)?;
        let a_s = tape.index_scalar(gate, 0)?;
        let a_t = tape.index_scalar(gate, 1)?;
        let s_part = tape.mul_by_scalar_var(sensor, a_s)?;
        let t_part = tape.mul_by_scalar_var(temporal, a_t)?;
        tape.add(s_part, t_part)?
    } else {
        temporal
    };
    ctx.check_finite(fused, "the attention block")?;
    let pooled = tape.mean_axis1(fused)?;

    // Operating-condition encoder on the raw settings vector.
    let trunk_in = if cfg.ablation.condition_encoder {
        let d1 = tape.matmul(settings, ctx.leaf("cond.d1.kernel")?)?;
        let d1 = tape.add_bias(d1, ctx.leaf("cond.d1.bias")?)?;
        let d1 = tape.relu(d1)?;
        let d1 = ctx.batchnorm(d1, "cond.bn1")?;
        let d1 = ctx.dropout(d1, cfg.cond_dropout)?;
        let d2 = tape.matmul(d1, ctx.leaf("cond.d2.kernel")?)?;
        let d2 = tape.add_bias(d2, ctx.leaf("cond.d2.bias")?)?;
        let d2 = tape.relu(d2)?;
        let d2 = ctx.batchnorm(d2, "cond.bn2")?;
        let d2 = ctx.dropout(d2, cfg.cond_dropout)?;
        tape.concat_last(&[pooled, d2])?
    } else {
        pooled
    };

    // Dense trunk.
    let t1 = tape.matmul(trunk_in, ctx.leaf("head.d1.kernel")?)?;
    let t1 = tape.add_bias(t1, ctx.leaf("head.d1.bias")?)?;
    let t1 = tape.relu(t1)?;
    let t1 = ctx.batchnorm(t1, "head.bn1")?;
    let t1 = ctx.dropout(t1, cfg.dense_dropout)?;
    let t2 = tape.matmul(t1, ctx.leaf("head.d2.kernel")?)?;
    let t2 = tape.add_bias(t2, ctx.leaf("head.d2.bias")?)?;
    let t2 = tape.relu(t2)?;
    let t2 = ctx.batchnorm(t2, "head.bn2")?;
    let t2 = ctx.dropout(t2, cfg.dense_dropout)?;

    // Heads: linear mean, clipped linear log-variance.
    let mean = tape.matmul(t2, ctx.leaf("head.mean.kernel")?)?;
    let mean = tape.add_bias(mean, ctx.leaf("head.mean.bias")?)?;
    let mean = tape.reshape(mean, vec![b])?;
    ctx.check_finite(mean, "the mean head")?;
    let log_var = if cfg.ablation.uncertainty_head {
        let lv = tape.matmul(t2, ctx.leaf("head.logvar.kernel")?)?;
        let lv = tape.add_bias(lv, ctx.leaf("head.logvar.bias")?)?;
        let lv = tape.clip(lv, cfg.logvar_clip.0, cfg.logvar_clip.1)?;
        let lv = tape.reshape(lv, vec![b])?;
        ctx.check_finite(lv, "the log-variance head")?;
        Some(lv)
    } else {
        None
    };

    Ok(ForwardOutput { mean, log_var, bn_stats: ctx.bn_stats })
}

/// Fold a training batch's statistics into the store's running values:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<F: Real>(
    store: &mut ParamStore<F>,
    stats: &[(String, Tensor<F>, Tensor<F>)],
    momentum: f64,
) -> Result<()> {
    let m = c::<F>(momentum);
    let im = c::<F>(1.0 - momentum);
    for (prefix, mean, var) in stats {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let name = format!("{prefix}.{suffix}");
            let old = store.value(&name)?;
            let new = old.zip(batch, |o, b| m * o + im * b)?;
            store.set_value(&name, new)?;
        }
    }
    Ok(())
}

/// A Gaussian RUL prediction in cycle units.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GaussianPrediction {
    /// Predicted mean RUL, cycles.
    pub mean: f64,
    /// Log-variance in scaled space (post-clip); absent when ablated.
    pub log_variance: Option<f64>,
    /// Predictive standard deviation, cycles; absent when ablated.
    pub sigma: Option<f64>,
}

/// Batched inference over dense buffers: `windows[B, L, F]`,
/// `settings[B, 3]` (f32). Returns one prediction per row, in cycles.
pub fn predict(
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    windows: &[f32],
    settings: &[f32],
    batch_size: usize,
) -> Result<Vec<GaussianPrediction>> {
    let per = cfg.window_len * cfg.feature_count;
    if per == 0 || windows.len() % per != 0 {
        return Err(Error::Structure(format!(
            "predict: {} window values not divisible by {per}",
            windows.len()
        )));
    }
    let n = windows.len() / per;
    if settings.len() != n * 3 {
        return Err(Error::Structure(format!(
            "predict: expected {} settings values, got {}",
            n * 3,
            settings.len()
        )));
    }
    let bs = batch_size.max(1);
    let mut out = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let end = (start + bs).min(n);
        let bsz = end - start;
        let tape: Tape<f32> = Tape::new();
        let leaves = param_leaves(&tape, store);
        let w = tape.constant(Tensor::new(
            vec![bsz, cfg.window_len, cfg.feature_count],
            windows[start * per..end * per].to_vec(),
        )?);
        let s = tape.constant(Tensor::new(
            vec![bsz, 3],
            settings[start * 3..end * 3].to_vec(),
        )?);
        let fw = forward(&tape, cfg, store, &leaves, w, s, Mode::Infer)?;
        let means = tape.value(fw.mean);
        let lvs = fw.log_var.map(|v| tape.value(v));
        for i in 0..bsz {
            let mean = means.data()[i] as f64 * cfg.target_scale;
            let (log_variance, sigma) = match &lvs {
                Some(t) => {
                    let lv = t.data()[i] as f64;
                    (Some(lv), Some((lv / 2.0).exp() * cfg.target_scale))
                }
                None => (None, None),
            };
            out.push(GaussianPrediction { mean, log_variance, sigma });
        }
        start = end;
    }
    Ok(out)
}
