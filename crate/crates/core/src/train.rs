//! Training: RUL-weighted heteroscedastic loss, AdamW with global-norm
//! gradient clipping, plateau learning-rate scheduling and early stopping
//! with best-weight restore.
//!
//! The loss treats each prediction as a Gaussian over the scaled RUL and
//! penalizes its negative log-likelihood, weighted so late-life samples
//! (low true RUL) count more. Two regularizers ride along: a pull on the
//! log-variance toward zero and an L2 term over kernel weights (biases
//! and normalization parameters excluded).

use std::collections::BTreeMap;
use std::time::Instant;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::cmapss::{train_rul_series, DatasetBundle};
use crate::dataset::{
    augment, batch_indices, gather_batch, make_windows, split_units, WindowDataset,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::TrainMeta;
use crate::model::{
    forward, init_params, param_leaves, predict, update_running_stats, GaussianPrediction, Mode,
    ModelConfig, ParamStore,
};
use crate::prep::{PrepConfig, PreprocessModel};
use crate::rng;

/// Half of ln(2π), the constant term of the Gaussian log-likelihood.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Sample weight by true RUL in cycles: the critical tier (under 30)
/// counts 2.5×, the near-critical tier (30 to just under 80) 1.5×.
pub fn rul_sample_weight(y: f64) -> f64 {
    if y < 30.0 {
        2.5
    } else if y < 80.0 {
        1.5
    } else {
        1.0
    }
}

/// Reference scalar form of the weighted Gaussian negative log-likelihood.
/// With `log_var = 0` this is exactly `w·(½(y−μ)² + ½ln 2π)`.
pub fn gaussian_nll(y: f64, mu: f64, log_var: f64, w: f64) -> f64 {
    w * (0.5 * (y - mu) * (y - mu) * (-log_var).exp() + 0.5 * log_var + HALF_LN_2PI)
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Coefficient on mean(log_var²).
    pub logvar_penalty: f64,
    /// Coefficient on the summed squared kernel weights.
    pub l2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { logvar_penalty: 0.005, l2: 1e-4 }
    }
}

/// Build the training objective on the tape: mean weighted Gaussian NLL
/// over the batch (mean squared error when the uncertainty head is off),
/// plus the log-variance penalty and the kernel L2 term. Labels arrive in
/// cycles; weights are computed on cycles, targets are scaled by the
/// model's target scale.
pub fn build_loss<F: Real>(
    tape: &Tape<F>,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    store: &ParamStore<F>,
    leaves: &BTreeMap<String, Var>,
    mean: Var,
    log_var: Option<Var>,
    labels_cycles: &[f64],
) -> Result<Var> {
    let b = labels_cycles.len();
    if tape.shape_of(mean) != [b] {
        return Err(Error::Structure(format!(
            "loss: mean shape {:?} does not match {b} labels",
            tape.shape_of(mean)
        )));
    }
    let scaled: Vec<f64> = labels_cycles.iter().map(|y| y / cfg.target_scale).collect();
    let weights: Vec<f64> = if cfg.ablation.rul_weighting {
        labels_cycles.iter().map(|&y| rul_sample_weight(y)).collect()
    } else {
        vec![1.0; b]
    };
    let y = tape.constant(Tensor::from_f64(vec![b], &scaled)?);
    let w = tape.constant(Tensor::from_f64(vec![b], &weights)?);

    let diff = tape.sub(mean, y)?;
    let sq = tape.square(diff)?;
    let mut loss = match log_var {
        Some(lv) => {
            let inv_var = tape.exp(tape.neg(lv)?)?;
            let quad = tape.scale(tape.mul(sq, inv_var)?, 0.5)?;
            let half_lv = tape.scale(lv, 0.5)?;
            let per_sample = tape.add_scalar(tape.add(quad, half_lv)?, HALF_LN_2PI)?;
            let nll = tape.mean_all(tape.mul(per_sample, w)?)?;
            let penalty = tape.scale(tape.mean_all(tape.square(lv)?)?, loss_cfg.logvar_penalty)?;
            tape.add(nll, penalty)?
        }
        None => tape.mean_all(tape.mul(sq, w)?)?,
    };

    if loss_cfg.l2 != 0.0 {
        let mut acc: Option<Var> = None;
        for (name, param) in store.iter() {
            if !(param.trainable && param.regularized) {
                continue;
            }
            let leaf = leaves.get(name).copied().ok_or_else(|| {
                Error::Structure(format!("loss: missing leaf for regularized '{name}'"))
            })?;
            let sq_sum = tape.sum_all(tape.square(leaf)?)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, sq_sum)?,
                None => sq_sum,
            });
        }
        if let Some(a) = acc {
            loss = tape.add(loss, tape.scale(a, loss_cfg.l2)?)?;
        }
    }
    Ok(loss)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. Non-finite gradients are an error.
pub fn clip_gradient_norm(
    grads: &mut BTreeMap<String, Tensor<f32>>,
    max_norm: f64,
) -> Result<f64> {
    let mut sq = 0.0f64;
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for '{name}'")));
        }
        sq += g.sq_norm_f64();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            *g = g.map(|v| v * k);
        }
    }
    Ok(norm)
}

/// AdamW: adaptive moments with bias correction and decoupled weight decay.
/// Parameters without a gradient entry are treated as having zero gradient.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One optimizer step over every trainable parameter.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let value = store.value(&name)?;
            let shape = value.shape().to_vec();
            let zero = || Tensor::<f32>::zeros(&shape);
            let grad = match grads.get(&name) {
                Some(g) => {
                    if g.shape() != shape.as_slice() {
                        return Err(Error::Structure(format!(
                            "optimizer: gradient shape {:?} for '{name}' expected {:?}",
                            g.shape(),
                            shape
                        )));
                    }
                    g.clone()
                }
                None => zero(),
            };
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (zero(), zero()));
            let mut new_data = Vec::with_capacity(value.len());
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                let gd = grad.data();
                let xd = value.data();
                for i in 0..xd.len() {
                    let g = gd[i] as f64;
                    let mi = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * g;
                    let vi = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * g * g;
                    md[i] = mi as f32;
                    vd[i] = vi as f32;
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    let x = xd[i] as f64;
                    let upd = x - self.lr * m_hat / (v_hat.sqrt() + self.eps)
                        - self.lr * self.weight_decay * x;
                    new_data.push(upd as f32);
                }
            }
            store.set_value(&name, Tensor::new(shape, new_data)?)?;
        }
        Ok(())
    }
}

/// Plateau learning-rate scheduler: halve the rate (down to a floor) after
/// `patience` consecutive epochs without sufficient improvement.
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, threshold: f64) -> Self {
        PlateauScheduler { lr, factor, patience, min_lr, threshold, best: f64::INFINITY, stale: 0 }
    }

    /// Record one epoch's validation metric; returns true when the rate
    /// was reduced.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best - self.threshold {
            self.best = metric;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Early stopping with a best-weight snapshot. Staleness counts epochs
/// without improvement beyond `threshold`; the snapshot tracks the strict
/// minimum, so restored weights always correspond to the best epoch seen.
pub struct EarlyStop {
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    best_epoch: usize,
    stale: usize,
    snapshot: Option<ParamStore<f32>>,
}

impl EarlyStop {
    pub fn new(patience: usize, threshold: f64) -> Self {
        EarlyStop {
            patience,
            threshold,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            snapshot: None,
        }
    }

    /// Record one epoch; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, metric: f64, params: &ParamStore<f32>) -> bool {
        if metric < self.best - self.threshold {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.snapshot = Some(params.clone());
        }
        self.stale >= self.patience
    }

    pub fn best_metric(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Consume the tracker, returning the best snapshot if one was taken.
    pub fn into_snapshot(self) -> Option<ParamStore<f32>> {
        self.snapshot
    }
}

/// Training hyperparameters. Defaults match the reference setup; the file
/// and CLI layers may override any subset.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    /// Improvement threshold (cycles) for scheduler and early-stop
    /// comparisons, guarding against float-noise resets.
    pub improve_threshold: f64,
    pub early_patience: usize,
    /// Fraction of engines held out for validation.
    pub val_fraction: f64,
    pub augment_factor: usize,
    /// Inference batch size for validation passes.
    pub val_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 64,
            lr: 1.5e-4,
            weight_decay: 0.0,
            clip_norm: 1.0,
            loss: LossConfig::default(),
            plateau_patience: 10,
            plateau_factor: 0.5,
            min_lr: 1e-6,
            improve_threshold: 1e-4,
            early_patience: 20,
            val_fraction: 0.2,
            augment_factor: 3,
            val_batch: 256,
        }
    }
}

/// One epoch's record; emitted as a JSON line in history files.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation RMSE of the predicted means, in cycles.
    pub val_rmse: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

/// Windowed data ready for the loop: fitted preprocessing, augmented
/// training windows and untouched validation windows.
pub struct PreparedData {
    pub preprocess: PreprocessModel,
    pub train: WindowDataset,
    pub val: WindowDataset,
}

/// Fit preprocessing on the training engines and build the engine-level
/// split: windows from `val_fraction` of engines go to validation,
/// the rest are augmented `augment_factor`× for training.
pub fn prepare_training_data(
    bundle: &DatasetBundle,
    prep_cfg: PrepConfig,
    window_len: usize,
    val_fraction: f64,
    augment_factor: usize,
    seed: u64,
) -> Result<PreparedData> {
    let preprocess = PreprocessModel::fit(&bundle.train, prep_cfg, seed)?;
    let cap = preprocess.config.rul_cap;
    let d = preprocess.feature_count();

    let mut per_unit: BTreeMap<u32, Vec<crate::dataset::WindowSample>> = BTreeMap::new();
    let mut units = Vec::with_capacity(bundle.train.len());
    for traj in &bundle.train {
        let prepped = preprocess.apply(traj)?;
        let labels = train_rul_series(traj.cycles, cap);
        per_unit.insert(traj.unit, make_windows(&prepped, &labels, window_len)?);
        units.push(traj.unit);
    }
    let (train_units, val_units) = split_units(&units, 1.0 - val_fraction, seed)?;

    let mut train = WindowDataset::new(window_len, d);
    for u in &train_units {
        train.samples.extend(per_unit[u].iter().cloned());
    }
    let mut val = WindowDataset::new(window_len, d);
    for u in &val_units {
        val.samples.extend(per_unit[u].iter().cloned());
    }
    let train = augment(&train, augment_factor, seed);
    Ok(PreparedData { preprocess, train, val })
}

/// Run inference over every sample of a window dataset, in order.
pub fn dataset_predictions(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    ds: &WindowDataset,
    batch: usize,
) -> Result<Vec<GaussianPrediction>> {
    let mut windows = Vec::with_capacity(ds.len() * ds.window_len * ds.feature_count);
    let mut settings = Vec::with_capacity(ds.len() * 3);
    for s in &ds.samples {
        windows.extend_from_slice(&s.window);
        settings.extend_from_slice(&s.settings);
    }
    predict(cfg, params, &windows, &settings, batch)
}

/// RMSE of predicted means against sample labels, in cycles. Errors on an
/// empty dataset or a non-finite result.
pub fn validation_rmse(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    ds: &WindowDataset,
    batch: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Structure("validation: no samples".into()));
    }
    let preds = dataset_predictions(cfg, params, ds, batch)?;
    let mut sq = 0.0f64;
    for (p, s) in preds.iter().zip(&ds.samples) {
        let e = p.mean - s.label as f64;
        sq += e * e;
    }
    let rmse = (sq / ds.len() as f64).sqrt();
    if !rmse.is_finite() {
        return Err(Error::Numeric("validation produced a non-finite RMSE".into()));
    }
    Ok(rmse)
}

/// A finished training run: final (best-epoch) weights plus everything
/// needed to checkpoint and evaluate them.
pub struct TrainResult {
    pub params: ParamStore<f32>,
    pub preprocess: PreprocessModel,
    pub config: ModelConfig,
    pub meta: TrainMeta,
    pub history: Vec<EpochStats>,
}

/// Train a model on a dataset bundle. `on_epoch` fires after every epoch
/// (for logging/streaming); the returned parameters are the best-epoch
/// snapshot, not the last-epoch state.
pub fn train(
    bundle: &DatasetBundle,
    prep_cfg: PrepConfig,
    mut model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainResult> {
    if train_cfg.epochs == 0 || train_cfg.batch_size == 0 {
        return Err(Error::Config("training needs positive epochs and batch size".into()));
    }
    let data = prepare_training_data(
        bundle,
        prep_cfg,
        model_cfg.window_len,
        train_cfg.val_fraction,
        train_cfg.augment_factor,
        seed,
    )?;
    model_cfg.feature_count = data.preprocess.feature_count();
    model_cfg.validate()?;
    if !model_cfg.ablation.denoising && data.preprocess.config.denoise {
        return Err(Error::Config(
            "denoising ablation requires a preprocess config with denoise off".into(),
        ));
    }

    let mut params: ParamStore<f32> = init_params(&model_cfg, seed)?;
    let mut opt = AdamW::new(train_cfg.lr, train_cfg.weight_decay);
    let mut plateau = PlateauScheduler::new(
        train_cfg.lr,
        train_cfg.plateau_factor,
        train_cfg.plateau_patience,
        train_cfg.min_lr,
        train_cfg.improve_threshold,
    );
    let mut early = EarlyStop::new(train_cfg.early_patience, train_cfg.improve_threshold);
    let mut history: Vec<EpochStats> = Vec::new();
    let n = data.train.len();
    let (l, d) = (model_cfg.window_len, model_cfg.feature_count);

    for epoch in 1..=train_cfg.epochs {
        let start = Instant::now();
        let lr_in_effect = plateau.lr;
        opt.lr = lr_in_effect;
        let batches = batch_indices(n, train_cfg.batch_size, seed, epoch as u64);
        let steps_per_epoch = batches.len();
        let mut loss_sum = 0.0f64;
        for (bi, idx) in batches.iter().enumerate() {
            let batch = gather_batch(&data.train, idx);
            let tape: Tape<f32> = Tape::new();
            let leaves = param_leaves(&tape, &params);
            let w = tape.constant(Tensor::new(vec![batch.size, l, d], batch.windows)?);
            let s = tape.constant(Tensor::new(vec![batch.size, 3], batch.settings)?);
            let global_step = ((epoch - 1) * steps_per_epoch + bi) as u64;
            let dropout_seed = rng::derive_seed_indexed(seed, "dropout", global_step);
            let out = forward(
                &tape,
                &model_cfg,
                &params,
                &leaves,
                w,
                s,
                Mode::Train { dropout_seed },
            )?;
            let labels: Vec<f64> = batch.labels.iter().map(|&v| v as f64).collect();
            let loss = build_loss(
                &tape,
                &model_cfg,
                &train_cfg.loss,
                &params,
                &leaves,
                out.mean,
                out.log_var,
                &labels,
            )?;
            let loss_value = tape.value(loss).item()?;
            if !(loss_value as f64).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {bi}"
                )));
            }
            loss_sum += loss_value as f64;
            let mut grad_vars = tape.backward(loss)?;
            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (name, var) in &leaves {
                if let Some(g) = grad_vars.take(*var) {
                    grads.insert(name.clone(), g);
                }
            }
            clip_gradient_norm(&mut grads, train_cfg.clip_norm).map_err(|e| {
                Error::Numeric(format!("epoch {epoch}, batch {bi}: {e}"))
            })?;
            opt.step(&mut params, &grads)?;
            update_running_stats(&mut params, &out.bn_stats, model_cfg.bn_momentum)?;
        }

        let val_rmse = validation_rmse(&model_cfg, &params, &data.val, train_cfg.val_batch)
            .map_err(|e| Error::Numeric(format!("epoch {epoch} validation: {e}")))?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_rmse,
            lr: lr_in_effect,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.push(stats);

        let stop = early.observe(epoch, val_rmse, &params);
        plateau.observe(val_rmse);
        if stop {
            break;
        }
    }

    let best_epoch = early.best_epoch();
    let best_val_rmse = early.best_metric();
    let best = early
        .into_snapshot()
        .ok_or_else(|| Error::Structure("training finished without any epoch".into()))?;
    let meta = TrainMeta {
        dataset: bundle.id.to_string(),
        seed,
        epochs_run: history.len(),
        best_epoch,
        best_val_rmse,
    };
    Ok(TrainResult {
        params: best,
        preprocess: data.preprocess,
        config: model_cfg,
        meta,
        history,
    })
}
