//! Finite-difference verification of the reverse-mode engine.
//!
//! A closure builds a scalar loss on a 64-bit tape from named leaf
//! tensors; the harness compares analytic gradients against central
//! differences on a seeded random subsample of coordinates. Checks must
//! run with deterministic closures: dropout fixed by seed, batchnorm in
//! inference (frozen-statistics) mode, and inputs kept away from
//! relu/maxpool/clip kinks.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{scaled_dot_attention, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, Mode, ModelConfig};
use crate::rng;
use crate::train::{build_loss, LossConfig};

/// Central-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Coordinates sampled per parameter tensor (all of them when smaller).
pub const COORDS_PER_TENSOR: usize = 200;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error |a − n| / max(|a|, |n|, 1e-8) seen.
    pub max_rel_err: f64,
    /// Coordinate where it occurred, as "name[i]".
    pub worst: String,
    /// Total coordinates compared.
    pub coords_checked: usize,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// differences (f(θ+ε) − f(θ−ε)) / 2ε, sampling at least
/// [`COORDS_PER_TENSOR`] coordinates per tensor (seeded). Leaves absent
/// from the backward result count as zero gradient.
///
/// Each coordinate is probed at two well-separated steps, ε and ε/100,
/// and the estimate agreeing better with the analytic value wins. The two
/// single-step failure modes are one-sided — a relu/maxpool kink pollutes
/// the estimate only when the step reaches across it, cancellation noise
/// only when the step is small — so a correct gradient is matched by at
/// least one step, while a wrong one is matched by neither. Coordinates
/// whose difference quotients are non-finite at both steps are an error.
pub fn check_gradients<B>(
    build: B,
    params: &BTreeMap<String, Tensor<f64>>,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: Fn(&Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    if params.is_empty() {
        return Err(Error::Structure("gradient check: no parameters".into()));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Config(format!("gradient check: bad epsilon {epsilon}")));
    }

    let eval = |theta: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let tape: Tape<f64> = Tape::new();
        let leaves: BTreeMap<String, Var> = theta
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), true)))
            .collect();
        let loss = build(&tape, &leaves)?;
        tape.value(loss).item()
    };

    // Analytic pass.
    let tape: Tape<f64> = Tape::new();
    let leaves: BTreeMap<String, Var> = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), true)))
        .collect();
    let loss = build(&tape, &leaves)?;
    let mut grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, Tensor<f64>> = params
        .iter()
        .map(|(name, t)| {
            let g = grads
                .take(leaves[name])
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            (name.clone(), g)
        })
        .collect();

    let mut picker = rng::stream(seed, "gradcheck-coords");
    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    let mut coords_checked = 0usize;
    for (name, tensor) in params {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut picker, n, COORDS_PER_TENSOR).into_vec()
        };
        let ga = analytic[name].data();
        for i in coords {
            let quotient = |step: f64| -> Result<f64> {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += step;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= step;
                Ok((eval(&plus)? - eval(&minus)?) / (2.0 * step))
            };
            let a = ga[i];
            let mut rel = f64::INFINITY;
            for fd in [quotient(epsilon)?, quotient(epsilon / 100.0)?] {
                if fd.is_finite() {
                    rel = rel.min((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
                }
            }
            if !rel.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient check: non-finite finite difference at {name}[{i}]"
                )));
            }
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{i}]");
            }
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, coords_checked })
}

/// Random tensor with entries uniform in `lo..hi`.
pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "gradcheck-tensor");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape/data sizes agree")
}

/// Random tensor whose entries have magnitude in `margin..margin + span`
/// with random sign — safely away from kinks at zero.
pub fn rand_tensor_signed(shape: &[usize], seed: u64, margin: f64, span: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "gradcheck-signed");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = r.random_range(margin..margin + span);
            if r.random_range(0.0..1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape/data sizes agree")
}

/// Project a tensor to a scalar with fixed random weights, so every output
/// coordinate influences the loss with a distinct coefficient.
pub fn weighted_sum(tape: &Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape_of(v);
    let w = tape.constant(rand_tensor(&shape, seed, -1.0, 1.0));
    tape.sum_all(tape.mul(v, w)?)
}

type LossBuilder = Box<dyn Fn(&Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>>;

fn named(params: Vec<(&str, Tensor<f64>)>) -> BTreeMap<String, Tensor<f64>> {
    params.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Run the finite-difference suite over every differentiable primitive and
/// return one labeled report per check. Inputs are seeded and chosen away
/// from relu/maxpool/clip kinks.
pub fn primitive_reports(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let a = rand_tensor(&[2, 3], seed ^ 11, -1.5, 1.5);
    let b = rand_tensor(&[2, 3], seed ^ 12, -1.5, 1.5);
    let s = rand_tensor(&[1], seed ^ 13, 0.5, 1.5);
    let act = rand_tensor_signed(&[3, 4], seed ^ 31, 0.2, 1.0);
    let cube = rand_tensor(&[2, 5, 3], seed ^ 51, -1.0, 1.0);
    let bn_rm = rand_tensor(&[3], seed ^ 89, -0.5, 0.5);
    let bn_rv = rand_tensor(&[3], seed ^ 92, 0.5, 1.5);
    let lstm_mask = rand_tensor(&[2, 4], seed ^ 125, 0.4, 1.0);
    let lstm_params = || {
        vec![
            ("x", rand_tensor(&[2, 6, 3], seed ^ 121, -1.0, 1.0)),
            ("wx", rand_tensor(&[3, 16], seed ^ 122, -0.5, 0.5)),
            ("wh", rand_tensor(&[4, 16], seed ^ 123, -0.5, 0.5)),
            ("b", rand_tensor(&[16], seed ^ 124, -0.5, 0.5)),
        ]
    };

    let cases: Vec<(&str, BTreeMap<String, Tensor<f64>>, LossBuilder)> = vec![
        (
            "add",
            named(vec![("a", a.clone()), ("b", b.clone())]),
            Box::new(|t, l| weighted_sum(t, t.add(l["a"], l["b"])?, 20)),
        ),
        (
            "sub",
            named(vec![("a", a.clone()), ("b", b.clone())]),
            Box::new(|t, l| weighted_sum(t, t.sub(l["a"], l["b"])?, 21)),
        ),
        (
            "mul",
            named(vec![("a", a.clone()), ("b", b.clone())]),
            Box::new(|t, l| weighted_sum(t, t.mul(l["a"], l["b"])?, 22)),
        ),
        (
            "neg",
            named(vec![("a", a.clone())]),
            Box::new(|t, l| weighted_sum(t, t.neg(l["a"])?, 23)),
        ),
        (
            "scale",
            named(vec![("a", a.clone())]),
            Box::new(|t, l| weighted_sum(t, t.scale(l["a"], -1.7)?, 24)),
        ),
        (
            "add_scalar",
            named(vec![("a", a.clone())]),
            Box::new(|t, l| weighted_sum(t, t.add_scalar(l["a"], 0.31)?, 25)),
        ),
        (
            "square",
            named(vec![("a", a.clone())]),
            Box::new(|t, l| weighted_sum(t, t.square(l["a"])?, 26)),
        ),
        (
            "mul_by_scalar_var",
            named(vec![("a", a.clone()), ("s", s.clone())]),
            Box::new(|t, l| {
                let sv = t.index_scalar(l["s"], 0)?;
                weighted_sum(t, t.mul_by_scalar_var(l["a"], sv)?, 27)
            }),
        ),
        (
            "relu",
            named(vec![("x", act.clone())]),
            Box::new(|t, l| weighted_sum(t, t.relu(l["x"])?, 40)),
        ),
        (
            "tanh",
            named(vec![("x", act.clone())]),
            Box::new(|t, l| weighted_sum(t, t.tanh(l["x"])?, 41)),
        ),
        (
            "sigmoid",
            named(vec![("x", act.clone())]),
            Box::new(|t, l| weighted_sum(t, t.sigmoid(l["x"])?, 42)),
        ),
        (
            "exp",
            named(vec![("x", act.clone())]),
            Box::new(|t, l| weighted_sum(t, t.exp(l["x"])?, 43)),
        ),
        (
            "clip_inside",
            named(vec![("x", rand_tensor(&[3, 4], seed ^ 32, -0.4, 0.4))]),
            Box::new(|t, l| weighted_sum(t, t.clip(l["x"], -0.5, 0.5)?, 44)),
        ),
        (
            "clip_outside",
            named(vec![("x", rand_tensor_signed(&[3, 4], seed ^ 33, 0.6, 0.5))]),
            Box::new(|t, l| weighted_sum(t, t.clip(l["x"], -0.5, 0.5)?, 45)),
        ),
        (
            "sum_all",
            named(vec![("x", cube.clone())]),
            Box::new(|t, l| t.sum_all(l["x"])),
        ),
        (
            "mean_all",
            named(vec![("x", cube.clone())]),
            Box::new(|t, l| t.mean_all(l["x"])),
        ),
        (
            "mean_axis1",
            named(vec![("x", cube.clone())]),
            Box::new(|t, l| weighted_sum(t, t.mean_axis1(l["x"])?, 60)),
        ),
        (
            "index_scalar",
            named(vec![("x", rand_tensor(&[7], seed ^ 52, -1.0, 1.0))]),
            Box::new(|t, l| t.index_scalar(l["x"], 3)),
        ),
        (
            "reshape",
            named(vec![("x", cube.clone())]),
            Box::new(|t, l| weighted_sum(t, t.reshape(l["x"], vec![5, 6])?, 61)),
        ),
        (
            "transpose12",
            named(vec![("x", cube.clone())]),
            Box::new(|t, l| weighted_sum(t, t.transpose12(l["x"])?, 62)),
        ),
        (
            "transpose2d",
            named(vec![("x", rand_tensor(&[3, 4], seed ^ 53, -1.0, 1.0))]),
            Box::new(|t, l| weighted_sum(t, t.transpose2d(l["x"])?, 63)),
        ),
        (
            "concat_last",
            named(vec![
                ("a", rand_tensor(&[2, 3, 2], seed ^ 54, -1.0, 1.0)),
                ("b", rand_tensor(&[2, 3, 4], seed ^ 55, -1.0, 1.0)),
            ]),
            Box::new(|t, l| weighted_sum(t, t.concat_last(&[l["a"], l["b"]])?, 64)),
        ),
        (
            "split_merge_heads",
            named(vec![("x", rand_tensor(&[2, 4, 6], seed ^ 56, -1.0, 1.0))]),
            Box::new(|t, l| {
                let split = t.split_heads(l["x"], 2)?;
                weighted_sum(t, t.merge_heads(split, 2)?, 65)
            }),
        ),
        (
            "add_bias",
            named(vec![
                ("x", rand_tensor(&[4, 3], seed ^ 57, -1.0, 1.0)),
                ("b", rand_tensor(&[3], seed ^ 58, -1.0, 1.0)),
            ]),
            Box::new(|t, l| weighted_sum(t, t.add_bias(l["x"], l["b"])?, 66)),
        ),
        (
            "matmul",
            named(vec![
                ("a", rand_tensor(&[3, 4], seed ^ 71, -1.0, 1.0)),
                ("b", rand_tensor(&[4, 2], seed ^ 72, -1.0, 1.0)),
            ]),
            Box::new(|t, l| weighted_sum(t, t.matmul(l["a"], l["b"])?, 80)),
        ),
        (
            "bmm",
            named(vec![
                ("a", rand_tensor(&[2, 3, 4], seed ^ 73, -1.0, 1.0)),
                ("b", rand_tensor(&[2, 4, 2], seed ^ 74, -1.0, 1.0)),
            ]),
            Box::new(|t, l| weighted_sum(t, t.bmm(l["a"], l["b"])?, 81)),
        ),
        (
            "softmax_last",
            named(vec![("x", rand_tensor(&[2, 3, 5], seed ^ 75, -2.0, 2.0))]),
            Box::new(|t, l| weighted_sum(t, t.softmax_last(l["x"])?, 82)),
        ),
        (
            "softmax_composite",
            named(vec![("x", rand_tensor(&[4, 5], seed ^ 76, -2.0, 2.0))]),
            Box::new(move |t, l| {
                // Squared gap to a fixed distribution: a nonlinear readout
                // rather than a mere linear projection.
                let p = t.softmax_last(l["x"])?;
                let target = t.constant(rand_tensor(&[4, 5], 77, 0.0, 0.4));
                t.sum_all(t.square(t.sub(p, target)?)?)
            }),
        ),
        (
            "scaled_dot_attention",
            named(vec![
                ("q", rand_tensor(&[3, 4], seed ^ 78, -1.0, 1.0)),
                ("k", rand_tensor(&[5, 4], seed ^ 79, -1.0, 1.0)),
                ("v", rand_tensor(&[5, 2], seed ^ 70, -1.0, 1.0)),
            ]),
            Box::new(|t, l| {
                let (out, _) = scaled_dot_attention(t, l["q"], l["k"], l["v"])?;
                weighted_sum(t, out, 83)
            }),
        ),
        (
            "maxpool1d_2",
            named(vec![("x", rand_tensor(&[2, 6, 3], seed ^ 85, -1.0, 1.0))]),
            Box::new(|t, l| weighted_sum(t, t.maxpool1d_2(l["x"])?, 90)),
        ),
        (
            "batchnorm_train",
            named(vec![
                ("x", rand_tensor(&[5, 3], seed ^ 86, -1.0, 1.0)),
                ("g", rand_tensor(&[3], seed ^ 87, 0.5, 1.5)),
                ("b", rand_tensor(&[3], seed ^ 88, -0.5, 0.5)),
            ]),
            Box::new(|t, l| {
                let (y, _, _) = t.batchnorm_train(l["x"], l["g"], l["b"], 1e-3)?;
                weighted_sum(t, y, 91)
            }),
        ),
        (
            "batchnorm_infer",
            named(vec![
                ("x", rand_tensor(&[5, 3], seed ^ 93, -1.0, 1.0)),
                ("g", rand_tensor(&[3], seed ^ 94, 0.5, 1.5)),
                ("b", rand_tensor(&[3], seed ^ 95, -0.5, 0.5)),
            ]),
            Box::new(move |t, l| {
                let y = t.batchnorm_infer(l["x"], l["g"], l["b"], &bn_rm, &bn_rv, 1e-3)?;
                weighted_sum(t, y, 96)
            }),
        ),
        (
            "dropout",
            named(vec![("x", rand_tensor(&[4, 6], seed ^ 97, -1.0, 1.0))]),
            // A fixed seed freezes the mask, so the check is exact.
            Box::new(|t, l| weighted_sum(t, t.dropout(l["x"], 0.4, 1234)?, 98)),
        ),
        (
            "conv1d",
            named(vec![
                ("x", rand_tensor(&[2, 8, 3], seed ^ 101, -1.0, 1.0)),
                ("k", rand_tensor(&[3, 3, 4], seed ^ 102, -1.0, 1.0)),
                ("b", rand_tensor(&[4], seed ^ 103, -0.5, 0.5)),
            ]),
            Box::new(|t, l| weighted_sum(t, t.conv1d(l["x"], l["k"], l["b"])?, 110)),
        ),
        (
            "conv1d_wide",
            named(vec![
                ("x", rand_tensor(&[1, 9, 2], seed ^ 104, -1.0, 1.0)),
                ("k", rand_tensor(&[5, 2, 3], seed ^ 105, -1.0, 1.0)),
                ("b", rand_tensor(&[3], seed ^ 106, -0.5, 0.5)),
            ]),
            Box::new(|t, l| weighted_sum(t, t.conv1d(l["x"], l["k"], l["b"])?, 111)),
        ),
        (
            "lstm_forward",
            named(lstm_params()),
            Box::new(|t, l| {
                weighted_sum(t, t.lstm_seq(l["x"], l["wx"], l["wh"], l["b"], false, None)?, 130)
            }),
        ),
        (
            "lstm_reversed",
            named(lstm_params()),
            Box::new(|t, l| {
                weighted_sum(t, t.lstm_seq(l["x"], l["wx"], l["wh"], l["b"], true, None)?, 131)
            }),
        ),
        (
            "lstm_masked",
            named(lstm_params()),
            Box::new(move |t, l| {
                weighted_sum(
                    t,
                    t.lstm_seq(l["x"], l["wx"], l["wh"], l["b"], false, Some(&lstm_mask))?,
                    132,
                )
            }),
        ),
    ];

    let mut reports = Vec::with_capacity(cases.len());
    for (label, params, build) in cases {
        let report = check_gradients(build, &params, DEFAULT_EPSILON, seed ^ 0x9e37)?;
        reports.push((label.to_string(), report));
    }
    Ok(reports)
}

/// Reduced configuration for the whole-model check: 4 input features,
/// 8 filters per branch, 8 LSTM units, a single attention head.
pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        feature_count: 4,
        inception_filters: 8,
        lstm_units: 8,
        attn_heads: 1,
        ..ModelConfig::default()
    }
}

/// Step for the whole-model check. The deep graph accumulates enough
/// rounding noise per evaluation that the default 1e-5 step drowns
/// small-gradient coordinates in (f⁺ − f⁻) cancellation error; one decade
/// up cuts that noise 10× while truncation error stays negligible. The
/// larger step does reach across a relu/maxpool kink now and then — the
/// ε/100 probe in [`check_gradients`] covers those coordinates.
pub const FULL_MODEL_EPSILON: f64 = 1e-4;

/// Whole-model check: the full training objective on [`reduced_config`],
/// dropout off and batchnorm frozen (inference mode), against every
/// trainable parameter.
pub fn full_model_report(seed: u64) -> Result<GradCheckReport> {
    let cfg = reduced_config();
    let store = init_params::<f64>(&cfg, seed ^ 0x5bd1)?;
    let trainable: BTreeMap<String, Tensor<f64>> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .collect();

    let b = 3;
    let windows = rand_tensor(&[b, cfg.window_len, cfg.feature_count], seed ^ 201, -1.0, 1.0);
    let settings = rand_tensor(&[b, 3], seed ^ 202, -0.8, 0.8);
    let mut label_rng = rng::stream(seed ^ 203, "gradcheck-labels");
    let labels: Vec<f64> = (0..b).map(|_| label_rng.random_range(0.0..125.0)).collect();
    let loss_cfg = LossConfig::default();

    check_gradients(
        move |t, l| {
            let w = t.constant(windows.clone());
            let s = t.constant(settings.clone());
            let out = forward(t, &cfg, &store, l, w, s, Mode::Infer)?;
            build_loss(t, &cfg, &loss_cfg, &store, l, out.mean, out.log_var, &labels)
        },
        &trainable,
        FULL_MODEL_EPSILON,
        seed ^ 204,
    )
}
