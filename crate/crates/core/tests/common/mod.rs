#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use salientsleep::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use salientsleep::model::{Forward, Model, ModelConfig, ModelParams, Specs};
use salientsleep::optim::AdamState;
use salientsleep::training::{train_step, weighted_cross_entropy, Batch, TrainConfig, CLASS_WEIGHTS};
use salientsleep::{
    synthetic, BatchNormConfig, Graph, Mode, PoolMode, Result, RunningStats, Shape, Tensor, Var,
};

pub fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values in +-[0.1, 1], so no ReLU input sits near its kink.
pub fn away_from_zero(shape: Shape, seed: u64) -> Tensor<f64> {
    uniform(shape, 0.1, 1.0, seed).map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v })
}

/// `sum(y * w)` for a fixed random `w`, so every output element gets its own
/// upstream gradient.
pub fn probe_loss(g: &mut Graph<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let w = g.constant(uniform(y.shape(), -1.0, 1.0, seed ^ 0x5eed));
    let p = g.mul(y, &w)?;
    Ok(g.sum(&p))
}

pub fn strict() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-4,
        max_coords_per_param: 64,
        seed: 7,
        skip_switches: true,
    }
}

type Case = Box<dyn Fn() -> Result<GradCheckReport>>;

fn case<F>(inputs: Vec<Tensor<f64>>, f: F) -> Case
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
{
    Box::new(move || gradient_check(&inputs, strict(), |g, v| f(g, v)))
}

/// One gradient check per differentiable primitive, each against the probe loss.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    let s = Shape::new;
    let stats = RunningStats {
        mean: vec![0.3, -0.2, 0.1],
        var: vec![0.5, 2.0, 1.5],
    };
    let stats_eval = stats.clone();
    vec![
        (
            "conv1d k5 d1",
            case(
                vec![uniform(s(2, 9, 3), -1.0, 1.0, 1), uniform(s(5, 3, 4), -0.5, 0.5, 2), uniform(s(1, 1, 4), -0.1, 0.1, 3)],
                |g, v| {
                    let y = g.conv1d(&v[0], &v[1], Some(&v[2]), 1)?;
                    probe_loss(g, &y, 1)
                },
            ),
        ),
        (
            "conv1d k5 d3",
            case(vec![uniform(s(1, 11, 2), -1.0, 1.0, 4), uniform(s(5, 2, 3), -0.5, 0.5, 5)], |g, v| {
                let y = g.conv1d(&v[0], &v[1], None, 3)?;
                probe_loss(g, &y, 2)
            }),
        ),
        (
            "conv1d k4 d2",
            case(vec![uniform(s(2, 6, 1), -1.0, 1.0, 6), uniform(s(4, 1, 2), -0.5, 0.5, 7)], |g, v| {
                let y = g.conv1d(&v[0], &v[1], None, 2)?;
                probe_loss(g, &y, 3)
            }),
        ),
        (
            "pool1d max",
            case(vec![uniform(s(2, 10, 3), -1.0, 1.0, 8)], |g, v| {
                let y = g.pool1d(&v[0], 3, PoolMode::Max)?;
                probe_loss(g, &y, 4)
            }),
        ),
        (
            "pool1d avg",
            case(vec![uniform(s(2, 10, 3), -1.0, 1.0, 9)], |g, v| {
                let y = g.pool1d(&v[0], 3, PoolMode::Avg)?;
                probe_loss(g, &y, 5)
            }),
        ),
        (
            "upsample_linear",
            case(vec![uniform(s(2, 5, 2), -1.0, 1.0, 10)], |g, v| {
                let y = g.upsample_linear(&v[0], 13)?;
                probe_loss(g, &y, 6)
            }),
        ),
        (
            "batch_norm train",
            case(
                vec![uniform(s(2, 7, 3), -1.0, 2.0, 11), uniform(s(1, 1, 3), 0.5, 1.5, 12), uniform(s(1, 1, 3), -0.5, 0.5, 13)],
                move |g, v| {
                    let mut st = stats.clone();
                    let y = g.batch_norm(&v[0], &v[1], &v[2], &mut st, Mode::Train, BatchNormConfig::default())?;
                    probe_loss(g, &y, 7)
                },
            ),
        ),
        (
            "batch_norm eval",
            case(
                vec![uniform(s(2, 7, 3), -1.0, 2.0, 14), uniform(s(1, 1, 3), 0.5, 1.5, 15), uniform(s(1, 1, 3), -0.5, 0.5, 16)],
                move |g, v| {
                    let mut st = stats_eval.clone();
                    let y = g.batch_norm(&v[0], &v[1], &v[2], &mut st, Mode::Eval, BatchNormConfig::default())?;
                    probe_loss(g, &y, 8)
                },
            ),
        ),
        (
            "relu",
            case(vec![away_from_zero(s(2, 6, 3), 17)], |g, v| {
                let y = g.relu(&v[0]);
                probe_loss(g, &y, 9)
            }),
        ),
        (
            "sigmoid",
            case(vec![uniform(s(2, 6, 3), -4.0, 4.0, 18)], |g, v| {
                let y = g.sigmoid(&v[0]);
                probe_loss(g, &y, 10)
            }),
        ),
        (
            "add",
            case(vec![uniform(s(2, 4, 3), -1.0, 1.0, 19), uniform(s(2, 4, 3), -1.0, 1.0, 20), uniform(s(2, 1, 3), -1.0, 1.0, 21)], |g, v| {
                let y = g.add(&v[0], &v[1])?;
                let y = g.add(&y, &v[2])?;
                probe_loss(g, &y, 11)
            }),
        ),
        (
            "mul",
            case(vec![uniform(s(2, 4, 3), -1.0, 1.0, 22), uniform(s(2, 4, 3), -1.0, 1.0, 23), uniform(s(2, 1, 3), -1.0, 1.0, 24)], |g, v| {
                let y = g.mul(&v[0], &v[1])?;
                let y = g.mul(&y, &v[2])?;
                probe_loss(g, &y, 12)
            }),
        ),
        (
            "concat_channels",
            case(vec![uniform(s(2, 4, 1), -1.0, 1.0, 25), uniform(s(2, 4, 3), -1.0, 1.0, 26), uniform(s(2, 4, 2), -1.0, 1.0, 27)], |g, v| {
                let y = g.concat_channels(&[&v[0], &v[1], &v[2]])?;
                probe_loss(g, &y, 13)
            }),
        ),
        (
            "slice_channels",
            case(vec![uniform(s(2, 4, 5), -1.0, 1.0, 28)], |g, v| {
                let y = g.slice_channels(&v[0], 1, 3)?;
                probe_loss(g, &y, 14)
            }),
        ),
        (
            "global_avg_pool",
            case(vec![uniform(s(2, 7, 3), -1.0, 1.0, 29)], |g, v| {
                let y = g.global_avg_pool(&v[0])?;
                probe_loss(g, &y, 15)
            }),
        ),
        (
            "dense",
            case(
                vec![uniform(s(3, 1, 4), -1.0, 1.0, 30), uniform(s(1, 4, 2), -1.0, 1.0, 31), uniform(s(1, 1, 2), -1.0, 1.0, 32)],
                |g, v| {
                    let y = g.dense(&v[0], &v[1], &v[2])?;
                    probe_loss(g, &y, 16)
                },
            ),
        ),
        (
            "softmax_channels",
            case(vec![uniform(s(2, 3, 5), -2.0, 2.0, 33)], |g, v| {
                let y = g.softmax_channels(&v[0])?;
                probe_loss(g, &y, 17)
            }),
        ),
        (
            "sum / mean / scale",
            case(vec![uniform(s(2, 3, 2), -1.0, 1.0, 34)], |g, v| {
                let sq = g.mul(&v[0], &v[0])?;
                let a = g.sum(&sq);
                let b = g.mean(&v[0]);
                let b = g.scale(&b, -2.5);
                g.add(&a, &b)
            }),
        ),
        (
            "weighted_nll",
            case(vec![uniform(s(2, 3, 5), -2.0, 2.0, 35)], |g, v| {
                let p = g.softmax_channels(&v[0])?;
                g.weighted_nll(&p, &[0, 1, 2, 3, 4, 1], &[1.0, 1.8, 0.0, 1.2, 1.25, 1.8])
            }),
        ),
        (
            "weighted_cross_entropy",
            case(vec![uniform(s(2, 4, 5), -2.0, 2.0, 36)], |g, v| {
                let p = g.softmax_channels(&v[0])?;
                let mask = [true, true, false, true, true, true, true, false];
                weighted_cross_entropy(g, &p, &[4, 1, 0, 3, 2, 1, 0, 2], &mask, &CLASS_WEIGHTS)
            }),
        ),
    ]
}

/// Gradient check of `f` over every parameter in `specs`, with the forward
/// pass reading running statistics from (and in train mode writing them to) `params`.
pub fn check_model_fn<F>(
    specs: &Specs,
    params: &mut ModelParams<f64>,
    opts: GradCheckOptions,
    mode: Mode,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Forward<f64>) -> Result<Var<f64>>,
{
    let names = specs.names();
    let init: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    gradient_check(&init, opts, |g, vars| {
        let mut cx = Forward::new(g, params, mode).bind(&names, vars);
        f(&mut cx)
    })
}

pub fn toy_batch(count: usize, seed: u64) -> Batch<f64> {
    let cfg = ModelConfig::toy();
    let w = synthetic::windows(count, cfg.seq_len, cfg.epoch_len, seed);
    let refs: Vec<_> = w.iter().collect();
    Batch::from_windows(&refs).unwrap()
}

/// Weighted cross-entropy of the whole model on `batch`, checked in `mode`.
/// Eval-mode checks first run a few train-mode passes so the running
/// statistics are not at their identity initialization.
pub fn check_model(model: &Model, seed: u64, mode: Mode, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let specs = model.specs();
    let mut params = model.init_params::<f64>(seed);
    let batch = toy_batch(2, seed);
    if mode == Mode::Eval {
        for _ in 0..5 {
            model.predict_in(&mut params, batch.input.clone(), Mode::Train)?;
        }
    }
    let labels = batch.labels.clone();
    let mask = batch.mask.clone();
    check_model_fn(&specs, &mut params, opts, mode, |cx| {
        let x = cx.graph.constant(batch.input.clone());
        let out = model.forward(cx, &x)?;
        weighted_cross_entropy(cx.graph, &out.probs, &labels, &mask, &CLASS_WEIGHTS)
    })
}

pub struct OverfitRun {
    pub seed: u64,
    /// First step after which every epoch of the batch is classified correctly.
    pub solved_at: Option<usize>,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub fn argmax_accuracy<T: salientsleep::Real>(probs: &Tensor<T>, labels: &[usize]) -> f64 {
    let preds = probs.argmax_channels();
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Adam on 4 synthetic windows with the toy model until every epoch is
/// classified correctly or `max_steps` is reached. Accuracy is read from
/// the train-mode (batch statistics) forward pass of the updated parameters.
pub fn overfit(seed: u64, max_steps: usize) -> Result<OverfitRun> {
    let cfg = ModelConfig::toy();
    let model = Model::new(cfg.clone())?;
    let mut params = model.init_params::<f32>(seed);
    let w = synthetic::windows(4, cfg.seq_len, cfg.epoch_len, seed);
    let refs: Vec<_> = w.iter().collect();
    let batch = Batch::<f32>::from_windows(&refs)?;
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut opt = AdamState::new();
    let mut run = OverfitRun {
        seed,
        solved_at: None,
        first_loss: f64::NAN,
        last_loss: f64::NAN,
    };
    for step in 1..=max_steps {
        let loss = train_step(&model, &mut params, &mut opt, &batch, &tc)?;
        if step == 1 {
            run.first_loss = loss;
        }
        run.last_loss = loss;
        let mut probe = params.clone();
        let probs = model.predict_in(&mut probe, batch.input.clone(), Mode::Train)?;
        if argmax_accuracy(&probs, &batch.labels) == 1.0 {
            run.solved_at = Some(step);
            break;
        }
    }
    Ok(run)
}
