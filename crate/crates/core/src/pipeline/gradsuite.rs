//! Registry of finite-difference gradient checks over every differentiable
//! building block, run at `f64` on seeded random inputs.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    attend_conv, attend_pool, attention_head, AttentionField, AttentionKind, ContextGrid, HeadVars,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{fd_check, fd_check_sampled};
use crate::losses::{
    global_attention_loss, ground_truth_attention, saliency_ce_loss, total_loss, LossWeights,
};
use crate::model::{ModelConfig, SaliencyModel};
use crate::nn::{batch_norm, conv2d, renet, softmax, BnMode, CellVars, ConvSpec, RunningStats};
use crate::pipeline::objective::objective;
use crate::tensor::{Shape, Tensor};

/// Step of the central differences for single ops. The stencil is fourth
/// order, so a wide step costs little truncation and keeps rounding down.
pub const EPS: f64 = 1e-3;

/// Step for the whole-model check. ReLU and max-pool kinks are everywhere
/// there, so the step has to stay small.
pub const MODEL_EPS: f64 = 3e-5;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradResult {
    pub name: String,
    pub seeds: usize,
    pub max_error: f64,
    pub seconds: f64,
}

fn rand_t(rng: &mut ChaCha8Rng, s: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _, _| rng.gen_range(lo..hi)).expect("finite")
}

/// Contracts `y` with a fixed random tensor so that no op output sums to a
/// constant (softmax and normalization would otherwise have zero gradient).
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = rand_t(&mut rng, g.shape(y), -1.0, 1.0);
    let r = g.constant(r);
    g.mul(y, r)
}

fn cells(v: &[Var]) -> [CellVars; 4] {
    std::array::from_fn(|k| CellVars {
        w_ih: v[3 * k],
        w_hh: v[3 * k + 1],
        bias: v[3 * k + 2],
    })
}

fn renet_inputs(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Vec<Tensor<f64>> {
    let mut out = Vec::with_capacity(12);
    for k in 0..4 {
        let cin = if k < 2 { input } else { 2 * hidden };
        out.push(rand_t(rng, Shape::new(1, 1, cin, 4 * hidden), -0.6, 0.6));
        out.push(rand_t(rng, Shape::new(1, 1, hidden, 4 * hidden), -0.6, 0.6));
        out.push(rand_t(rng, Shape::vector(4 * hidden), -0.3, 0.3));
    }
    out
}

fn case_conv2d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = [1, 3][rng.gen_range(0..2)];
    let d = rng.gen_range(1..=2);
    let n = rng.gen_range(1..=2);
    let x = rand_t(&mut rng, Shape::new(n, 6, 5, cin), -1.0, 1.0);
    let w = rand_t(&mut rng, Shape::new(k, k, cin, cout), -1.0, 1.0);
    let b = rand_t(&mut rng, Shape::vector(cout), -1.0, 1.0);
    let spec = if rng.gen_bool(0.5) {
        ConvSpec::same(k, d)
    } else {
        ConvSpec {
            dilation: d,
            ..ConvSpec::default()
        }
    };
    fd_check(
        |g, v| {
            let y = conv2d(g, v[0], v[1], v[2], spec)?;
            project(g, y, seed)
        },
        &[x, w, b],
        EPS,
    )
}

fn case_batch_norm(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(1..=3);
    let x = rand_t(&mut rng, Shape::new(2, 3, 3, c), -2.0, 2.0);
    let gamma = rand_t(&mut rng, Shape::vector(c), 0.5, 1.5);
    let beta = rand_t(&mut rng, Shape::vector(c), -1.0, 1.0);
    let (mean, var) = (vec![0.0; c], vec![1.0; c]);
    fd_check(
        |g, v| {
            let running = RunningStats {
                mean: &mean,
                var: &var,
            };
            let (y, _) = batch_norm(g, v[0], v[1], v[2], running, BnMode::Train)?;
            project(g, y, seed)
        },
        &[x, gamma, beta],
        EPS,
    )
}

fn case_softmax(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(2..=10);
    let x = rand_t(&mut rng, Shape::new(1, 2, 2, c), -3.0, 3.0);
    fd_check(
        |g, v| {
            let y = softmax(g, v[0]);
            project(g, y, seed)
        },
        &[x],
        EPS,
    )
}

fn case_sigmoid(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut rng, Shape::new(1, 2, 2, 3), -4.0, 4.0);
    fd_check(
        |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, seed)
        },
        &[x],
        EPS,
    )
}

fn case_renet(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, hidden) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mut inputs = vec![rand_t(&mut rng, Shape::new(1, 3, 4, c), -1.0, 1.0)];
    inputs.extend(renet_inputs(&mut rng, c, hidden));
    fd_check(
        |g, v| {
            let y = renet(g, v[0], &cells(&v[1..]))?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn case_attention_head(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(1..=3);
    let f = rand_t(&mut rng, Shape::new(1, 4, 4, c), -1.0, 1.0);
    if seed % 2 == 0 {
        let grid = ContextGrid::global(rng.gen_range(2..=4), 1)?;
        let hidden = 2;
        let mut inputs = vec![f];
        inputs.extend(renet_inputs(&mut rng, c, hidden));
        inputs.push(rand_t(
            &mut rng,
            Shape::new(1, 1, 2 * hidden, grid.len()),
            -1.0,
            1.0,
        ));
        inputs.push(rand_t(&mut rng, Shape::vector(grid.len()), -0.5, 0.5));
        fd_check(
            |g, v| {
                let head = HeadVars::Global {
                    renet: cells(&v[1..13]),
                    w: v[13],
                    b: v[14],
                };
                let att = attention_head(g, v[0], &head, grid, AttentionKind::Softmax)?;
                project(g, att.weights, seed)
            },
            &inputs,
            EPS,
        )
    } else {
        let grid = ContextGrid::local(3, rng.gen_range(1..=2))?;
        let kind = if rng.gen_bool(0.5) {
            AttentionKind::Softmax
        } else {
            AttentionKind::Sigmoid
        };
        let hc = 2;
        let inputs = vec![
            f,
            rand_t(&mut rng, Shape::new(3, 3, c, hc), -1.0, 1.0),
            rand_t(&mut rng, Shape::vector(hc), -0.5, 0.5),
            rand_t(&mut rng, Shape::new(1, 1, hc, grid.len()), -1.0, 1.0),
            rand_t(&mut rng, Shape::vector(grid.len()), -0.5, 0.5),
        ];
        fd_check(
            |g, v| {
                let head = HeadVars::Local {
                    w_ctx: v[1],
                    b_ctx: v[2],
                    w: v[3],
                    b: v[4],
                };
                let att = attention_head(g, v[0], &head, grid, kind)?;
                project(g, att.weights, seed)
            },
            &inputs,
            EPS,
        )
    }
}

fn case_attend_pool(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = if seed % 2 == 0 {
        ContextGrid::global(rng.gen_range(2..=4), 1)?
    } else {
        ContextGrid::local([3, 5][rng.gen_range(0..2)], rng.gen_range(1..=2))?
    };
    let c = rng.gen_range(1..=3);
    let f = rand_t(&mut rng, Shape::new(1, 4, 4, c), -1.0, 1.0);
    let logits = rand_t(&mut rng, Shape::new(1, 4, 4, grid.len()), -2.0, 2.0);
    fd_check(
        |g, v| {
            let alpha = softmax(g, v[1]);
            let att = AttentionField::new(g, alpha, grid, AttentionKind::Softmax)?;
            let y = attend_pool(g, v[0], &att)?;
            project(g, y, seed)
        },
        &[f, logits],
        EPS,
    )
}

fn case_attend_conv(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = [3, 5][rng.gen_range(0..2)];
    let grid = ContextGrid::local(k, rng.gen_range(1..=2))?;
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let inputs = [
        rand_t(&mut rng, Shape::new(1, 4, 4, cin), -1.0, 1.0),
        rand_t(&mut rng, Shape::new(1, 4, 4, grid.len()), -2.0, 2.0),
        rand_t(&mut rng, Shape::new(k, k, cin, cout), -1.0, 1.0),
        rand_t(&mut rng, Shape::vector(cout), -1.0, 1.0),
    ];
    fd_check(
        |g, v| {
            let gates = g.sigmoid(v[1]);
            let att = AttentionField::new(g, gates, grid, AttentionKind::Sigmoid)?;
            let y = attend_conv(g, v[0], &att, v[2], v[3])?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn case_saliency_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let logits = rand_t(&mut rng, Shape::new(2, h, w, 1), -3.0, 3.0);
    let gt = Tensor::from_fn(Shape::new(2, 2 * h, 2 * w, 1), |_, _, _, _| {
        if rng.gen_bool(0.4) {
            1.0
        } else {
            0.0
        }
    })?;
    fd_check(
        |g, v| {
            let s = g.sigmoid(v[0]);
            saliency_ce_loss(g, s, &gt)
        },
        &[logits],
        EPS,
    )
}

fn case_attention_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = ContextGrid::global(rng.gen_range(2..=4), 1)?;
    let mask = Tensor::from_fn(Shape::new(2, 4, 4, 1), |_, y, x, _| {
        if (y + x) % 3 == 0 || rng.gen_bool(0.3) {
            1.0
        } else {
            0.0
        }
    })?;
    let gt = ground_truth_attention(&mask, grid)?;
    let logits = rand_t(&mut rng, Shape::new(2, 4, 4, grid.len()), -2.0, 2.0);
    fd_check(
        |g, v| {
            let alpha = softmax(g, v[0]);
            let att = AttentionField::new(g, alpha, grid, AttentionKind::Softmax)?;
            global_attention_loss(g, &att, &gt)
        },
        &[logits],
        EPS,
    )
}

fn case_total_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = (0..7)
        .map(|_| Tensor::scalar(rng.gen_range(0.1..3.0)))
        .collect();
    let weights = LossWeights {
        saliency: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
        global_attention: rng.gen_range(0.0..1.0),
    };
    fd_check(
        |g, v| {
            let s: [Var; 6] = std::array::from_fn(|i| v[i]);
            total_loss(g, &s, Some(v[6]), &weights)
        },
        &inputs,
        EPS,
    )
}

/// Smallest network exercising every module kind on the default preset.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        channels: [2, 3, 3, 4, 4],
        convs: [1; 5],
        fc_channels: 4,
        fc_dilation: 1,
        head_channels: 2,
        renet_hidden: 2,
        local_grid: 3,
        local_dilation: 1,
        ..ModelConfig::default()
    }
}

/// Parameters sampled per seed in the whole-model check.
pub const MODEL_SAMPLES: usize = 10;

fn case_tiny_model(seed: u64) -> Result<f64> {
    let cfg = tiny_model_config();
    let model = SaliencyModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let images = rand_t(&mut rng, Shape::new(2, 16, 16, 3), 0.0, 1.0);
    let masks = Tensor::from_fn(Shape::new(2, 16, 16, 1), |n, y, x, _| {
        let (cy, cx) = (6.0 + 3.0 * n as f64, 8.0);
        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < 20.0 {
            1.0
        } else {
            0.0
        }
    })?;
    let names: Vec<String> = model.params().keys().cloned().collect();
    // Zero biases put ReLU inputs exactly on the kink wherever the incoming
    // activations are all zero; nudge them off it.
    let inputs: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|(name, t)| {
            if !name.ends_with(".b") {
                return Ok(t.clone());
            }
            Tensor::new(
                t.shape(),
                t.data()
                    .iter()
                    .map(|v| v + rng.gen_range(-0.01..0.01))
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let mut coords = Vec::with_capacity(MODEL_SAMPLES);
    for flat in sample(&mut rng, total, MODEL_SAMPLES) {
        let (mut i, mut j) = (0, flat);
        while j >= inputs[i].len() {
            j -= inputs[i].len();
            i += 1;
        }
        coords.push((i, j));
    }
    let weights = LossWeights::default();
    fd_check_sampled(
        |g, v| {
            let vars = names.iter().cloned().zip(v.iter().copied()).collect();
            Ok(objective(&model, g, &vars, &images, &masks, &weights, BnMode::Train)?.total)
        },
        &inputs,
        MODEL_EPS,
        &coords,
    )
}

pub fn registry() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d",
            run: case_conv2d,
        },
        GradCase {
            name: "batch_norm",
            run: case_batch_norm,
        },
        GradCase {
            name: "softmax",
            run: case_softmax,
        },
        GradCase {
            name: "sigmoid",
            run: case_sigmoid,
        },
        GradCase {
            name: "renet",
            run: case_renet,
        },
        GradCase {
            name: "attention_head",
            run: case_attention_head,
        },
        GradCase {
            name: "attend_pool",
            run: case_attend_pool,
        },
        GradCase {
            name: "attend_conv",
            run: case_attend_conv,
        },
        GradCase {
            name: "saliency_loss",
            run: case_saliency_loss,
        },
        GradCase {
            name: "attention_loss",
            run: case_attention_loss,
        },
        GradCase {
            name: "total_loss",
            run: case_total_loss,
        },
        GradCase {
            name: "tiny_model",
            run: case_tiny_model,
        },
    ]
}

/// Runs every case whose name contains `filter` on seeds `0..seeds`.
pub fn run_suite(seeds: usize, filter: Option<&str>) -> Result<Vec<GradResult>> {
    let cases: Vec<GradCase> = registry()
        .into_iter()
        .filter(|c| filter.map_or(true, |f| c.name.contains(f)))
        .collect();
    if cases.is_empty() {
        return Err(Error::Config(format!(
            "no gradient check matches {:?}",
            filter.unwrap_or("")
        )));
    }
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let start = Instant::now();
        let mut worst = 0.0f64;
        for seed in 0..seeds as u64 {
            worst = worst.max((case.run)(seed)?);
        }
        out.push(GradResult {
            name: case.name.into(),
            seeds,
            max_error: worst,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}
