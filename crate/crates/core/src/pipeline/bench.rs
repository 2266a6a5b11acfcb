//! Batched versus per-pixel attention pooling timing.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    attend_pool, attend_pool_reference, AttentionField, AttentionKind, ContextGrid,
};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::activation::softmax_in_place;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub grid: usize,
    pub dilation: usize,
    pub warmup: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            height: 28,
            width: 28,
            channels: 64,
            grid: 10,
            dilation: 3,
            warmup: 5,
            trials: 30,
            seed: 0,
        }
    }
}

/// Per-trial wall times in milliseconds.
#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    fn from_samples(samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len() as f64;
        let mean_ms = samples_ms.iter().sum::<f64>() / n;
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median_ms = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Timing {
            median_ms,
            mean_ms,
            min_ms: sorted[0],
            samples_ms,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub batched: Timing,
    pub reference: Timing,
    /// Reference median over batched median.
    pub speedup: f64,
    /// Largest elementwise difference between the two results.
    pub max_abs_diff: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "attend_pool (1,{},{},{}) global {}x{} d={}: batched {:.3} ms, reference {:.3} ms (median of {} after {} warmup), speedup {:.1}x",
            c.height, c.width, c.channels, c.grid, c.grid, c.dilation, self.batched.median_ms, self.reference.median_ms, c.trials, c.warmup, self.speedup
        )
    }
}

/// Times [`attend_pool`] against [`attend_pool_reference`] on random
/// features and softmax-normalized weights.
pub fn bench_attend_pool(cfg: BenchConfig) -> Result<BenchReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("bench needs at least one trial".into()));
    }
    let grid = ContextGrid::global(cfg.grid, cfg.dilation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fs = Shape::new(1, cfg.height, cfg.width, cfg.channels);
    let f = Tensor::<f32>::from_fn(fs, |_, _, _, _| rng.gen_range(-1.0..1.0))?;
    let mut alpha =
        Tensor::<f32>::from_fn(fs.with_c(grid.len()), |_, _, _, _| rng.gen_range(-2.0..2.0))?;
    for px in alpha.data_mut().chunks_mut(grid.len()) {
        softmax_in_place(px);
    }

    let batched_once = || -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let av = g.constant(alpha.clone());
        let att = AttentionField::new(&g, av, grid, AttentionKind::Softmax)?;
        let out = attend_pool(&mut g, fv, &att)?;
        Ok(g.value(out).clone())
    };
    let time_batched = || -> Result<f64> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let av = g.constant(alpha.clone());
        let att = AttentionField::new(&g, av, grid, AttentionKind::Softmax)?;
        let start = Instant::now();
        let out = attend_pool(&mut g, fv, &att)?;
        black_box(g.value(out).data()[0]);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    let time_reference = || -> Result<f64> {
        let start = Instant::now();
        let out = attend_pool_reference(&f, &alpha, &grid)?;
        black_box(out.data()[0]);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };

    for _ in 0..cfg.warmup {
        time_batched()?;
        time_reference()?;
    }
    let mut b = Vec::with_capacity(cfg.trials);
    let mut r = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        b.push(time_batched()?);
        r.push(time_reference()?);
    }
    let reference_out = attend_pool_reference(&f, &alpha, &grid)?;
    let max_abs_diff = batched_once()?.max_abs_diff(&reference_out) as f64;
    let (batched, reference) = (Timing::from_samples(b), Timing::from_samples(r));
    Ok(BenchReport {
        config: cfg,
        speedup: reference.median_ms / batched.median_ms.max(1e-9),
        batched,
        reference,
        max_abs_diff,
    })
}
