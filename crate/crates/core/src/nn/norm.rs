//! Batch normalization over the `(batch, height, width)` axes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Per-channel batch statistics produced in train mode. `var` is the
/// unbiased estimate used for the running average.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone)]
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn update_running<T: Scalar>(
    mean: &mut [T],
    var: &mut [T],
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for (r, b) in mean.iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * *b;
    }
    for (r, b) in var.iter_mut().zip(&stats.var) {
        *r = keep * *r + m * *b;
    }
}

/// `y = γ·(x − μ)/√(σ² + ε) + β` per channel. Returns the batch statistics
/// in train mode so the caller can update its running averages.
pub fn batch_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: RunningStats<'_, T>,
    mode: BnMode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let shape = g.shape(x);
    let c = shape.c;
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if g.shape(v) != Shape::vector(c) {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} {} for {c} channels", g.shape(v)),
            ));
        }
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape("batch_norm", "running statistics length"));
    }
    let count = shape.pixels();
    if count == 0 {
        return Err(Error::InvalidArgument(
            "batch_norm on an empty batch".into(),
        ));
    }
    let eps = T::of(BN_EPS);
    let xs = g.value(x).data();
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            for px in xs.chunks_exact(c) {
                mean.iter_mut().zip(px).for_each(|(m, v)| *m += *v);
            }
            let inv_n = T::one() / T::of(count as f64);
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); c];
            for px in xs.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                    let d = *v - *m;
                    *s += d * d;
                }
            }
            let unbiased: Vec<T> = if count > 1 {
                let k = T::one() / T::of((count - 1) as f64);
                var.iter().map(|s| *s * k).collect()
            } else {
                vec![T::zero(); c]
            };
            var.iter_mut().for_each(|s| *s *= inv_n);
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval => (running.mean.to_vec(), running.var.to_vec(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xs.len()];
    for (o, px) in xhat.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
        for (ch, (o, v)) in o.iter_mut().zip(px).enumerate() {
            *o = (*v - mean[ch]) * inv_std[ch];
        }
    }
    let (gm, bt) = (
        g.value(gamma).data().to_vec(),
        g.value(beta).data().to_vec(),
    );
    let mut out = vec![T::zero(); xs.len()];
    for (o, h) in out.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            o[ch] = gm[ch] * h[ch] + bt[ch];
        }
    }
    let rule = move |xs: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     needs: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let gm = xs[1].data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (d, h) in dy.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] += d[ch] * h[ch];
                dbeta[ch] += d[ch];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); xhat.len()];
            match mode {
                BnMode::Train => {
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    let inv_n = T::one() / T::of(count as f64);
                    for ((o, d), h) in dx
                        .chunks_exact_mut(c)
                        .zip(dy.data().chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for ch in 0..c {
                            o[ch] = gm[ch]
                                * inv_std[ch]
                                * (d[ch] - dbeta[ch] * inv_n - h[ch] * dgamma[ch] * inv_n);
                        }
                    }
                }
                BnMode::Eval => {
                    for (o, d) in dx.chunks_exact_mut(c).zip(dy.data().chunks_exact(c)) {
                        for ch in 0..c {
                            o[ch] = gm[ch] * inv_std[ch] * d[ch];
                        }
                    }
                }
            }
            Tensor::from_raw(shape, dx)
        });
        vec![
            dx,
            Some(Tensor::from_raw(Shape::vector(c), dgamma)),
            Some(Tensor::from_raw(Shape::vector(c), dbeta)),
        ]
    };
    let y = g.record(
        "batch_norm",
        &[x, gamma, beta],
        Tensor::from_raw(shape, out),
        rule,
    );
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let c = t.shape().c;
        let vals: Vec<f64> = t.data().iter().skip(ch).step_by(c).copied().collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    fn run(
        x: &Tensor<f64>,
        gamma: &[f64],
        beta: &[f64],
        rm: &[f64],
        rv: &[f64],
        mode: BnMode,
    ) -> (Tensor<f64>, Option<BatchStats<f64>>) {
        let c = x.shape().c;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gv = g.param(Tensor::from_f64(Shape::vector(c), gamma).unwrap());
        let bv = g.param(Tensor::from_f64(Shape::vector(c), beta).unwrap());
        let (y, stats) =
            batch_norm(&mut g, xv, gv, bv, RunningStats { mean: rm, var: rv }, mode).unwrap();
        (g.value(y).clone(), stats)
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(Shape::new(3, 4, 4, 2), |_, _, _, c| {
            rng.gen_range(-2.0..5.0) * (c + 1) as f64
        })
        .unwrap();
        let (y, _) = run(
            &x,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &[0.0; 2],
            &[1.0; 2],
            BnMode::Train,
        );
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::full(Shape::new(2, 3, 3, 1), 4.2);
        let (y, _) = run(&x, &[1.7], &[-0.3], &[0.0], &[1.0], BnMode::Train);
        assert!(y.data().iter().all(|v| (*v + 0.3).abs() < 1e-12));
    }

    #[test]
    fn eval_with_batch_statistics_matches_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(Shape::new(2, 3, 5, 3), |_, _, _, _| {
            rng.gen_range(-1.0..3.0)
        })
        .unwrap();
        let gamma = [0.5, 2.0, -1.0];
        let beta = [0.1, 0.0, 0.7];
        let (train, _) = run(&x, &gamma, &beta, &[0.0; 3], &[1.0; 3], BnMode::Train);
        let (m, v): (Vec<f64>, Vec<f64>) = (0..3).map(|ch| channel_moments(&x, ch)).unzip();
        let (eval, _) = run(&x, &gamma, &beta, &m, &v, BnMode::Eval);
        assert!(train.max_abs_diff(&eval) < 1e-6);
    }

    #[test]
    fn running_average_update() {
        let mut mean = vec![0.0f64, 1.0];
        let mut var = vec![1.0f64, 1.0];
        let stats = BatchStats {
            mean: vec![1.0, 3.0],
            var: vec![2.0, 0.0],
        };
        update_running(&mut mean, &mut var, &stats, BN_MOMENTUM);
        assert!((mean[0] - 0.1).abs() < 1e-15 && (mean[1] - 1.2).abs() < 1e-15);
        assert!((var[0] - 1.1).abs() < 1e-15 && (var[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(0, 2, 2, 1)));
        let gv = g.param(Tensor::ones(Shape::vector(1)));
        let bv = g.param(Tensor::zeros(Shape::vector(1)));
        let r = batch_norm(
            &mut g,
            x,
            gv,
            bv,
            RunningStats {
                mean: &[0.0],
                var: &[1.0],
            },
            BnMode::Train,
        );
        assert!(r.is_err());
    }
}
