//! Deep-supervision cross-entropy, ground-truth global attention, the KL
//! attention loss and their weighted total.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionField, AttentionKind, ContextGrid, GridMode};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::{Scalar, Shape, Tensor};

pub const CE_CLAMP: f64 = 1e-7;
pub const KL_CLAMP: f64 = 1e-8;

/// `γ¹…γ⁶` (index 0 is `γ¹`) and `γ^GA`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub saliency: [f64; 6],
    pub global_attention: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            saliency: [1.0, 0.8, 0.8, 0.5, 0.5, 0.5],
            global_attention: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .saliency
            .iter()
            .chain(std::iter::once(&self.global_attention));
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between side output `s` (values in (0,1))
/// and the ground truth, bilinearly resized to `s`'s size. `s` is clamped
/// to `[1e-7, 1 − 1e-7]`; the clamp passes no gradient.
pub fn saliency_ce_loss<T: Scalar>(g: &mut Graph<T>, s: Var, gt: &Tensor<T>) -> Result<Var> {
    let ss = g.shape(s);
    let gs = gt.shape();
    if ss.c != 1 || gs.c != 1 || ss.n != gs.n {
        return Err(Error::shape(
            "saliency_ce_loss",
            format!("prediction {ss}, ground truth {gs}"),
        ));
    }
    let target = if (gs.h, gs.w) == (ss.h, ss.w) {
        gt.clone()
    } else {
        bilinear_resize(gt, ss.h, ss.w)?
    };
    let (lo, hi) = (T::of(CE_CLAMP), T::of(1.0 - CE_CLAMP));
    let count = T::of(ss.len() as f64);
    let loss: T = g
        .value(s)
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            // Comparisons rather than max/min so a NaN prediction stays NaN.
            let p = if p < lo {
                lo
            } else if p > hi {
                hi
            } else {
                p
            };
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum::<T>()
        / count;
    let rule = move |xs: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     _: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let k = dy.item() / count;
        let d = xs[0]
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                if p < lo || p > hi {
                    T::zero()
                } else {
                    k * ((T::one() - y) / (T::one() - p) - y / p)
                }
            })
            .collect();
        vec![Some(Tensor::from_raw(xs[0].shape(), d))]
    };
    Ok(g.record("saliency_ce_loss", &[s], Tensor::scalar(loss), rule))
}

/// Binarizes the ground truth at 0.5 after resizing it to `h × w`.
pub fn binarize_resized<T: Scalar>(gt: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let r = if (gt.shape().h, gt.shape().w) == (h, w) {
        gt.clone()
    } else {
        bilinear_resize(gt, h, w)?
    };
    let half = T::of(0.5);
    Ok(r.map(|v| if v >= half { T::one() } else { T::zero() }))
}

/// Per-pixel target distributions over a global grid.
#[derive(Clone, Debug)]
pub struct GroundTruthAttention<T> {
    pub grid: ContextGrid,
    /// `(n, H, W, D)`; rows of degenerate samples are all zero.
    pub targets: Tensor<T>,
    /// Per sample: the mask has no foreground or no background on the grid.
    pub degenerate: Vec<bool>,
}

/// Background pixels attend uniformly to foreground grid cells and
/// foreground pixels to background grid cells. `mask` is binary
/// `(n, H, W, 1)`.
pub fn ground_truth_attention<T: Scalar>(
    mask: &Tensor<T>,
    grid: ContextGrid,
) -> Result<GroundTruthAttention<T>> {
    let s = mask.shape();
    if s.c != 1 || grid.mode != GridMode::Global {
        return Err(Error::shape(
            "ground_truth_attention",
            format!("mask {s} with {grid}"),
        ));
    }
    grid.check_fits(s.h, s.w)?;
    let d = grid.len();
    let half = T::of(0.5);
    let mut targets = vec![T::zero(); s.pixels() * d];
    let mut degenerate = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let on_grid: Vec<bool> = (0..d)
            .map(|i| {
                let (y, x) = grid.source(0, 0, i, s.h, s.w).expect("global");
                mask.at(n, y, x, 0) >= half
            })
            .collect();
        let fg = on_grid.iter().filter(|v| **v).count();
        let bg = d - fg;
        let degen = fg == 0 || bg == 0;
        degenerate.push(degen);
        if degen {
            continue;
        }
        let (wf, wb) = (T::one() / T::of(fg as f64), T::one() / T::of(bg as f64));
        for y in 0..s.h {
            for x in 0..s.w {
                let attend_fg = mask.at(n, y, x, 0) < half;
                let base = ((n * s.h + y) * s.w + x) * d;
                for (i, &is_fg) in on_grid.iter().enumerate() {
                    targets[base + i] = match (attend_fg, is_fg) {
                        (true, true) => wf,
                        (false, false) => wb,
                        _ => T::zero(),
                    };
                }
            }
        }
    }
    Ok(GroundTruthAttention {
        grid,
        targets: Tensor::from_raw(s.with_c(d), targets),
        degenerate,
    })
}

/// Mean over the pixels of non-degenerate samples of `KL(A ‖ α)`, with `α`
/// clamped below at 1e-8. Zero when every sample is degenerate.
pub fn global_attention_loss<T: Scalar>(
    g: &mut Graph<T>,
    att: &AttentionField,
    gt: &GroundTruthAttention<T>,
) -> Result<Var> {
    if att.kind != AttentionKind::Softmax
        || att.grid != gt.grid
        || g.shape(att.weights) != gt.targets.shape()
    {
        return Err(Error::shape(
            "global_attention_loss",
            format!(
                "attention {} over {}, targets {} over {}",
                g.shape(att.weights),
                att.grid,
                gt.targets.shape(),
                gt.grid
            ),
        ));
    }
    let s = gt.targets.shape();
    let live = gt.degenerate.iter().filter(|d| !**d).count();
    if live == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let count = T::of((live * s.h * s.w) as f64);
    let floor = T::of(KL_CLAMP);
    let targets = gt.targets.clone();
    let mut loss = T::zero();
    for (a, t) in g.value(att.weights).data().iter().zip(targets.data()) {
        if *t > T::zero() {
            loss += *t * (*t / if *a < floor { floor } else { *a }).ln();
        }
    }
    loss /= count;
    let rule = move |xs: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     _: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let k = dy.item() / count;
        let d = xs[0]
            .data()
            .iter()
            .zip(targets.data())
            .map(|(a, t)| {
                if *t > T::zero() && *a >= floor {
                    -k * *t / *a
                } else {
                    T::zero()
                }
            })
            .collect();
        vec![Some(Tensor::from_raw(xs[0].shape(), d))]
    };
    Ok(g.record(
        "global_attention_loss",
        &[att.weights],
        Tensor::scalar(loss),
        rule,
    ))
}

/// `Σ γ^i L_S^i + γ^GA L_GA`. `saliency[0]` is `L_S^1`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    saliency: &[Var; 6],
    global_attention: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut terms: Vec<(Var, T)> = saliency
        .iter()
        .zip(&w.saliency)
        .map(|(&v, &k)| (v, T::of(k)))
        .collect();
    if let Some(ga) = global_attention {
        terms.push((ga, T::of(w.global_attention)));
    }
    for (v, _) in &terms {
        if g.shape(*v) != Shape::SCALAR {
            return Err(Error::NonScalarLoss(g.shape(*v)));
        }
    }
    g.weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use crate::nn::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn ce(s: &[f64], gt: &[f64], shape: Shape) -> f64 {
        let mut g = Graph::new();
        let sv = g.constant(t(shape, s));
        let l = saliency_ce_loss(&mut g, sv, &t(shape, gt)).unwrap();
        g.value(l).item()
    }

    #[test]
    fn ce_cases() {
        let sh = Shape::new(1, 2, 2, 1);
        assert!((ce(&[0.5; 4], &[1.0, 0.0, 0.3, 1.0], sh) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0], sh) < 1e-6);
        let want = -(0.9f64.ln() * 2.0 + 0.8f64.ln() * 2.0) / 4.0;
        assert!((ce(&[0.9, 0.1, 0.8, 0.2], &[1.0, 0.0, 1.0, 0.0], sh) - want).abs() < 1e-12);
        assert!((want - 0.16425).abs() < 1e-5);
    }

    #[test]
    fn ce_resizes_ground_truth() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(Shape::new(1, 2, 2, 1), 0.5));
        let gt = Tensor::ones(Shape::new(1, 8, 8, 1));
        let l = saliency_ce_loss(&mut g, s, &gt).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn eq7_hand_cases() {
        let mask = t(Shape::new(1, 2, 2, 1), &[1.0, 0.0, 0.0, 0.0]);
        let gta = ground_truth_attention(&mask, ContextGrid::global(2, 1).unwrap()).unwrap();
        let third = 1.0 / 3.0;
        let px = |y, x| {
            (0..4)
                .map(|i| gta.targets.at(0, y, x, i))
                .collect::<Vec<_>>()
        };
        assert_eq!(px(0, 0), vec![0.0, third, third, third]);
        assert_eq!(px(0, 1), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(gta.degenerate, vec![false]);
        let empty = ground_truth_attention(
            &Tensor::<f64>::zeros(Shape::new(1, 2, 2, 1)),
            ContextGrid::global(2, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(empty.degenerate, vec![true]);
        assert!(empty.targets.data().iter().all(|v| *v == 0.0));
    }

    fn kl(alpha: &[f64], target: &[f64]) -> f64 {
        let grid = ContextGrid::global(2, 1).unwrap();
        let mut g = Graph::new();
        let a = g.constant(t(Shape::new(1, 2, 2, 4), &alpha.repeat(4)));
        let att = AttentionField::new(&g, a, grid, AttentionKind::Softmax).unwrap();
        let gt = GroundTruthAttention {
            grid,
            targets: t(Shape::new(1, 2, 2, 4), &target.repeat(4)),
            degenerate: vec![false],
        };
        let l = global_attention_loss(&mut g, &att, &gt).unwrap();
        g.value(l).item()
    }

    #[test]
    fn kl_cases() {
        let p = [0.1, 0.2, 0.3, 0.4];
        assert!(kl(&p, &p) < 1e-12);
        assert!((kl(&[0.25; 4], &[0.0, 0.0, 1.0, 0.0]) - 4f64.ln()).abs() < 1e-12);
        assert!((kl(&[0.25; 4], &[0.5, 0.5, 0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let ones: Vec<Var> = (0..7).map(|_| g.constant(Tensor::scalar(1.0))).collect();
        let ls = [ones[0], ones[1], ones[2], ones[3], ones[4], ones[5]];
        let l = total_loss(&mut g, &ls, Some(ones[6]), &LossWeights::default()).unwrap();
        assert!((g.value(l).item() - 4.3).abs() < 1e-12);
        let zero = LossWeights {
            saliency: [0.0; 6],
            global_attention: 0.0,
        };
        let l = total_loss(&mut g, &ls, Some(ones[6]), &zero).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(LossWeights {
            global_attention: -1.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sh = Shape::new(2, 3, 3, 1);
        let gt =
            Tensor::from_fn(Shape::new(2, 6, 6, 1), |_, _, _, _| rng.gen_range(0.0..1.0)).unwrap();
        let logits = Tensor::from_fn(sh, |_, _, _, _| rng.gen_range(-2.0..2.0)).unwrap();
        let err = fd_check(
            |g, v| {
                let s = g.sigmoid(v[0]);
                saliency_ce_loss(g, s, &gt)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "ce {err}");

        let grid = ContextGrid::global(3, 1).unwrap();
        let mask = Tensor::from_fn(Shape::new(2, 3, 3, 1), |n, y, x, _| {
            if (y + x + n) % 3 == 0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let gta = ground_truth_attention(&mask, grid).unwrap();
        let logits = Tensor::from_fn(Shape::new(2, 3, 3, 9), |_, _, _, _| {
            rng.gen_range(-2.0..2.0)
        })
        .unwrap();
        let err = fd_check(
            |g, v| {
                let a = softmax(g, v[0]);
                let att = AttentionField::new(g, a, grid, AttentionKind::Softmax)?;
                global_attention_loss(g, &att, &gta)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "kl {err}");
    }
}
