use crate::attention::grid::{ContextGrid, GridMode};
use crate::attention::ops::{AttentionField, AttentionKind};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{conv2d, renet, softmax, CellVars, ConvSpec};
use crate::tensor::Scalar;

/// Graph handles of an attention head's parameters.
#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    /// ReNet followed by a 1×1 conv to `D` logits.
    Global {
        renet: [CellVars; 4],
        w: Var,
        b: Var,
    },
    /// Dilated spatial conv + ReLU, then a 1×1 conv to `D` logits.
    Local {
        w_ctx: Var,
        b_ctx: Var,
        w: Var,
        b: Var,
    },
}

/// Produces per-pixel attention over `grid` from the feature map `f`.
pub fn attention_head<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    head: &HeadVars,
    grid: ContextGrid,
    kind: AttentionKind,
) -> Result<AttentionField> {
    let hidden = match *head {
        HeadVars::Global { renet: cells, .. } => {
            if grid.mode != GridMode::Global {
                return Err(Error::InvalidArgument(format!("global head with {grid}")));
            }
            renet(g, f, &cells)?
        }
        HeadVars::Local { w_ctx, b_ctx, .. } => {
            let ks = g.shape(w_ctx);
            let rf = (
                (ks.n - 1) * grid.dilation + 1,
                (ks.h - 1) * grid.dilation + 1,
            );
            let span = grid.span();
            if ks.n % 2 == 0 || ks.h % 2 == 0 || rf.0 < span.0 || rf.1 < span.1 {
                return Err(Error::shape(
                    "attention head",
                    format!(
                        "context kernel {ks} at dilation {} cannot cover {grid}",
                        grid.dilation
                    ),
                ));
            }
            let spec = ConvSpec {
                stride: 1,
                dilation: grid.dilation,
                padding: crate::nn::Padding {
                    top: ks.n / 2 * grid.dilation,
                    bottom: ks.n / 2 * grid.dilation,
                    left: ks.h / 2 * grid.dilation,
                    right: ks.h / 2 * grid.dilation,
                },
            };
            let h = conv2d(g, f, w_ctx, b_ctx, spec)?;
            g.relu(h)
        }
    };
    let (w, b) = match *head {
        HeadVars::Global { w, b, .. } | HeadVars::Local { w, b, .. } => (w, b),
    };
    let logits = conv2d(g, hidden, w, b, ConvSpec::default())?;
    if g.shape(logits).c != grid.len() {
        return Err(Error::shape(
            "attention head",
            format!(
                "{} logits for a grid of {} cells",
                g.shape(logits).c,
                grid.len()
            ),
        ));
    }
    let weights = match kind {
        AttentionKind::Softmax => softmax(g, logits),
        AttentionKind::Sigmoid => g.sigmoid(logits),
    };
    AttentionField::new(g, weights, grid, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use crate::nn::RenetParams;
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, s: Shape, a: f64) -> Tensor<f64> {
        Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-a..a)).unwrap()
    }

    fn local_head(
        g: &mut Graph<f64>,
        rng: &mut ChaCha8Rng,
        c: usize,
        hc: usize,
        d: usize,
        zero_out: bool,
    ) -> HeadVars {
        let w = if zero_out {
            Tensor::zeros(Shape::new(1, 1, hc, d))
        } else {
            rand_t(rng, Shape::new(1, 1, hc, d), 0.5)
        };
        HeadVars::Local {
            w_ctx: g.param(rand_t(rng, Shape::new(3, 3, c, hc), 0.5)),
            b_ctx: g.param(rand_t(rng, Shape::vector(hc), 0.1)),
            w: g.param(w),
            b: g.param(Tensor::zeros(Shape::vector(d))),
        }
    }

    #[test]
    fn zero_output_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = ContextGrid::local(3, 2).unwrap();
        let mut g = Graph::new();
        let f = g.constant(rand_t(&mut rng, Shape::new(1, 6, 6, 2), 1.0));
        let head = local_head(&mut g, &mut rng, 2, 4, 9, true);
        let soft = attention_head(&mut g, f, &head, grid, AttentionKind::Softmax).unwrap();
        assert!(g
            .value(soft.weights)
            .data()
            .iter()
            .all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
        let sig = attention_head(&mut g, f, &head, grid, AttentionKind::Sigmoid).unwrap();
        assert!(g.value(sig.weights).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn global_head_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = ContextGrid::auto_global(8).unwrap();
        let mut g = Graph::new();
        let f = g.constant(rand_t(&mut rng, Shape::new(1, 8, 8, 3), 1.0));
        let cells = RenetParams::<f64>::init(&mut rng, 3, 4).bind(&mut g);
        let head = HeadVars::Global {
            renet: cells,
            w: g.param(rand_t(&mut rng, Shape::new(1, 1, 8, 64), 1.0)),
            b: g.param(Tensor::zeros(Shape::vector(64))),
        };
        let att = attention_head(&mut g, f, &head, grid, AttentionKind::Softmax).unwrap();
        for px in g.value(att.weights).data().chunks(64) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn small_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let f = g.constant(rand_t(&mut rng, Shape::new(1, 6, 6, 2), 1.0));
        let head = local_head(&mut g, &mut rng, 2, 4, 25, false);
        let grid = ContextGrid::local(5, 2).unwrap();
        assert!(attention_head(&mut g, f, &head, grid, AttentionKind::Softmax).is_err());
    }

    #[test]
    fn head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = ContextGrid::local(3, 1).unwrap();
        let inputs = [
            rand_t(&mut rng, Shape::new(1, 4, 4, 2), 1.0),
            rand_t(&mut rng, Shape::new(3, 3, 2, 3), 0.5),
            rand_t(&mut rng, Shape::vector(3), 0.5),
            rand_t(&mut rng, Shape::new(1, 1, 3, 9), 0.5),
            rand_t(&mut rng, Shape::vector(9), 0.5),
            rand_t(&mut rng, Shape::new(1, 4, 4, 9), 1.0),
        ];
        let err = fd_check(
            |g, v| {
                let head = HeadVars::Local {
                    w_ctx: v[1],
                    b_ctx: v[2],
                    w: v[3],
                    b: v[4],
                };
                let att = attention_head(g, v[0], &head, grid, AttentionKind::Softmax)?;
                g.mul(att.weights, v[5])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
