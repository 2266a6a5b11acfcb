use crate::attention::grid::{ContextGrid, GridMode};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::conv::{im2col_for, lowered_conv};
use crate::nn::ConvSpec;
use crate::nn::PoolKind;
use crate::tensor::{gemm, Mat, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Per-pixel softmax over the grid; weights pool features.
    Softmax,
    /// Independent sigmoid gates; weights scale convolution taps.
    Sigmoid,
}

/// Per-pixel weights `(n, H, W, D)` over a context grid.
#[derive(Clone, Copy, Debug)]
pub struct AttentionField {
    pub weights: Var,
    pub grid: ContextGrid,
    pub kind: AttentionKind,
}

impl AttentionField {
    pub fn new<T: Scalar>(
        g: &Graph<T>,
        weights: Var,
        grid: ContextGrid,
        kind: AttentionKind,
    ) -> Result<Self> {
        let s = g.shape(weights);
        if s.c != grid.len() {
            return Err(Error::shape(
                "attention field",
                format!(
                    "{} weights per pixel for a {} grid of {} cells",
                    s.c,
                    grid,
                    grid.len()
                ),
            ));
        }
        grid.check_fits(s.h, s.w)?;
        Ok(AttentionField {
            weights,
            grid,
            kind,
        })
    }

    /// Weights of one pixel as `f64`, in grid order.
    pub fn pixel<T: Scalar>(&self, g: &Graph<T>, n: usize, y: usize, x: usize) -> Vec<f64> {
        let t = g.value(self.weights);
        let d = self.grid.len();
        let base = t.shape().index(n, y, x, 0);
        t.data()[base..base + d]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    }
}

fn check_pair(op: &'static str, fs: Shape, ws: Shape, grid: &ContextGrid) -> Result<()> {
    if (ws.n, ws.h, ws.w) != (fs.n, fs.h, fs.w) || ws.c != grid.len() {
        return Err(Error::shape(
            op,
            format!(
                "features {fs}, weights {ws}, grid {grid} ({} cells)",
                grid.len()
            ),
        ));
    }
    grid.check_fits(fs.h, fs.w)
}

/// Attention-weighted pooling: every output pixel is `Σ_i α_i · f(src_i)`
/// over the grid's source pixels. Off-map local taps read zero features
/// and keep their weight.
pub fn attend_pool<T: Scalar>(g: &mut Graph<T>, f: Var, att: &AttentionField) -> Result<Var> {
    if att.kind != AttentionKind::Softmax {
        return Err(Error::InvalidArgument(
            "attend_pool needs softmax attention".into(),
        ));
    }
    weighted_gather(g, f, att.weights, att.grid)
}

pub(crate) fn weighted_gather<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    alpha: Var,
    grid: ContextGrid,
) -> Result<Var> {
    let (fs, ws) = (g.shape(f), g.shape(alpha));
    check_pair("attend_pool", fs, ws, &grid)?;
    let out = match grid.mode {
        GridMode::Global => global_forward(g.value(f), g.value(alpha), &grid),
        GridMode::Local => local_forward(g.value(f), g.value(alpha), &grid),
    };
    let rule = move |xs: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     needs: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let (df, da) = match grid.mode {
            GridMode::Global => global_backward(xs[0], xs[1], dy, &grid, needs),
            GridMode::Local => local_backward(xs[0], xs[1], dy, &grid, needs),
        };
        vec![df, da]
    };
    Ok(g.record("attend_pool", &[f, alpha], out, rule))
}

/// Flat pixel offsets of the global grid's source pixels within one image.
fn global_sources(grid: &ContextGrid, w: usize) -> Vec<usize> {
    (0..grid.len())
        .map(|i| {
            let (sy, sx) = grid
                .source(0, 0, i, usize::MAX, usize::MAX)
                .expect("global sources always exist");
            sy * w + sx
        })
        .collect()
}

fn global_forward<T: Scalar>(f: &Tensor<T>, alpha: &Tensor<T>, grid: &ContextGrid) -> Tensor<T> {
    let s = f.shape();
    let (hw, c, d) = (s.h * s.w, s.c, grid.len());
    let srcs = global_sources(grid, s.w);
    let mut out = vec![T::zero(); s.len()];
    let mut fsrc = vec![T::zero(); d * c];
    for n in 0..s.n {
        let fimg = &f.data()[n * hw * c..(n + 1) * hw * c];
        for (i, &p) in srcs.iter().enumerate() {
            fsrc[i * c..(i + 1) * c].copy_from_slice(&fimg[p * c..(p + 1) * c]);
        }
        gemm(
            Mat::new(&alpha.data()[n * hw * d..(n + 1) * hw * d], hw, d),
            Mat::new(&fsrc, d, c),
            &mut out[n * hw * c..(n + 1) * hw * c],
            false,
        );
    }
    Tensor::from_raw(s, out)
}

fn global_backward<T: Scalar>(
    f: &Tensor<T>,
    alpha: &Tensor<T>,
    dy: &Tensor<T>,
    grid: &ContextGrid,
    needs: &[bool],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = f.shape();
    let (hw, c, d) = (s.h * s.w, s.c, grid.len());
    let srcs = global_sources(grid, s.w);
    let mut df = needs[0].then(|| vec![T::zero(); s.len()]);
    let mut da = needs[1].then(|| vec![T::zero(); alpha.len()]);
    let mut buf = vec![T::zero(); d * c];
    for n in 0..s.n {
        let dyn_ = &dy.data()[n * hw * c..(n + 1) * hw * c];
        let an = &alpha.data()[n * hw * d..(n + 1) * hw * d];
        if let Some(df) = df.as_mut() {
            gemm(
                Mat::new(an, hw, d).t(),
                Mat::new(dyn_, hw, c),
                &mut buf,
                false,
            );
            let dimg = &mut df[n * hw * c..(n + 1) * hw * c];
            for (i, &p) in srcs.iter().enumerate() {
                dimg[p * c..(p + 1) * c]
                    .iter_mut()
                    .zip(&buf[i * c..(i + 1) * c])
                    .for_each(|(o, v)| *o += *v);
            }
        }
        if let Some(da) = da.as_mut() {
            let fimg = &f.data()[n * hw * c..(n + 1) * hw * c];
            for (i, &p) in srcs.iter().enumerate() {
                buf[i * c..(i + 1) * c].copy_from_slice(&fimg[p * c..(p + 1) * c]);
            }
            gemm(
                Mat::new(dyn_, hw, c),
                Mat::new(&buf, d, c).t(),
                &mut da[n * hw * d..(n + 1) * hw * d],
                false,
            );
        }
    }
    (
        df.map(|v| Tensor::from_raw(s, v)),
        da.map(|v| Tensor::from_raw(alpha.shape(), v)),
    )
}

fn local_forward<T: Scalar>(f: &Tensor<T>, alpha: &Tensor<T>, grid: &ContextGrid) -> Tensor<T> {
    let s = f.shape();
    let (c, d) = (s.c, grid.len());
    let (fd, ad) = (f.data(), alpha.data());
    let mut out = vec![T::zero(); s.len()];
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let p = (n * s.h + y) * s.w + x;
                let o = &mut out[p * c..(p + 1) * c];
                for i in 0..d {
                    let Some((sy, sx)) = grid.source(y, x, i, s.h, s.w) else {
                        continue;
                    };
                    let a = ad[p * d + i];
                    let src = &fd[((n * s.h + sy) * s.w + sx) * c..][..c];
                    o.iter_mut().zip(src).for_each(|(o, v)| *o += a * *v);
                }
            }
        }
    }
    Tensor::from_raw(s, out)
}

fn local_backward<T: Scalar>(
    f: &Tensor<T>,
    alpha: &Tensor<T>,
    dy: &Tensor<T>,
    grid: &ContextGrid,
    needs: &[bool],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = f.shape();
    let (c, d) = (s.c, grid.len());
    let (fd, ad, dyd) = (f.data(), alpha.data(), dy.data());
    let mut df = needs[0].then(|| vec![T::zero(); s.len()]);
    let mut da = needs[1].then(|| vec![T::zero(); alpha.len()]);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let p = (n * s.h + y) * s.w + x;
                let g = &dyd[p * c..(p + 1) * c];
                for i in 0..d {
                    let Some((sy, sx)) = grid.source(y, x, i, s.h, s.w) else {
                        continue;
                    };
                    let q = ((n * s.h + sy) * s.w + sx) * c;
                    if let Some(df) = df.as_mut() {
                        let a = ad[p * d + i];
                        df[q..q + c]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(o, v)| *o += a * *v);
                    }
                    if let Some(da) = da.as_mut() {
                        da[p * d + i] = fd[q..q + c].iter().zip(g).map(|(a, b)| *a * *b).sum();
                    }
                }
            }
        }
    }
    (
        df.map(|v| Tensor::from_raw(s, v)),
        da.map(|v| Tensor::from_raw(alpha.shape(), v)),
    )
}

/// Attention convolution: per pixel `Σ_i g_i · f(src_i) · W_i + b`, the
/// kernel taps sharing the gate grid's geometry.
pub fn attend_conv<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    gates: &AttentionField,
    w: Var,
    b: Var,
) -> Result<Var> {
    if gates.kind != AttentionKind::Sigmoid {
        return Err(Error::InvalidArgument(
            "attend_conv needs sigmoid gates".into(),
        ));
    }
    let grid = gates.grid;
    let ws = g.shape(w);
    if grid.mode != GridMode::Local || (ws.n, ws.h) != (grid.grid_h, grid.grid_w) {
        return Err(Error::shape(
            "attend_conv",
            format!("kernel {ws} against {grid}"),
        ));
    }
    check_pair("attend_conv", g.shape(f), g.shape(gates.weights), &grid)?;
    let spec = ConvSpec {
        stride: 1,
        dilation: grid.dilation,
        padding: crate::nn::Padding {
            top: grid.grid_h / 2 * grid.dilation,
            bottom: grid.grid_h / 2 * grid.dilation,
            left: grid.grid_w / 2 * grid.dilation,
            right: grid.grid_w / 2 * grid.dilation,
        },
    };
    let geo = im2col_for(g.shape(f), ws, spec)?;
    lowered_conv(g, "attend_conv", f, Some(gates.weights), w, b, geo)
}

/// Unweighted pooling over a context grid: the mean (off-map taps count
/// as zeros) or the maximum over on-map taps.
pub fn grid_pool<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    grid: ContextGrid,
    kind: PoolKind,
) -> Result<Var> {
    let fs = g.shape(f);
    grid.check_fits(fs.h, fs.w)?;
    match kind {
        PoolKind::Avg => {
            let uniform = g.constant(Tensor::full(
                fs.with_c(grid.len()),
                T::one() / T::of(grid.len() as f64),
            ));
            weighted_gather(g, f, uniform, grid)
        }
        PoolKind::Max => grid_max(g, f, grid),
    }
}

fn grid_max<T: Scalar>(g: &mut Graph<T>, f: Var, grid: ContextGrid) -> Result<Var> {
    let fv = g.value(f);
    let s = fv.shape();
    let c = s.c;
    let mut out = vec![T::neg_infinity(); s.len()];
    let mut arg = vec![usize::MAX; s.len()];
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let p = (n * s.h + y) * s.w + x;
                for i in 0..grid.len() {
                    let Some((sy, sx)) = grid.source(y, x, i, s.h, s.w) else {
                        continue;
                    };
                    let q = ((n * s.h + sy) * s.w + sx) * c;
                    for k in 0..c {
                        if fv.data()[q + k] > out[p * c + k] {
                            out[p * c + k] = fv.data()[q + k];
                            arg[p * c + k] = q + k;
                        }
                    }
                }
            }
        }
    }
    if arg.contains(&usize::MAX) {
        return Err(Error::shape(
            "grid_pool",
            format!("{grid} leaves pixels with no on-map tap"),
        ));
    }
    let rule = move |xs: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     _: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let mut df = vec![T::zero(); xs[0].len()];
        for (j, &q) in arg.iter().enumerate() {
            df[q] += dy.data()[j];
        }
        vec![Some(Tensor::from_raw(xs[0].shape(), df))]
    };
    Ok(g.record("grid_max_pool", &[f], Tensor::from_raw(s, out), rule))
}

/// Per-output-element loop evaluating the pooling sum directly; the
/// baseline for benchmarking [`attend_pool`].
pub fn attend_pool_reference<T: Scalar>(
    f: &Tensor<T>,
    alpha: &Tensor<T>,
    grid: &ContextGrid,
) -> Result<Tensor<T>> {
    let (s, ws) = (f.shape(), alpha.shape());
    check_pair("attend_pool_reference", s, ws, grid)?;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                for k in 0..s.c {
                    let mut acc = T::zero();
                    for i in 0..grid.len() {
                        if let Some((sy, sx)) = grid.source(y, x, i, s.h, s.w) {
                            acc += alpha.at(n, y, x, i) * f.at(n, sy, sx, k);
                        }
                    }
                    let idx = s.index(n, y, x, k);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use crate::nn::activation::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
        Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn one_hot_is_a_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_t(&mut rng, Shape::new(1, 5, 5, 2));
        let grid = ContextGrid::global(3, 2).unwrap();
        let alpha = Tensor::from_fn(
            Shape::new(1, 5, 5, 9),
            |_, _, _, c| if c == 5 { 1.0 } else { 0.0 },
        )
        .unwrap();
        let mut g = Graph::new();
        let (fv, av) = (g.constant(f.clone()), g.constant(alpha));
        let att = AttentionField::new(&g, av, grid, AttentionKind::Softmax).unwrap();
        let out = attend_pool(&mut g, fv, &att).unwrap();
        // index 5 = row 1, col 2 → pixel (2, 4)
        for y in 0..5 {
            for x in 0..5 {
                for k in 0..2 {
                    assert_eq!(g.value(out).at(0, y, x, k), f.at(0, 2, 4, k));
                }
            }
        }
    }

    #[test]
    fn reference_matches_on_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for grid in [
            ContextGrid::global(3, 3).unwrap(),
            ContextGrid::local(3, 2).unwrap(),
        ] {
            let f = rand_t(&mut rng, Shape::new(2, 7, 7, 3));
            let a = rand_t(&mut rng, Shape::new(2, 7, 7, 9));
            let mut g = Graph::new();
            let (fv, av) = (g.constant(f.clone()), g.constant(a.clone()));
            let out = weighted_gather(&mut g, fv, av, grid).unwrap();
            let want = attend_pool_reference(&f, &a, &grid).unwrap();
            assert!(g.value(out).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn pool_gradients_through_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for grid in [
            ContextGrid::global(2, 3).unwrap(),
            ContextGrid::local(3, 1).unwrap(),
        ] {
            let f = rand_t(&mut rng, Shape::new(1, 4, 4, 2));
            let logits = rand_t(&mut rng, Shape::new(1, 4, 4, grid.len()));
            let err = fd_check(
                |g, v| {
                    let a = softmax(g, v[1]);
                    let att = AttentionField::new(g, a, grid, AttentionKind::Softmax)?;
                    let y = attend_pool(g, v[0], &att)?;
                    g.mul(y, v[0])
                },
                &[f, logits],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{grid}: {err}");
        }
    }

    #[test]
    fn conv_gradients_through_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = ContextGrid::local(3, 2).unwrap();
        let inputs = [
            rand_t(&mut rng, Shape::new(1, 4, 4, 2)),
            rand_t(&mut rng, Shape::new(1, 4, 4, 9)),
            rand_t(&mut rng, Shape::new(3, 3, 2, 3)),
            rand_t(&mut rng, Shape::vector(3)),
        ];
        let err = fd_check(
            |g, v| {
                let gates = g.sigmoid(v[1]);
                let att = AttentionField::new(g, gates, grid, AttentionKind::Sigmoid)?;
                let y = attend_conv(g, v[0], &att, v[2], v[3])?;
                Ok(g.tanh(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grid_pool_max_and_avg() {
        let f = Tensor::<f64>::from_fn(Shape::new(1, 3, 3, 1), |_, y, x, _| (y * 3 + x) as f64)
            .unwrap();
        let mut g = Graph::new();
        let fv = g.param(f);
        let grid = ContextGrid::local(3, 1).unwrap();
        let mx = grid_pool(&mut g, fv, grid, PoolKind::Max).unwrap();
        assert_eq!(
            g.value(mx).data(),
            &[4.0, 5.0, 5.0, 7.0, 8.0, 8.0, 7.0, 8.0, 8.0]
        );
        let av = grid_pool(&mut g, fv, grid, PoolKind::Avg).unwrap();
        assert!((g.value(av).at(0, 1, 1, 0) - 4.0).abs() < 1e-12);
        // corner: (0 + 1 + 3 + 4) / 9, off-map taps contribute zero
        assert!((g.value(av).at(0, 0, 0, 0) - 8.0 / 9.0).abs() < 1e-12);
        let s = g.sum(mx);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(fv).data(),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 4.0]
        );
    }

    #[test]
    fn kind_and_geometry_checks() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(Shape::new(1, 4, 4, 2)));
        let a = g.constant(Tensor::zeros(Shape::new(1, 4, 4, 9)));
        let grid = ContextGrid::local(3, 1).unwrap();
        let sig = AttentionField::new(&g, a, grid, AttentionKind::Sigmoid).unwrap();
        assert!(attend_pool(&mut g, f, &sig).is_err());
        let soft = AttentionField {
            kind: AttentionKind::Softmax,
            ..sig
        };
        let w = g.constant(Tensor::zeros(Shape::new(3, 3, 2, 1)));
        let b = g.constant(Tensor::zeros(Shape::vector(1)));
        assert!(attend_conv(&mut g, f, &soft, w, b).is_err());
        assert!(AttentionField::new(
            &g,
            a,
            ContextGrid::local(5, 1).unwrap(),
            AttentionKind::Softmax
        )
        .is_err());
        let w5 = g.constant(Tensor::zeros(Shape::new(5, 5, 2, 1)));
        assert!(attend_conv(&mut g, f, &sig, w5, b).is_err());
    }
}
