//! Max pooling and global pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// `k × k` max pooling. Padded positions are ignored rather than read as
/// zero, so every output is the maximum of real inputs.
pub fn max_pool2d<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let s = g.shape(x);
    if k == 0 || stride == 0 || pad >= k {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d k={k} stride={stride} pad={pad}"
        )));
    }
    if s.h + 2 * pad < k || s.w + 2 * pad < k {
        return Err(Error::shape(
            "max_pool2d",
            format!("{s} smaller than window {k}"),
        ));
    }
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let os = s.with_hw(oh, ow);
    let xs = g.value(x).data();
    let mut out = vec![T::zero(); os.len()];
    let mut arg = vec![0usize; os.len()];
    for n in 0..s.n {
        for oy in 0..oh {
            let y_lo = (oy * stride).saturating_sub(pad);
            let y_hi = (oy * stride + k - pad).min(s.h);
            for ox in 0..ow {
                let x_lo = (ox * stride).saturating_sub(pad);
                let x_hi = (ox * stride + k - pad).min(s.w);
                for ch in 0..s.c {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for y in y_lo..y_hi {
                        for xx in x_lo..x_hi {
                            let i = s.index(n, y, xx, ch);
                            if xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = os.index(n, oy, ox, ch);
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    let rule = move |_: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, _: &[bool]| {
        let mut dx = vec![T::zero(); s.len()];
        for (d, &i) in dy.data().iter().zip(&arg) {
            dx[i] += *d;
        }
        vec![Some(Tensor::from_raw(s, dx))]
    };
    Ok(g.record("max_pool2d", &[x], Tensor::from_raw(os, out), rule))
}

/// Pools every channel over the whole map to `(n, 1, 1, C)`.
pub fn global_pool<T: Scalar>(g: &mut Graph<T>, x: Var, kind: PoolKind) -> Result<Var> {
    let s = g.shape(x);
    let hw = s.h * s.w;
    if hw == 0 {
        return Err(Error::InvalidArgument(
            "global pooling of an empty map".into(),
        ));
    }
    let os = Shape::new(s.n, 1, 1, s.c);
    let xs = g.value(x).data();
    let mut out = vec![T::zero(); os.len()];
    let mut arg = vec![0usize; os.len()];
    for n in 0..s.n {
        for ch in 0..s.c {
            let it = (0..hw).map(|p| (n * hw + p) * s.c + ch);
            let o = n * s.c + ch;
            match kind {
                PoolKind::Avg => out[o] = it.map(|i| xs[i]).sum::<T>() / T::of(hw as f64),
                PoolKind::Max => {
                    let (i, v) = it.map(|i| (i, xs[i])).fold((0, T::neg_infinity()), |a, b| {
                        if b.1 > a.1 {
                            b
                        } else {
                            a
                        }
                    });
                    out[o] = v;
                    arg[o] = i;
                }
            }
        }
    }
    let rule = move |_: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, _: &[bool]| {
        let mut dx = vec![T::zero(); s.len()];
        let inv = T::one() / T::of(hw as f64);
        for n in 0..s.n {
            for ch in 0..s.c {
                let d = dy.data()[n * s.c + ch];
                match kind {
                    PoolKind::Avg => (0..hw).for_each(|p| dx[(n * hw + p) * s.c + ch] += d * inv),
                    PoolKind::Max => dx[arg[n * s.c + ch]] += d,
                }
            }
        }
        vec![Some(Tensor::from_raw(s, dx))]
    };
    Ok(g.record("global_pool", &[x], Tensor::from_raw(os, out), rule))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_stride_two() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::from_f64(
                Shape::new(1, 2, 4, 1),
                &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, -1.0],
            )
            .unwrap(),
        );
        let y = max_pool2d(&mut g, x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 8.0]);
    }

    #[test]
    fn same_size_max_pool_ignores_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 3, 3, 1), -2.0));
        let y = max_pool2d(&mut g, x, 3, 1, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 3, 3, 1));
        assert!(g.value(y).data().iter().all(|v| *v == -2.0));
    }

    #[test]
    fn global_average_and_max() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::from_f64(
                Shape::new(1, 2, 2, 2),
                &[1.0, 0.0, 2.0, -1.0, 3.0, -2.0, 6.0, -3.0],
            )
            .unwrap(),
        );
        let a = global_pool(&mut g, x, PoolKind::Avg).unwrap();
        let m = global_pool(&mut g, x, PoolKind::Max).unwrap();
        assert_eq!(g.value(a).data(), &[3.0, -1.5]);
        assert_eq!(g.value(m).data(), &[6.0, 0.0]);
    }
}
