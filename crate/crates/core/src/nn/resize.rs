//! Bilinear resampling with align-corners sampling:
//! `src = dst · (in − 1)/(out − 1)`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per output coordinate: lower source index, upper source index and the
/// weight of the upper one.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resizes every channel of `x` to `out_h × out_w`.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "bilinear target size must be >= 1".into(),
        ));
    }
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::InvalidArgument(
            "bilinear resize of an empty map".into(),
        ));
    }
    let os = s.with_hw(out_h, out_w);
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (ty, tx) = (axis_taps(s.h, out_h), axis_taps(s.w, out_w));
    let c = s.c;
    let xs = x.data();
    let mut out = vec![T::zero(); os.len()];
    for n in 0..s.n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let o = &mut out[os.index(n, oy, ox, 0)..][..c];
                let p00 = &xs[s.index(n, y0, x0, 0)..][..c];
                let p01 = &xs[s.index(n, y0, x1, 0)..][..c];
                let p10 = &xs[s.index(n, y1, x0, 0)..][..c];
                let p11 = &xs[s.index(n, y1, x1, 0)..][..c];
                for ch in 0..c {
                    o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
                }
            }
        }
    }
    Ok(Tensor::from_raw(os, out))
}

/// Differentiable [`bilinear_resize`].
pub fn bilinear_upsample<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let s = g.shape(x);
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(x);
    }
    let out = bilinear_resize(g.value(x), out_h, out_w)?;
    let rule = move |_: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     _: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let os = dy.shape();
        let (ty, tx) = (axis_taps(s.h, out_h), axis_taps(s.w, out_w));
        let c = s.c;
        let mut dx = vec![T::zero(); s.len()];
        for n in 0..s.n {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let d = &dy.data()[os.index(n, oy, ox, 0)..][..c];
                    let taps = [
                        (y0, x0, (T::one() - fy) * (T::one() - fx)),
                        (y0, x1, (T::one() - fy) * fx),
                        (y1, x0, fy * (T::one() - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (y, x, w) in taps {
                        let base = s.index(n, y, x, 0);
                        dx[base..base + c]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(o, v)| *o += w * *v);
                    }
                }
            }
        }
        vec![Some(Tensor::from_raw(s, dx))]
    };
    Ok(g.record("bilinear_upsample", &[x], out, rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn constant_maps_stay_constant() {
        let x = Tensor::full(Shape::new(1, 3, 5, 2), 0.4);
        for (h, w) in [(1, 1), (7, 2), (12, 13)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|v| (*v - 0.4f64).abs() < 1e-15));
        }
    }

    #[test]
    fn single_pixel_fills_output() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 1, 1), &[2.5]).unwrap();
        let y = bilinear_resize(&x, 3, 4).unwrap();
        assert_eq!(y.data(), &[2.5f64; 12]);
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 2, 2, 1), &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        // v(y, x) = 2·y/3 + x/3 on the 4×4 grid.
        for oy in 0..4 {
            for ox in 0..4 {
                let expected = 2.0 * oy as f64 / 3.0 + ox as f64 / 3.0;
                assert!((y.at(0, oy, ox, 0) - expected).abs() < 1e-15);
            }
        }
        assert_eq!(
            [
                y.at(0, 0, 0, 0),
                y.at(0, 0, 3, 0),
                y.at(0, 3, 0, 0),
                y.at(0, 3, 3, 0)
            ],
            [0.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn zero_target_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 1));
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }
}
