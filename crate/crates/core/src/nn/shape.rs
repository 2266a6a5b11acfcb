//! Channel concatenation and spatial transposition.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    let first = g.shape(
        *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?,
    );
    let widths: Vec<usize> = parts.iter().map(|&v| g.shape(v).c).collect();
    for &v in parts {
        let s = g.shape(v);
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
        }
    }
    let total: usize = widths.iter().sum();
    let os = first.with_c(total);
    let mut out = Vec::with_capacity(os.len());
    for p in 0..first.pixels() {
        for (&v, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&g.value(v).data()[p * c..(p + 1) * c]);
        }
    }
    let rule = move |xs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, needs: &[bool]| {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(xs.len());
        for (i, &c) in widths.iter().enumerate() {
            if needs[i] {
                let mut d = Vec::with_capacity(first.pixels() * c);
                for px in dy.data().chunks_exact(total) {
                    d.extend_from_slice(&px[offset..offset + c]);
                }
                grads.push(Some(Tensor::from_raw(xs[i].shape(), d)));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    };
    Ok(g.record("concat_channels", parts, Tensor::from_raw(os, out), rule))
}

fn swap_hw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.w, s.h, s.c);
    let mut out = vec![T::zero(); s.len()];
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let src = s.index(n, y, xx, 0);
                let dst = os.index(n, xx, y, 0);
                out[dst..dst + s.c].copy_from_slice(&x.data()[src..src + s.c]);
            }
        }
    }
    Tensor::from_raw(os, out)
}

/// Swaps the height and width axes.
pub fn transpose_hw<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let out = swap_hw(g.value(x));
    g.record(
        "transpose_hw",
        &[x],
        out,
        |_: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, _: &[bool]| vec![Some(swap_hw(dy))],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_interleaves_per_pixel() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(Shape::new(1, 1, 2, 1), &[1.0, 2.0]).unwrap());
        let b = g.param(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = concat_channels(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(
            Tensor::from_f64(Shape::new(1, 1, 2, 3), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let p = g.mul(c, w).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).data(), &[1.0, 4.0]);
        assert_eq!(grads.get(b).data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::from_fn(Shape::new(2, 3, 4, 2), |n, y, x, c| {
                (n * 100 + y * 10 + x) as f64 + c as f64 * 0.5
            })
            .unwrap(),
        );
        let t = transpose_hw(&mut g, x);
        assert_eq!(g.shape(t), Shape::new(2, 4, 3, 2));
        assert_eq!(g.value(t).at(1, 3, 2, 1), g.value(x).at(1, 2, 3, 1));
        let tt = transpose_hw(&mut g, t);
        assert_eq!(g.value(tt), g.value(x));
    }
}
