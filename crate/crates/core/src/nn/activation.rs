//! Channel-wise softmax. Element-wise activations (ReLU, sigmoid, tanh)
//! are methods of [`Graph`].

use crate::autograd::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Softmax of one logit vector, stabilized by subtracting the maximum.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Softmax over the channel axis at every pixel.
pub fn softmax<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let shape = g.shape(x);
    let mut out = g.value(x).data().to_vec();
    for px in out.chunks_exact_mut(shape.c.max(1)) {
        softmax_in_place(px);
    }
    g.record(
        "softmax",
        &[x],
        Tensor::from_raw(shape, out),
        move |_: &[&Tensor<T>], y: &Tensor<T>, dy: &Tensor<T>, _: &[bool]| {
            let mut dx = vec![T::zero(); y.len()];
            let c = shape.c.max(1);
            for ((d, yv), gv) in dx
                .chunks_exact_mut(c)
                .zip(y.data().chunks_exact(c))
                .zip(dy.data().chunks_exact(c))
            {
                let dot: T = yv.iter().zip(gv).map(|(a, b)| *a * *b).sum();
                for ((o, a), b) in d.iter_mut().zip(yv).zip(gv) {
                    *o = *a * (*b - dot);
                }
            }
            vec![Some(Tensor::from_raw(shape, dx))]
        },
    )
}
