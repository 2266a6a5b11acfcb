//! Weight initialisers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Shape, Tensor};

/// Uniform in `±sqrt(6 / fan_in)` (He-uniform).
pub fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, shape: Shape, fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, (6.0 / fan_in.max(1) as f64).sqrt())
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: Shape, bound: f64) -> Tensor<T> {
    let data = (0..shape.len())
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_raw(shape, data)
}

/// `(1, 1, rows, cols)` matrix with orthonormal rows (`rows ≤ cols`), from
/// Gram-Schmidt on a Gaussian draw.
pub fn orthogonal_rows<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    assert!(rows <= cols, "orthogonal_rows needs rows <= cols");
    let mut m: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while m.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        for u in &m {
            let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, u)| *x -= d * u);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            m.push(v);
        }
    }
    let data = m.into_iter().flatten().map(T::of).collect();
    Tensor::from_raw(Shape::new(1, 1, rows, cols), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = orthogonal_rows(&mut rng, 4, 16);
        let d = t.data();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..16).map(|k| d[i * 16 + k] * d[j * 16 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Tensor<f32> = fan_in_uniform(&mut rng, Shape::new(3, 3, 4, 8), 36);
        let a = (6.0f32 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }
}
