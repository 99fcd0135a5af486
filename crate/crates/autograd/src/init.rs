//! Seeded weight initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::{Float, Tensor};

/// Uniform on `±1/sqrt(fan_in)`, the usual default for conv and linear layers.
pub fn fan_in_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

/// Orthogonal matrix of the first axis against all remaining axes flattened.
pub fn orthogonal<T: Float>(shape: &[usize], gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let (tall, short) = (rows.max(cols), rows.min(cols));
    // Columns of a tall Gaussian matrix, orthonormalized by modified Gram-Schmidt.
    let mut q: Vec<Vec<f64>> =
        (0..short).map(|_| (0..tall).map(|_| StandardNormal.sample(rng)).collect()).collect();
    for j in 0..short {
        for i in 0..j {
            let (done, rest) = q.split_at_mut(j);
            let d: f64 = done[i].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            rest[0].iter_mut().zip(&done[i]).for_each(|(v, u)| *v -= d * u);
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows >= cols { q[c][r] } else { q[r][c] };
            data[r * cols + c] = T::lit(gain * v);
        }
    }
    Tensor::new(shape, data)
}
