use rand::Rng;

use crate::engine::{Real, Tensor};

/// Glorot (Xavier) uniform initialization: i.i.d. samples on
/// `[-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))]`.
///
/// Panics if both fans are zero.
pub fn glorot_init<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in > 0 && fan_out > 0, "glorot_init needs positive fans");
    let bound = glorot_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64c(bound * (2.0 * rng.random::<f64>() - 1.0)))
        .collect();
    Tensor::new(shape, data).expect("glorot shape")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
