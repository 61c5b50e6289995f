use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::Elem;

/// He-uniform initialization for a weight with the given fan-in.
pub fn kaiming_uniform<T: Elem, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

/// Glorot-uniform initialization.
pub fn xavier_uniform<T: Elem, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<T: Elem, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros<T: Elem>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Elem>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}
