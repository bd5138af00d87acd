//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wcaps_core::{Element, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1)`.
pub fn random_tensor<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// Images in `[0, 1)` with labels cycling through the classes.
pub fn image_batch(batch: usize, shape: (usize, usize, usize), classes: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut r = rng(seed);
    let (c, h, w) = shape;
    let data: Vec<f32> = (0..batch * c * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
    let images = Tensor::new(&[batch, c, h, w], data).expect("shape matches data");
    (images, (0..batch).map(|i| i % classes).collect())
}
