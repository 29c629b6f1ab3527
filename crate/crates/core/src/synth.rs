//! Synthetic datasets for demos, tests, and benchmarks.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Standard normal sample via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = 1.0 - rng.gen::<f32>();
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Gaussian blobs: `classes` random centroids in the unit cube, one sample
/// per row with isotropic noise, labels cycling through the classes. Returns
/// `(features n x dim, labels n x 1)`; a fixed seed fixes every byte.
pub fn make_blobs(n: usize, dim: usize, classes: usize, noise: f32, seed: u64) -> (Tensor, Tensor) {
    assert!(classes >= 1, "need at least one class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dim {
            features.push(centroids[class][d] + noise * gauss(&mut rng));
        }
        labels.push(class as f32);
    }
    (
        Tensor::from_vec(n, dim, features).expect("length by construction"),
        Tensor::from_vec(n, 1, labels).expect("length by construction"),
    )
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(rows: usize, cols: usize, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).expect("length by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let (xa, ya) = make_blobs(100, 5, 4, 0.1, 7);
        let (xb, yb) = make_blobs(100, 5, 4, 0.1, 7);
        assert_eq!(xa, xb);
        assert_eq!(ya, yb);
        let mut counts = [0usize; 4];
        for r in 0..100 {
            counts[ya.at(r, 0) as usize] += 1;
        }
        assert_eq!(counts, [25; 4]);
    }

    #[test]
    fn low_noise_blobs_cluster_near_centroids() {
        let (x, y) = make_blobs(400, 3, 2, 0.01, 1);
        // Rows of the same class should sit much closer together than rows
        // of different classes.
        let row = |i: usize| x.row(i);
        let dist = |a: &[f32], b: &[f32]| -> f32 {
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt()
        };
        assert_eq!(y.at(0, 0), y.at(2, 0));
        assert_ne!(y.at(0, 0), y.at(1, 0));
        assert!(dist(row(0), row(2)) < dist(row(0), row(1)));
    }

    #[test]
    fn uniform_respects_bounds() {
        let t = uniform(10, 10, -2.0, 3.0, 9);
        assert!(t.data().iter().all(|&v| (-2.0..3.0).contains(&v)));
    }
}
