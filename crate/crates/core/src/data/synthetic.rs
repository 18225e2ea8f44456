use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Cycles per window of class 0; class `k` completes `(k + 1)` times as many.
pub const SYNTHETIC_BASE_CYCLES: f64 = 3.0;

/// Largest per-sample phase offset around the class phase.
const PHASE_SPREAD: f64 = PI / 3.0;

/// Noisy sinusoid classes separated by dominant frequency.
///
/// Sample `n` of class `k`, channel `c`:
/// `a_n * sin(2 pi f_k t + phi_k + c pi / 4 + delta_n) + noise`, with
/// `f_k = (k + 1) * SYNTHETIC_BASE_CYCLES / T`, a fixed class phase
/// `phi_k = pi k / K`, amplitude `a_n ~ U(0.8, 1.2)`, phase offset
/// `delta_n ~ U(-pi/3, pi/3)` and iid `Normal(0, noise_sigma^2)` noise.
/// Classes are interleaved (`0, 1, .., K-1, 0, 1, ..`).
pub fn make_synthetic(
    n_per_class: usize,
    channels: usize,
    length: usize,
    num_classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || channels == 0 || length == 0 || num_classes == 0 {
        return Err(Error::config("synthetic dataset sizes must be at least 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let mut rng = SeedStream::new(seed).named("synthetic").rng();
    let noise = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * channels * length);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % num_classes;
        let freq = (k + 1) as f64 * SYNTHETIC_BASE_CYCLES / length as f64;
        let class_phase = PI * k as f64 / num_classes as f64;
        let amp = rng.random_range(0.8..1.2);
        let offset = rng.random_range(-PHASE_SPREAD..PHASE_SPREAD);
        for c in 0..channels {
            let phase = class_phase + c as f64 * PI / 4.0 + offset;
            for t in 0..length {
                let clean = amp * (2.0 * PI * freq * t as f64 + phase).sin();
                let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((clean + eps) as f32);
            }
        }
        labels.push(k as i64);
    }
    Dataset::new(Tensor::new(vec![n, channels, length], data)?, labels, num_classes, "synthetic")
}
