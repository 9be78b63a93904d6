//! Seeded randomness.
//!
//! Everything random in this crate flows through a [`SeedRng`] constructed
//! from an explicit 64-bit seed, so identical seeds give identical parameter
//! draws, noise, batch orders and lambda samples on every platform.

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type SeedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a parent seed and a stream label.
pub fn substream(seed: u64, label: u64) -> SeedRng {
    let mixed = seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Uniform draw in (-0.5, 0.5), i.i.d. per element.
pub fn uniform_noise(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    Tensor::new(shape, data).expect("noise is finite")
}

/// Standard normal draws via Box-Muller, scaled by `std`.
pub fn normal(rng: &mut SeedRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random::<f64>();
        let r = crate::math::sqrt(-2.0 * crate::math::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        data.push(r * libm::cos(theta) * std);
        if data.len() < n {
            data.push(r * libm::sin(theta) * std);
        }
    }
    Tensor::new(shape, data).expect("normal draws are finite")
}

/// Uniform draws in [lo, hi).
pub fn uniform(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape, data).expect("uniform draws are finite")
}

/// `count` distinct integers drawn uniformly from `lo..=hi` without
/// replacement (partial Fisher-Yates over the candidate range).
pub fn sample_distinct(rng: &mut SeedRng, lo: u32, hi: u32, count: usize) -> Vec<u32> {
    let span = (hi - lo + 1) as usize;
    assert!(count <= span, "cannot draw {count} distinct values from {span}");
    let mut pool: Vec<u32> = (lo..=hi).collect();
    for i in 0..count {
        let j = rng.random_range(i..span);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}
