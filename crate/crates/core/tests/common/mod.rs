#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sustain_core::Vector;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    Vector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        scale * z
    })
}

pub fn bits(v: &Vector) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Prints the one-line verdict for an acceptance criterion.
pub fn verdict(number: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number:>2} [{name}]: {status} ({detail})");
}
