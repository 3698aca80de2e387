//! Shared fixtures for the kernel benchmarks.

use hevrl::harness::synth::{generate, Recipe};
use hevrl::{DrivingCycle, PowertrainParams};

/// Seeded synthetic cycle of `duration` seconds.
pub fn cycle(recipe: Recipe, duration: usize) -> DrivingCycle {
    generate(recipe, duration, 1, &PowertrainParams::default()).expect("synthetic cycle")
}

/// Row-stochastic `m × m` matrix with a deterministic, non-uniform pattern.
pub fn stochastic(m: usize, shift: usize) -> Vec<f64> {
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        let row = &mut d[i * m..(i + 1) * m];
        for (j, x) in row.iter_mut().enumerate() {
            *x = 1.0 + ((i * 7 + j * 3 + shift) % 11) as f64;
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    d
}
