//! Shared fixtures for the criterion benchmarks.

use qbsde::paths::{BrownianEnsemble, TimeGrid};

pub fn ensemble(paths: usize, steps: usize, seed: u64) -> BrownianEnsemble {
    BrownianEnsemble::simulate(TimeGrid::new(1.0, steps).unwrap(), paths, 1, seed, false).unwrap()
}
