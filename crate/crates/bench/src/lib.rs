//! Configurations shared by the benchmarks.

use wesper::{SpectralDistribution, WeightDistribution};

/// Population spectrum `{1: 0.2, 3: 0.4, 10: 0.4}`.
pub fn three_atoms() -> SpectralDistribution {
    SpectralDistribution::new(vec![1.0, 3.0, 10.0], vec![0.2, 0.4, 0.4]).expect("valid spectrum")
}

pub fn uniform_weights() -> WeightDistribution {
    WeightDistribution::uniform(1.0).expect("valid weights")
}

/// Two weight atoms producing an extra spectral gap.
pub fn two_dirac_weights() -> WeightDistribution {
    WeightDistribution::dirac(vec![0.5, 40.5], vec![79.0 / 80.0, 1.0 / 80.0]).expect("valid weights")
}
