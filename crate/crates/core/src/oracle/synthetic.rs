use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::WeightTensor;

/// Weights whose row means are normally distributed and whose rows are nearly flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    /// Mean of the row-mean distribution.
    pub mean: f64,
    /// Standard deviation of the row-mean distribution.
    pub std: f64,
    /// Standard deviation of the per-element noise within a row.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        SyntheticSpec {
            rows,
            cols,
            mean: 0.0,
            std: 1.0,
            noise: 0.05,
            seed,
        }
    }

    pub fn with_noise(self, noise: f64) -> Self {
        SyntheticSpec { noise, ..self }
    }

    pub fn with_row_distribution(self, mean: f64, std: f64) -> Self {
        SyntheticSpec { mean, std, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SyntheticSpec { seed, ..self }
    }
}

/// `w[i][j] = m[i] + e[i][j]` with `m[i] ~ N(mean, std)` and `e[i][j] ~ N(0, noise)`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<WeightTensor> {
    let bad = |e: rand_distr::NormalError| Error::Config(format!("synthetic spec {spec:?}: {e}"));
    if !(spec.std >= 0.0 && spec.noise >= 0.0 && spec.mean.is_finite()) {
        return Err(Error::Config(format!(
            "synthetic spec {spec:?}: deviations must be non-negative and the mean finite"
        )));
    }
    let row_dist = Normal::new(spec.mean, spec.std).map_err(bad)?;
    let noise = Normal::new(0.0, spec.noise).map_err(bad)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.rows * spec.cols);
    for _ in 0..spec.rows {
        let m = row_dist.sample(&mut rng);
        for _ in 0..spec.cols {
            data.push((m + noise.sample(&mut rng)) as f32);
        }
    }
    WeightTensor::new(spec.rows, spec.cols, data, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_rows_are_constant() {
        let w = gen_synthetic(&SyntheticSpec::new(16, 8, 3).with_noise(0.0)).unwrap();
        for r in 0..16 {
            assert!(w.row(r).iter().all(|&x| x == w.row(r)[0]));
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SyntheticSpec::new(8, 8, 42);
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        assert_ne!(
            gen_synthetic(&spec).unwrap(),
            gen_synthetic(&spec.with_seed(43)).unwrap()
        );
    }

    #[test]
    fn negative_noise_is_rejected() {
        assert!(gen_synthetic(&SyntheticSpec::new(2, 2, 0).with_noise(-1.0)).is_err());
    }
}
