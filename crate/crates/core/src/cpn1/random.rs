//! Seeded random models for tests and benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cpn1Model, SignalPartition};
use crate::error::{Error, Result};

/// Shape of a random model. The number of equations is `n + p + q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSpec {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    /// Number of factor columns `R`.
    pub r: usize,
    /// Probability that a signal enters a given column.
    pub density: f64,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self { n: 2, m: 1, p: 1, q: 1, r: 8, density: 0.4 }
    }
}

impl RandomSpec {
    pub fn nv(&self) -> usize {
        2 * self.n + self.m + self.p + self.q
    }

    /// Draws a shape with `N_v <= max_nv` and `R <= max_r`.
    pub fn sample(rng: &mut impl Rng, max_nv: usize, max_r: usize) -> Self {
        loop {
            let spec = Self {
                n: rng.gen_range(0..=3),
                m: rng.gen_range(0..=3),
                p: rng.gen_range(0..=2),
                q: rng.gen_range(0..=2),
                r: rng.gen_range(1..=max_r.max(1)),
                density: rng.gen_range(0.2..0.7),
            };
            if spec.nv() >= 1 && spec.nv() <= max_nv && spec.n + spec.p + spec.q >= 1 {
                return spec;
            }
        }
    }
}

/// Model with random Φ and S. About half of the nonzero entries of S are
/// ±1 (plain signal factors), the others lie in `±[0.1, 1)`.
pub fn random_model(spec: &RandomSpec, rng: &mut impl Rng) -> Result<Cpn1Model> {
    if !(0.0..=1.0).contains(&spec.density) {
        return Err(Error::InvalidParameter { name: "density".into(), value: spec.density, reason: "must lie in [0, 1]" });
    }
    let states: Vec<String> = (0..spec.n).map(|i| format!("x{i}")).collect();
    let inputs: Vec<String> = (0..spec.m).map(|i| format!("u{i}")).collect();
    let outputs: Vec<String> = (0..spec.p).map(|i| format!("y{i}")).collect();
    let algebraics: Vec<String> = (0..spec.q).map(|i| format!("a{i}")).collect();
    let partition = SignalPartition::new(&states, &inputs, &outputs, &algebraics)?;
    let nv = partition.nv();
    let n_eq = spec.n + spec.p + spec.q;
    let s = DMatrix::from_fn(nv, spec.r, |_, _| {
        if !rng.gen_bool(spec.density) {
            0.0
        } else {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            if rng.gen_bool(0.5) {
                sign
            } else {
                sign * rng.gen_range(0.1..1.0)
            }
        }
    });
    let phi = DMatrix::from_fn(n_eq, spec.r, |_, _| if rng.gen_bool(0.6) { rng.gen_range(-2.0..2.0) } else { 0.0 });
    Cpn1Model::new(partition, phi, s)
}

/// Uniform point in `[-2, 2]^N_v`.
pub fn random_point(nv: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..nv).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Seeded generator used across the crate.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_model() {
        let spec = RandomSpec::default();
        let a = random_model(&spec, &mut seeded(3)).unwrap();
        let b = random_model(&spec, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nv(), spec.nv());
        assert_eq!(a.n_eq(), 4);
        assert_eq!(a.r(), 8);
    }

    #[test]
    fn sampled_shapes_respect_limits() {
        let mut rng = seeded(1);
        for _ in 0..200 {
            let s = RandomSpec::sample(&mut rng, 10, 20);
            assert!(s.nv() <= 10 && s.r <= 20 && s.r >= 1);
            random_model(&s, &mut rng).unwrap();
        }
    }
}
