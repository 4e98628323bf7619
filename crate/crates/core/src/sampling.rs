//! Gumbel-Softmax relaxation of categorical choices and temperature annealing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_lastdim, Tape, Var};

/// Exponential decay from `initial` to `minimum` over the run, clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub minimum: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            initial: 3.0,
            minimum: 0.03,
        }
    }
}

impl TemperatureSchedule {
    /// Temperature at `epoch` of a run lasting `total_epochs`.
    pub fn anneal(&self, epoch: usize, total_epochs: usize) -> f64 {
        if total_epochs == 0 {
            return self.minimum;
        }
        let t = (epoch as f64 / total_epochs as f64).min(1.0);
        let lambda = self.initial * (self.minimum / self.initial).powf(t);
        lambda.max(self.minimum)
    }
}

/// Seeded Gumbel noise source with the current temperature.
#[derive(Clone, Debug)]
pub struct GumbelSampler {
    rng: ChaCha8Rng,
    lambda: f64,
}

impl GumbelSampler {
    pub fn new(seed: u64, lambda: f64) -> Result<Self> {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            lambda: 1.0,
        };
        s.set_lambda(lambda)?;
        Ok(s)
    }

    /// Resumes from a captured generator state.
    pub fn from_rng(rng: ChaCha8Rng, lambda: f64) -> Result<Self> {
        let mut s = Self { rng, lambda: 1.0 };
        s.set_lambda(lambda)?;
        Ok(s)
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(
                "GumbelSampler",
                format!("temperature must be positive, got {lambda}"),
            ));
        }
        self.lambda = lambda;
        Ok(())
    }

    /// `G = -ln(-ln U)`, `U ~ Uniform(0, 1)` exclusive of both ends.
    pub fn noise(&mut self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|_| {
                let u: f64 = Open01.sample(&mut self.rng);
                -(-u.ln()).ln()
            })
            .collect()
    }

    /// A sampler on an independent stream derived from this one's seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = self.rng.clone();
        rng.set_stream(stream);
        rng.set_word_pos(0);
        Self {
            rng,
            lambda: self.lambda,
        }
    }
}

/// Softened one-hot sample for one logit row, outside the tape.
pub fn gumbel_softmax(log_alpha: &[f64], sampler: &mut GumbelSampler) -> Result<Vec<f64>> {
    check_logits(log_alpha)?;
    let noise = sampler.noise(log_alpha.len());
    gumbel_softmax_with_noise(log_alpha, &noise, sampler.lambda)
}

pub fn gumbel_softmax_with_noise(log_alpha: &[f64], noise: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_logits(log_alpha)?;
    let z: Vec<f64> = log_alpha.iter().zip(noise).map(|(a, g)| (a + g) / lambda).collect();
    softmax_lastdim(&z)
}

fn check_logits(log_alpha: &[f64]) -> Result<()> {
    if log_alpha.len() < 2 {
        return Err(Error::invalid("gumbel_softmax", "need at least two categories"));
    }
    if log_alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax input"));
    }
    Ok(())
}

/// Differentiable Gumbel-Softmax over every row of an `[R x K x 1 x 1]` logit
/// variable. The noise is a constant; gradients reach the logits through the
/// softmax only. Single-category rows yield a constant mask of one.
pub fn gumbel_softmax_rows(tape: &mut Tape, logits: Var, sampler: &mut GumbelSampler) -> Result<Var> {
    let s = tape.shape(logits);
    if s.c == 1 {
        return tape.constant(s, vec![1.0; s.numel()]);
    }
    let noise = sampler.noise(s.numel());
    let z = tape.add_const(logits, &noise)?;
    let z = tape.scale(z, 1.0 / sampler.lambda)?;
    tape.softmax_rows(z)
}

/// Plain softmax of the logits, used for expectations and logging.
pub fn expected_mask(log_alpha: &[f64]) -> Result<Vec<f64>> {
    softmax_lastdim(log_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.anneal(0, 60), 3.0);
        assert!((s.anneal(60, 60) - 0.03).abs() < 1e-15);
        assert!((s.anneal(30, 60) - 0.3).abs() < 1e-9);
        assert!(s.anneal(500, 60) >= 0.03);
        let mut prev = f64::INFINITY;
        for e in 0..=80 {
            let l = s.anneal(e, 60);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn symmetric_with_zero_noise() {
        let m = gumbel_softmax_with_noise(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(m, vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_short_and_non_finite() {
        let mut s = GumbelSampler::new(1, 1.0).unwrap();
        assert!(gumbel_softmax(&[0.0], &mut s).is_err());
        assert!(gumbel_softmax(&[f64::NAN, 0.0], &mut s).is_err());
        assert!(GumbelSampler::new(1, 0.0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = GumbelSampler::new(9, 0.5).unwrap();
        let mut b = GumbelSampler::new(9, 0.5).unwrap();
        assert_eq!(
            gumbel_softmax(&[0.3, -0.2, 1.0], &mut a).unwrap(),
            gumbel_softmax(&[0.3, -0.2, 1.0], &mut b).unwrap()
        );
    }

    #[test]
    fn expected_mask_matches_softmax_examples() {
        assert_eq!(expected_mask(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(expected_mask(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = expected_mask(&[2.0, 0.0]).unwrap();
        assert!((p[0] - 0.880797).abs() < 1e-6);
    }
}
