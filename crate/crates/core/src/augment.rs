//! Mixup in embedding space with `Beta(alpha, alpha)` mixing weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelDistribution;
use crate::model::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: 4.0,
            enabled: true,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup.alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `Gamma(shape, 1)` by Marsaglia and Tsang's squeeze method.
///
/// Shapes below one use the boost `Gamma(shape + 1) * U^(1 / shape)`.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    assert!(shape > 0.0, "gamma shape must be positive");
    if shape < 1.0 {
        let u: f64 = rng.sample(Open01);
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// `lambda ~ Beta(alpha, alpha)` as `G1 / (G1 + G2)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let g1 = sample_gamma(alpha, rng);
    let g2 = sample_gamma(alpha, rng);
    g1 / (g1 + g2)
}

/// Convex combination of two (embedding, label) pairs.
pub fn mixup(
    x: &[f64],
    p: &LabelDistribution,
    x_other: &[f64],
    p_other: &LabelDistribution,
    lambda: f64,
) -> Result<(Vec<f64>, LabelDistribution)> {
    if x.len() != x_other.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: x_other.len(),
        });
    }
    if p.len() != p_other.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            got: p_other.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixup weight {lambda} outside [0, 1]")));
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
            .collect()
    };
    Ok((
        mix(x, x_other),
        LabelDistribution::from_raw(mix(p.probs(), p_other.probs())),
    ))
}

/// Mixes every element with a partner drawn by a uniform random permutation.
///
/// The permutation is drawn first, then one weight per element in order.
/// An element paired with itself passes through unchanged.
pub fn mixup_batch<R: Rng + ?Sized>(batch: &[Sample], rng: &mut R, alpha: f64) -> Result<Vec<Sample>> {
    let mut partners: Vec<usize> = (0..batch.len()).collect();
    partners.shuffle(rng);
    let lambdas: Vec<f64> = (0..batch.len()).map(|_| sample_lambda(alpha, rng)).collect();
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let j = partners[i];
            if i == j {
                return Ok(s.clone());
            }
            let other = &batch[j];
            let (x, target) = mixup(&s.x, &s.target, &other.x, &other.target, lambdas[i])?;
            Ok(Sample { x, target })
        })
        .collect()
}
