//! Softmax, restricted softmax, cross-entropy and KL divergence kernels.
//!
//! All arithmetic is `f64`. Logarithms clamp probabilities at [`LOG_EPS`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied inside every `ln`.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOL: f64 = 1e-6;

/// A probability vector over the predicate vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Validates non-negativity, finiteness and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty probability vector".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::Distribution(format!("entry {i} is {p}")));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Distribution(format!("mass {mass} is not 1")));
        }
        Ok(LabelDistribution(probs))
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        assert!(index < len, "one-hot index {index} out of range {len}");
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        LabelDistribution(probs)
    }

    pub fn uniform(len: usize) -> Self {
        LabelDistribution(vec![1.0 / len as f64; len])
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        LabelDistribution(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Shannon entropy with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// First index of the maximum value.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Distribution("empty logit vector".into()));
    }
    match logits.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::Distribution(format!(
            "logit {i} is not finite ({})",
            logits[i]
        ))),
        None => Ok(()),
    }
}

/// Max-subtracted softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<LabelDistribution> {
    check_finite(logits)?;
    Ok(LabelDistribution(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Softmax taken only over `subset`; indices outside the subset get zero mass.
pub fn restricted_softmax(logits: &[f64], subset: &[usize]) -> Result<LabelDistribution> {
    check_finite(logits)?;
    if subset.is_empty() {
        return Err(Error::Distribution("restricted softmax over an empty subset".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= logits.len()) {
        return Err(Error::Distribution(format!(
            "subset index {bad} out of range for {} logits",
            logits.len()
        )));
    }
    let max = subset
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &i in subset {
        let e = (logits[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for &i in subset {
        out[i] /= total;
    }
    Ok(LabelDistribution(out))
}

fn check_lengths(a: &LabelDistribution, b: &LabelDistribution) {
    assert_eq!(
        a.len(),
        b.len(),
        "distribution lengths differ ({} vs {})",
        a.len(),
        b.len()
    );
}

/// `-Σ target_k ln max(pred_k, ε)`.
///
/// Panics when the two distributions have different lengths.
pub fn cross_entropy(pred: &LabelDistribution, target: &LabelDistribution) -> f64 {
    check_lengths(pred, target);
    -pred
        .0
        .iter()
        .zip(&target.0)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| t * p.max(LOG_EPS).ln())
        .sum::<f64>()
}

/// Forward KL `KL(target ‖ pred) = Σ target_k ln(target_k / max(pred_k, ε))`.
///
/// Panics when the two distributions have different lengths.
pub fn kl_divergence(target: &LabelDistribution, pred: &LabelDistribution) -> f64 {
    check_lengths(pred, target);
    target
        .0
        .iter()
        .zip(&pred.0)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t.ln() - p.max(LOG_EPS).ln()))
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_softmax(l: &[f64]) -> Vec<f64> {
        let total: f64 = l.iter().map(|x| x.exp()).sum();
        l.iter().map(|x| x.exp() / total).collect()
    }

    #[test]
    fn uniform_from_equal_logits() {
        let p = stable_softmax(&[0.0, 0.0, 0.0]).unwrap();
        for &x in p.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = stable_softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p.probs()[0], 1.0);
        assert!(p.probs()[1] < 1e-300);
    }

    #[test]
    fn matches_naive_formula() {
        let l = [2.0, 1.0, 0.0, -1.0];
        let p = stable_softmax(&l).unwrap();
        for (a, b) in p.probs().iter().zip(naive_softmax(&l)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(stable_softmax(&[f64::NAN, 0.0]).is_err());
        assert!(stable_softmax(&[f64::INFINITY]).is_err());
        assert!(restricted_softmax(&[f64::NEG_INFINITY, 0.0], &[1]).is_err());
    }

    #[test]
    fn restricted_softmax_hand_values() {
        let p = restricted_softmax(&[2.0, 1.0, 0.0, -1.0], &[1, 3]).unwrap();
        let e1 = 1f64.exp();
        let em1 = (-1f64).exp();
        let expected = [0.0, e1 / (e1 + em1), 0.0, em1 / (e1 + em1)];
        for (a, b) in p.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.probs()[1] - 0.880797).abs() < 1e-6);
        assert!((p.probs()[3] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn restricted_over_everything_is_softmax() {
        let l = [0.3, -2.0, 4.0];
        let a = restricted_softmax(&l, &[0, 1, 2]).unwrap();
        let b = stable_softmax(&l).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn restricted_softmax_errors() {
        assert!(restricted_softmax(&[1.0, 2.0], &[]).is_err());
        assert!(restricted_softmax(&[1.0, 2.0], &[2]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let target = LabelDistribution::one_hot(2, 0);
        let pred = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&pred, &target) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy(&target, &target), 0.0);
    }

    #[test]
    fn cross_entropy_clamps_zero_predictions() {
        let target = LabelDistribution::one_hot(2, 1);
        let pred = LabelDistribution::one_hot(2, 0);
        assert!((cross_entropy(&pred, &target) + LOG_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_values() {
        let t = LabelDistribution::new(vec![1.0, 0.0]).unwrap();
        let p = LabelDistribution::new(vec![0.25, 0.75]).unwrap();
        assert!((kl_divergence(&t, &p) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&p, &p), 0.0);
    }

    #[test]
    #[should_panic(expected = "lengths differ")]
    fn kl_length_mismatch_panics() {
        let a = LabelDistribution::uniform(2);
        let b = LabelDistribution::uniform(3);
        kl_divergence(&a, &b);
    }

    #[test]
    fn distribution_validation() {
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(LabelDistribution::new(vec![]).is_err());
        assert!(LabelDistribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(LabelDistribution::new(vec![0.5, 0.5 + 1e-7]).is_ok());
    }

    fn distribution(len: usize) -> impl Strategy<Value = LabelDistribution> {
        proptest::collection::vec(0.0f64..1.0, len).prop_filter_map("zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-3).then(|| LabelDistribution::new(w.iter().map(|x| x / s).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn ce_equals_kl_plus_entropy((p, t) in (1usize..8).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            // Keep pred away from the clamp so the identity is exact.
            let p = LabelDistribution::new(p.probs().iter().map(|x| 0.9 * x + 0.1 / p.len() as f64).collect()).unwrap();
            let lhs = cross_entropy(&p, &t);
            let rhs = kl_divergence(&t, &p) + t.entropy();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn kl_is_non_negative((p, t) in (1usize..8).prop_flat_map(|n| (distribution(n), distribution(n)))) {
            prop_assert!(kl_divergence(&t, &p) >= 0.0);
            prop_assert!(kl_divergence(&t, &t).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariance(l in proptest::collection::vec(-30.0f64..30.0, 1..10), c in -100.0f64..100.0) {
            let a = stable_softmax(&l).unwrap();
            let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
            let b = stable_softmax(&shifted).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn restricted_is_masked_renormalized(l in proptest::collection::vec(-20.0f64..20.0, 1..10), mask in any::<u16>()) {
            let mut subset: Vec<usize> = (0..l.len()).filter(|i| mask & (1 << i) != 0).collect();
            if subset.is_empty() {
                subset.push(0);
            }
            let r = restricted_softmax(&l, &subset).unwrap();
            let full = stable_softmax(&l).unwrap();
            let mass: f64 = subset.iter().map(|&i| full.probs()[i]).sum();
            for i in 0..l.len() {
                let expected = if subset.contains(&i) { full.probs()[i] / mass } else { 0.0 };
                prop_assert!((r.probs()[i] - expected).abs() < 1e-10);
            }
            let best = subset.iter().copied().max_by(|&a, &b| l[a].partial_cmp(&l[b]).unwrap().then(b.cmp(&a))).unwrap();
            prop_assert_eq!(r.argmax(), best);
        }
    }
}
