//! Probability distributions over a vocabulary.

use crate::error::{Error, Result};

/// Natural log of 2; conversion factor between nats and bits.
pub const LN_2: f64 = std::f64::consts::LN_2;

/// Tolerance on `sum(probs) == 1` and on the cached-entropy redundancy check.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// A probability distribution over a vocabulary, with its Shannon entropy
/// (in bits) cached at construction time.
///
/// Invariants enforced by every constructor:
/// - all entries are finite and non-negative,
/// - the entries sum to 1 within [`PROB_SUM_TOLERANCE`],
/// - `entropy_bits` equals `-Σ p_i log2 p_i` (with `0·log 0 = 0`) within
///   [`PROB_SUM_TOLERANCE`], and lies in `[0, log2 n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
    entropy_bits: f64,
}

impl ProbVector {
    /// Validates `probs` and computes the entropy.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty distribution".into()));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidDistribution(format!(
                    "non-finite probability {p} at index {i}"
                )));
            }
            if p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "negative probability {p} at index {i}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOLERANCE}"
            )));
        }
        let entropy_bits = shannon_entropy_bits(&probs);
        Ok(Self {
            probs,
            entropy_bits,
        })
    }

    /// Builds the distribution `softmax(logits)`; always valid for finite
    /// logits.
    pub fn from_logits(logits: &[f64]) -> Self {
        let probs = softmax(logits);
        let entropy_bits = shannon_entropy_bits(&probs);
        Self {
            probs,
            entropy_bits,
        }
    }

    /// Uniform distribution over `n` tokens.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "uniform distribution needs n >= 1");
        let p = 1.0 / n as f64;
        let probs = vec![p; n];
        let entropy_bits = shannon_entropy_bits(&probs);
        Self {
            probs,
            entropy_bits,
        }
    }

    /// Point mass on `token`.
    pub fn one_hot(n: usize, token: usize) -> Result<Self> {
        if token >= n {
            return Err(Error::InvalidToken {
                token,
                vocab_size: n,
            });
        }
        let mut probs = vec![0.0; n];
        probs[token] = 1.0;
        Ok(Self {
            probs,
            entropy_bits: 0.0,
        })
    }

    /// Constructor for values known to be a permutation of an existing
    /// distribution: carries the cached entropy over unchanged, since
    /// entropy is permutation-invariant by definition.
    pub(crate) fn from_permutation(probs: Vec<f64>, entropy_bits: f64) -> Self {
        debug_assert!((shannon_entropy_bits(&probs) - entropy_bits).abs() <= PROB_SUM_TOLERANCE);
        Self {
            probs,
            entropy_bits,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Shannon entropy in bits, cached at construction.
    pub fn entropy_bits(&self) -> f64 {
        self.entropy_bits
    }
}

/// `-Σ p_i log2 p_i` with the convention `0·log 0 = 0`. The result is
/// clamped into `[0, log2 n]` to absorb last-ulp rounding at the extremes.
pub fn shannon_entropy_bits(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    let max = (probs.len() as f64).log2();
    h.clamp(0.0, max)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax of empty slice");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `log(Σ exp(z_i))` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_entropy_is_log2_n() {
        assert_eq!(ProbVector::uniform(8).entropy_bits(), 3.0);
        assert_eq!(ProbVector::uniform(1).entropy_bits(), 0.0);
    }

    #[test]
    fn one_hot_entropy_is_zero() {
        let p = ProbVector::one_hot(16, 3).unwrap();
        assert_eq!(p.entropy_bits(), 0.0);
        assert_eq!(p.probs()[3], 1.0);
    }

    #[test]
    fn rejects_bad_vectors() {
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(ProbVector::one_hot(4, 4).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.3, -1.2, 2.7, 0.0, 5.1];
        let a = softmax(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9);
        }
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn softmax_of_constant_logits_is_uniform() {
        let q = softmax(&[4.2; 64]);
        for &p in &q {
            assert!((p - 1.0 / 64.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_entropy() {
        let p = ProbVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!((p.entropy_bits() - 1.5).abs() <= 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let z = [0.1_f64, -2.0, 3.5];
        let direct: f64 = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&z) - direct).abs() <= 1e-12);
    }
}
