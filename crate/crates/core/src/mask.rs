//! Cosine mask-ratio schedule and mask sampling.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// `γ(τ) = cos(πτ/2)`, evaluated as `sin(π(1 − τ)/2)` so both endpoints are
/// exact.
pub fn mask_ratio(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("mask schedule time {tau} outside [0, 1]")));
    }
    Ok((FRAC_PI_2 * (1.0 - tau)).sin())
}

/// Round-half-up of `γ(τ)·n`, clamped to `[1, n]`.
pub fn mask_count(n_tokens: usize, tau: f64) -> Result<usize> {
    if n_tokens == 0 {
        return Err(Error::Domain("cannot mask an empty token sequence".into()));
    }
    let raw = (mask_ratio(tau)? * n_tokens as f64 + 0.5).floor() as usize;
    Ok(raw.clamp(1, n_tokens))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted, unique indices in `[0, n)`.
    pub masked: Vec<usize>,
    pub n_tokens: usize,
    pub tau: f64,
    pub ratio: f64,
}

impl MaskPlan {
    /// A plan with the given indices, e.g. all positions at inference start.
    pub fn from_indices(n_tokens: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.iter().any(|&i| i >= n_tokens) {
            return Err(Error::Domain(format!("mask index out of range for {n_tokens} tokens")));
        }
        let ratio = masked.len() as f64 / n_tokens.max(1) as f64;
        Ok(Self { masked, n_tokens, tau: f64::NAN, ratio })
    }

    pub fn all(n_tokens: usize) -> Self {
        Self { masked: (0..n_tokens).collect(), n_tokens, tau: 0.0, ratio: 1.0 }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    /// Per-position flags.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n_tokens];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Masks `mask_count(n, τ)` positions drawn uniformly without replacement.
pub fn sample_mask<R: Rng>(n_tokens: usize, tau: f64, rng: &mut R) -> Result<MaskPlan> {
    let k = mask_count(n_tokens, tau)?;
    let mut masked = index::sample(rng, n_tokens, k).into_vec();
    masked.sort_unstable();
    Ok(MaskPlan { masked, n_tokens, tau, ratio: mask_ratio(tau)? })
}

/// Draws `τ ~ U[0, 1]` and samples a plan.
pub fn sample_training_mask<R: Rng>(n_tokens: usize, rng: &mut R) -> Result<MaskPlan> {
    let tau = rng.random_range(0.0..=1.0);
    sample_mask(n_tokens, tau, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ratio_endpoints_and_midpoint() {
        assert_eq!(mask_ratio(0.0).unwrap(), 1.0);
        assert_eq!(mask_ratio(1.0).unwrap(), 0.0);
        assert!((mask_ratio(0.5).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!(matches!(mask_ratio(1.5), Err(Error::Domain(_))));
        assert!(mask_ratio(-0.1).is_err());
    }

    #[test]
    fn sample_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(16, 0.0, &mut rng).unwrap().len(), 16);
        assert_eq!(sample_mask(16, 1.0, &mut rng).unwrap().len(), 1);
        // round(0.70711 * 16) = round(11.31) = 11
        assert_eq!(sample_mask(16, 0.5, &mut rng).unwrap().len(), 11);
        assert!(matches!(sample_mask(0, 0.5, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let a = sample_mask(32, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(32, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flags_match_indices() {
        let p = MaskPlan::from_indices(5, vec![3, 1, 3]).unwrap();
        assert_eq!(p.flags(), vec![false, true, false, true, false]);
        assert!(MaskPlan::from_indices(2, vec![2]).is_err());
    }
}
