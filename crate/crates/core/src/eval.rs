//! Toy motion metrics over a fixed hand-made feature map: per-channel mean,
//! per-channel variance and per-channel mean absolute velocity.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::motion::MotionSequence;
use crate::params::sha256_hex;
use crate::synth::list_motion_files;

const PSD_TOL: f64 = 1e-8;

/// `[mean_c…, var_c…, mean|Δx|_c…]`, length `3·D`.
pub fn motion_features(m: &MotionSequence) -> Vec<f64> {
    let (t, d) = (m.len(), m.dim());
    let f = m.frames();
    let mut mean = vec![0.0; d];
    for i in 0..t {
        for (a, &x) in mean.iter_mut().zip(f.row(i)) {
            *a += x / t as f64;
        }
    }
    let mut var = vec![0.0; d];
    let mut vel = vec![0.0; d];
    for i in 0..t {
        for c in 0..d {
            var[c] += (f.row(i)[c] - mean[c]).powi(2) / t as f64;
            if i > 0 {
                vel[c] += (f.row(i)[c] - f.row(i - 1)[c]).abs() / (t - 1) as f64;
            }
        }
    }
    mean.into_iter().chain(var).chain(vel).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn eigen_min(m: &DMatrix<f64>) -> (SymmetricEigen<f64, nalgebra::Dyn>, f64) {
    let e = SymmetricEigen::new(m.clone());
    let min = e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    (e, min)
}

fn tolerance(m: &DMatrix<f64>) -> f64 {
    PSD_TOL * m.amax().max(1.0)
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(dim_err!("covariance {:?} for a {n}-vector mean", cov.shape()));
        }
        let tol = tolerance(&cov);
        if (&cov - cov.transpose()).amax() > tol {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        if n > 0 && eigen_min(&cov).1 < -tol {
            return Err(Error::Numeric("covariance is not positive semidefinite".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Mean and unbiased covariance of feature vectors.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Input("no samples".into()))?;
        let d = first.len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(dim_err!("feature vectors of unequal length"));
        }
        let n = samples.len();
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        if n > 1 {
            for s in samples {
                let c = DVector::from_column_slice(s) - &mean;
                cov += &c * c.transpose();
            }
            cov /= (n - 1) as f64;
        }
        Self::new(mean, cov)
    }

    pub fn of_motions(motions: &[MotionSequence]) -> Result<Self> {
        Self::from_samples(&motions.iter().map(motion_features).collect::<Vec<_>>())
    }
}

/// Eigenvalues of a PSD matrix with round-off negatives clipped to zero.
fn psd_sqrt_parts(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (e, min) = eigen_min(m);
    if min < -tolerance(m) {
        return Err(Error::Numeric(format!("matrix square root of a non-PSD matrix (eigenvalue {min:e})")));
    }
    Ok((e.eigenvectors, e.eigenvalues.map(|v| v.max(0.0).sqrt())))
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(dim_err!("feature dims {} vs {}", a.mean.len(), b.mean.len()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let (v, s) = psd_sqrt_parts(&a.cov)?;
    let sa = &v * DMatrix::from_diagonal(&s) * v.transpose();
    let mut m = &sa * &b.cov * &sa;
    m = (&m + m.transpose()) * 0.5;
    let (_, r) = psd_sqrt_parts(&m)?;
    Ok(diff + a.cov.trace() + b.cov.trace() - 2.0 * r.sum())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over `pairs` seeded random pairs of distinct
/// samples.
pub fn diversity(samples: &[Vec<f64>], pairs: usize, seed: u64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Input(format!("diversity needs at least 2 samples, got {n}")));
    }
    if pairs == 0 {
        return Err(Error::Input("diversity needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        acc += distance(&samples[i], &samples[j]);
    }
    Ok(acc / pairs as f64)
}

/// Motion files of `dir` ordered by content hash.
pub fn load_motion_dir(dir: &Path) -> Result<Vec<MotionSequence>> {
    let files = list_motion_files(dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no motion files in {}", dir.display())));
    }
    let mut keyed = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(&f)?;
        keyed.push((sha256_hex(&bytes), MotionSequence::from_bytes(&bytes)?));
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, m)| m).collect())
}

pub const DIVERSITY_PAIRS: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub fid: f64,
    pub diversity: f64,
}

pub fn evaluate(real: &[MotionSequence], generated: &[MotionSequence], seed: u64) -> Result<EvalReport> {
    let rf: Vec<Vec<f64>> = real.iter().map(motion_features).collect();
    let gf: Vec<Vec<f64>> = generated.iter().map(motion_features).collect();
    let fid = fid(&FeatureStats::from_samples(&rf)?, &FeatureStats::from_samples(&gf)?)?;
    Ok(EvalReport { fid, diversity: diversity(&gf, DIVERSITY_PAIRS, seed)? })
}

pub fn evaluate_dirs(real: &Path, generated: &Path, seed: u64) -> Result<EvalReport> {
    evaluate(&load_motion_dir(real)?, &load_motion_dir(generated)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn stats(mean: &[f64], cov: &[f64]) -> FeatureStats {
        let n = mean.len();
        FeatureStats::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(n, n, cov)).unwrap()
    }

    #[test]
    fn fid_examples() {
        let a = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let b = stats(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(fid(&a, &a).unwrap().abs() < 1e-12);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_diagonal_oracle() {
        // Commuting diagonal covariances: Tr term is Σ (√a − √b)².
        let a = stats(&[0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]);
        let b = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 9.0]);
        let want = (2.0f64 - 1.0).powi(2) + (1.0f64 - 3.0).powi(2);
        assert!((fid(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn non_psd_is_rejected() {
        let r = FeatureStats::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn diversity_examples() {
        let same = vec![vec![1.0, 2.0]; 5];
        assert_eq!(diversity(&same, 20, 0).unwrap(), 0.0);
        let two = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(diversity(&two, 7, 3).unwrap(), 2.0);
        assert!(matches!(diversity(&two[..1], 7, 3), Err(Error::Input(_))));
    }

    #[test]
    fn features_of_ramp() {
        let f = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let m = MotionSequence::new(f, 20.0).unwrap();
        let v = motion_features(&m);
        assert_eq!(v.len(), 3);
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[2] - 1.0).abs() < 1e-15);
    }
}
