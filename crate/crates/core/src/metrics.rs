//! Evaluation math over caller-provided feature vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::numerics::Tensor;

/// Negative eigenvalues of larger magnitude than this are logged before clamping.
pub const EIGEN_WARN: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("feature set is empty")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite feature value")]
    NonFinite,
    #[error("need at least {needed} vectors, got {got}")]
    TooFew { needed: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    vectors: Vec<Vec<f64>>,
    pub label: String,
}

impl FeatureSet {
    pub fn new(label: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let dim = vectors.first().ok_or(MetricsError::Empty)?.len();
        if dim == 0 {
            return Err(MetricsError::Empty);
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(MetricsError::Dimension { expected: dim, found: v.len() });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(MetricsError::NonFinite);
            }
        }
        Ok(Self { vectors, label: label.into() })
    }

    /// One vector per row of a rank-2 tensor.
    pub fn from_tensor(label: impl Into<String>, t: &Tensor) -> Result<Self, MetricsError> {
        if t.dims().len() != 2 {
            return Err(MetricsError::Dimension { expected: 2, found: t.dims().len() });
        }
        Self::new(label, (0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Dimension { expected: a.len(), found: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    Ok((dot / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean cosine similarity between a reference embedding and every frame.
pub fn identity_similarity(reference: &[f64], frames: &FeatureSet) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    for f in frames.vectors() {
        total += cosine(reference, f)?;
    }
    Ok(total / frames.len() as f64)
}

/// Mean over adjacent-pair cosines and first-frame cosines, pooled.
pub fn temporal_consistency(frames: &FeatureSet) -> Result<f64, MetricsError> {
    let v = frames.vectors();
    if v.len() < 2 {
        return Err(MetricsError::TooFew { needed: 2, got: v.len() });
    }
    let mut terms = Vec::with_capacity(2 * (v.len() - 1));
    for i in 0..v.len() - 1 {
        terms.push(cosine(&v[i], &v[i + 1])?);
    }
    for f in &v[1..] {
        terms.push(cosine(&v[0], f)?);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

fn mean_cov(set: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let d = set.dim();
    let x = DMatrix::from_fn(n, d, |r, c| set.vectors()[r][c]);
    let mean = DVector::from_fn(d, |c, _| x.column(c).sum() / n as f64);
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, (&cov + cov.transpose()) * 0.5)
}

fn clamped_eigenvalues(m: DMatrix<f64>, what: &str) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    for ev in eig.eigenvalues.iter_mut() {
        if *ev < 0.0 {
            if *ev < -EIGEN_WARN {
                log::warn!("clamping negative eigenvalue {ev:e} in {what}");
            }
            *ev = 0.0;
        }
    }
    eig
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = clamped_eigenvalues(m, "covariance");
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    &eig.eigenvectors * s * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature populations.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension { expected: a.dim(), found: b.dim() });
    }
    for s in [a, b] {
        if s.len() < 2 {
            return Err(MetricsError::TooFew { needed: 2, got: s.len() });
        }
    }
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    let root_a = sqrt_psd(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let cross = clamped_eigenvalues(inner, "cross term").eigenvalues.map(f64::sqrt).sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: Vec<Vec<f64>>) -> FeatureSet {
        FeatureSet::new("t", v).unwrap()
    }

    #[test]
    fn identity_examples() {
        let r = vec![1.0, 2.0, 3.0];
        assert_eq!(identity_similarity(&r, &set(vec![r.clone(), r.clone()])).unwrap(), 1.0);
        let o = set(vec![vec![0.0, 1.0], vec![0.0, -2.0]]);
        assert_eq!(identity_similarity(&[1.0, 0.0], &o).unwrap(), 0.0);
        let mixed = set(vec![vec![0.6, 0.8], vec![0.8, 0.6]]);
        assert!((identity_similarity(&[1.0, 0.0], &mixed).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(identity_similarity(&[0.0, 0.0], &mixed), Err(MetricsError::ZeroNorm));
    }

    #[test]
    fn temporal_examples() {
        let c = set(vec![vec![0.3, -1.7, 2.2]; 5]);
        assert_eq!(temporal_consistency(&c).unwrap(), 1.0);
        let alt = set(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        // adjacent: 0,0,0; first-frame: 0,1,0
        assert!((temporal_consistency(&alt).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        let two = set(vec![vec![1.0, 0.0], vec![0.6, 0.8]]);
        assert!((temporal_consistency(&two).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(temporal_consistency(&set(vec![vec![1.0]])), Err(MetricsError::TooFew { .. })));
    }

    #[test]
    fn frechet_basic() {
        let a = set(vec![vec![1.0, 2.0], vec![3.0, 1.0], vec![0.0, 0.5]]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let one_d_a = set(vec![vec![0.0], vec![2.0]]);
        let one_d_b = set(vec![vec![5.0], vec![11.0]]);
        let (ma, sa) = (1.0f64, 2f64.sqrt());
        let (mb, sb) = (8.0, 18f64.sqrt());
        let want = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((frechet_distance(&one_d_a, &one_d_b).unwrap() - want).abs() < 1e-8);
        let bad = set(vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0]]);
        assert!(matches!(frechet_distance(&a, &bad), Err(MetricsError::Dimension { .. })));
        assert!(matches!(frechet_distance(&a, &set(vec![vec![1.0, 1.0]])), Err(MetricsError::TooFew { .. })));
    }
}
