//! Vector primitives shared by the losses, the trainer and the scoring back end.
//!
//! Scores are cosine *similarities*: higher means more alike. Zero vectors are
//! rejected everywhere a direction is needed, since an all-zero embedding almost
//! always means something upstream went wrong.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Default embedding dimension at desk scale.
pub const DEFAULT_EMBEDDING_DIM: usize = 16;

/// A speaker embedding: a non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("embedding must have dimension > 0"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

/// Index of a speaker within a labelled set (`0..K`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeakerId(pub usize);

impl SpeakerId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Chunk-level embeddings of one file together with their average.
#[derive(Debug, Clone, PartialEq)]
pub struct FileEmbedding {
    chunks: Vec<Embedding>,
    mean: Embedding,
}

impl FileEmbedding {
    pub fn from_chunks(chunks: Vec<Embedding>) -> Result<Self> {
        let mean = mean_embedding(&chunks)?;
        Ok(FileEmbedding { chunks, mean })
    }

    pub fn chunks(&self) -> &[Embedding] {
        &self.chunks
    }

    pub fn mean(&self) -> &Embedding {
        &self.mean
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("cosine_similarity", a.len(), b.len())?;
    let na = norm(a);
    if na == 0.0 {
        return Err(Error::zero_norm("first operand of cosine_similarity"));
    }
    let nb = norm(b);
    if nb == 0.0 {
        return Err(Error::zero_norm("second operand of cosine_similarity"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Component-wise arithmetic mean of a non-empty list of equal-length vectors.
pub fn mean_embedding<E: AsRef<[f64]>>(chunks: &[E]) -> Result<Embedding> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::domain("mean_embedding of an empty list"))?
        .as_ref();
    let dim = first.len();
    // Running mean: exact for repeated identical inputs.
    let mut acc = first.to_vec();
    for (k, chunk) in chunks.iter().enumerate().skip(1) {
        let chunk = chunk.as_ref();
        check_dim("mean_embedding", dim, chunk.len())?;
        let count = (k + 1) as f64;
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += (v - *a) / count;
        }
    }
    Embedding::new(acc)
}

/// Returns `a / ‖a‖`.
pub fn normalize(a: &[f64]) -> Result<Embedding> {
    let n = norm(a);
    if n == 0.0 {
        return Err(Error::zero_norm("input of normalize"));
    }
    Embedding::new(a.iter().map(|v| v / n).collect())
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap(),
            0.8,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_rejects_zero_and_names_operand() {
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("first operand"), "{err}");
        let err = cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("second operand"), "{err}");
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_is_clamped() {
        let a = [0.1, 0.2, 0.3];
        let c = cosine_similarity(&a, &a).unwrap();
        assert!(c <= 1.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(cosine_similarity(&a, &neg).unwrap() >= -1.0);
    }

    #[test]
    fn mean_examples() {
        assert_eq!(
            mean_embedding(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap().as_slice(),
            &[1.0, 1.0]
        );
        assert_eq!(
            mean_embedding(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap().as_slice(),
            &[1.0, 1.0]
        );
        let m = mean_embedding(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(m[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 2.0 / 3.0, epsilon = 1e-15);
        assert!(mean_embedding::<Vec<f64>>(&[]).is_err());
        assert!(mean_embedding(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(n[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n[1], 0.8, epsilon = 1e-15);
        assert_eq!(normalize(&[1.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn file_embedding_mean() {
        let chunks = vec![
            Embedding::new(vec![1.0, 3.0]).unwrap(),
            Embedding::new(vec![3.0, 1.0]).unwrap(),
        ];
        let file = FileEmbedding::from_chunks(chunks).unwrap();
        assert_eq!(file.mean().as_slice(), &[2.0, 2.0]);
        assert_eq!(file.chunks().len(), 2);
        assert!(FileEmbedding::from_chunks(vec![]).is_err());
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_symmetric(a in nonzero_vec(6), b in nonzero_vec(6)) {
            prop_assert_eq!(cosine_similarity(&a, &b).unwrap(), cosine_similarity(&b, &a).unwrap());
        }

        #[test]
        fn cosine_scale_invariant(a in nonzero_vec(6), b in nonzero_vec(6), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
            let tb: Vec<f64> = b.iter().map(|v| v * t).collect();
            let d = cosine_similarity(&sa, &tb).unwrap() - cosine_similarity(&a, &b).unwrap();
            prop_assert!(d.abs() <= 1e-12);
        }

        #[test]
        fn mean_of_copies_is_exact(v in nonzero_vec(5), n in 1usize..20) {
            let copies = vec![v.clone(); n];
            let m = mean_embedding(&copies).unwrap();
            prop_assert_eq!(m.as_slice(), v.as_slice());
        }

        #[test]
        fn normalize_idempotent(v in nonzero_vec(7)) {
            let once = normalize(&v).unwrap();
            prop_assert!((norm(&once) - 1.0).abs() <= 1e-12);
            let twice = normalize(&once).unwrap();
            for (x, y) in once.iter().zip(twice.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
