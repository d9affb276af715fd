//! Embedding vectors, cosine similarity and the provider contract used by
//! corpus deduplication, note identification, prediction grouping and
//! evaluation matching.

use std::collections::HashMap;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text;

/// Dense embedding of a text. Entries are finite and the vector is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!("non-finite entry at {i}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// `dot(u, v) / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(u: &EmbeddingVector<T>, v: &EmbeddingVector<T>) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::ZeroVector);
    }
    let dot: T = u.values.iter().zip(&v.values).map(|(&a, &b)| a * b).sum();
    let c = dot / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Text embedder. Implementations must be safe for concurrent read-only use.
pub trait SimilarityProvider<T: Scalar = f64>: Send + Sync {
    fn name(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>>;
}

impl<T: Scalar, P: SimilarityProvider<T> + ?Sized> SimilarityProvider<T> for &P {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        (**self).embed(text)
    }
}

impl<T: Scalar, P: SimilarityProvider<T> + ?Sized> SimilarityProvider<T> for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        (**self).embed(text)
    }
}

/// `cosine(embed(a), embed(b))`. Both texts must be non-blank.
pub fn similarity<T, P>(provider: &P, a: &str, b: &str) -> Result<T>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    for t in [a, b] {
        if t.trim().is_empty() {
            return Err(Error::EmptyText(provider.name().to_string()));
        }
    }
    cosine(&provider.embed(a)?, &provider.embed(b)?)
}

pub const DEFAULT_TRIGRAM_DIM: usize = 4096;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Built-in deterministic provider.
///
/// The text is folded (lowercase, punctuation stripped, whitespace collapsed),
/// padded with one space on each side and cut into character trigrams. Each
/// trigram is hashed (FNV-1a, 64 bit) into one of `dim` buckets; the bucket
/// counts are L2-normalized. Word order does not matter beyond trigram
/// adjacency, and all components are nonnegative.
#[derive(Debug, Clone)]
pub struct TrigramEmbedder<T = f64> {
    dim: usize,
    _scalar: PhantomData<fn() -> T>,
}

impl<T> Default for TrigramEmbedder<T> {
    fn default() -> Self {
        Self::with_dim(DEFAULT_TRIGRAM_DIM)
    }
}

impl<T> TrigramEmbedder<T> {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "trigram dimension must be positive");
        Self {
            dim,
            _scalar: PhantomData,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl<T: Scalar> SimilarityProvider<T> for TrigramEmbedder<T> {
    fn name(&self) -> &str {
        "trigram"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        let folded = text::fold(text);
        if folded.is_empty() {
            return Err(Error::EmptyText(SimilarityProvider::<T>::name(self).to_string()));
        }
        let padded: Vec<char> = format!(" {folded} ").chars().collect();
        let mut counts = vec![0u32; self.dim];
        let mut buf = [0u8; 12];
        for w in padded.windows(3) {
            let mut n = 0;
            for c in w {
                n += c.encode_utf8(&mut buf[n..]).len();
            }
            counts[(fnv1a(&buf[..n]) % self.dim as u64) as usize] += 1;
        }
        let norm = counts.iter().map(|&c| f64::from(c).powi(2)).sum::<f64>().sqrt();
        EmbeddingVector::new(
            counts
                .into_iter()
                .map(|c| T::from_f64_lossy(f64::from(c) / norm))
                .collect(),
        )
    }
}

/// Test double that places texts into named clusters.
///
/// Texts of one cluster embed to the same one-hot vector (similarity 1),
/// texts of different clusters are orthogonal (similarity 0). Lookup is on
/// the trimmed, lowercased text; unknown texts are an error so fixtures stay
/// exhaustive.
#[derive(Debug, Clone)]
pub struct ClusterProvider<T = f64> {
    index: HashMap<String, usize>,
    dim: usize,
    _scalar: PhantomData<fn() -> T>,
}

impl<T> ClusterProvider<T> {
    pub fn new<I, S>(clusters: I) -> Self
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut index = HashMap::new();
        let mut dim = 0;
        for (i, cluster) in clusters.into_iter().enumerate() {
            for text in cluster {
                index.insert(Self::key(text.as_ref()), i);
            }
            dim = i + 1;
        }
        Self {
            index,
            dim: dim.max(1),
            _scalar: PhantomData,
        }
    }

    fn key(text: &str) -> String {
        text.trim().to_lowercase()
    }
}

impl<T: Scalar> SimilarityProvider<T> for ClusterProvider<T> {
    fn name(&self) -> &str {
        "cluster"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>> {
        let slot = *self
            .index
            .get(&Self::key(text))
            .ok_or_else(|| Error::provider("cluster", format!("text not scripted: {text:?}")))?;
        let mut values = vec![T::zero(); self.dim];
        values[slot] = T::one();
        EmbeddingVector::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let v = ev(&[0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&ev(&[1.0]), &ev(&[1.0, 0.0])),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(
            cosine(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(Error::ZeroVector)
        ));
        assert!(EmbeddingVector::<f64>::new(vec![]).is_err());
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    // Frozen from tests/oracle/trigram_oracle.py.
    const ORACLE: &[(&str, &str, f64)] = &[
        ("areds", "areds-2 vitamins", 0.559_016_994_374_947_56),
        ("eating spinach and fish", "spinach and fish", 0.834_057_656_228_299_42),
        ("fish", "spinach", 0.0),
        ("macular degenration", "macular degeneration", 0.872_081_599_272_381_49),
        ("areds vitamins", "areds-2 vitamins", 0.868_599_036_215_379_15),
    ];

    #[test]
    fn trigram_matches_oracle() {
        let p = TrigramEmbedder::<f64>::default();
        for &(a, b, want) in ORACLE {
            let got = similarity(&p, a, b).unwrap();
            assert!((got - want).abs() < 1e-12, "{a} / {b}: {got} vs {want}");
        }
    }

    #[test]
    fn trigram_f32_close_to_f64() {
        let p32 = TrigramEmbedder::<f32>::default();
        let got = similarity(&p32, "eating spinach and fish", "spinach and fish").unwrap();
        assert!((f64::from(got) - 0.834_057_656_228_299_42).abs() < 1e-5);
    }

    #[test]
    fn trigram_basic_contract() {
        let p = TrigramEmbedder::<f64>::default();
        assert_eq!(similarity(&p, "abc", "abc").unwrap(), 1.0);
        assert!((similarity(&p, "A, B!", "a b").unwrap() - 1.0).abs() < 1e-12);
        assert!(similarity(&p, "a b", "b a").unwrap() < 1.0);
        assert!(matches!(similarity(&p, "  ", "x"), Err(Error::EmptyText(_))));
        assert!(p.embed("...").is_err());
        let e = p.embed("areds").unwrap();
        assert_eq!(e.len(), DEFAULT_TRIGRAM_DIM);
        assert!((e.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cluster_provider_scripts_similarity() {
        let p: ClusterProvider<f64> =
            ClusterProvider::new([vec!["areds", "areds wacs"], vec!["healthy diet"]]);
        assert_eq!(similarity(&p, "areds", "Areds WACS").unwrap(), 1.0);
        assert_eq!(similarity(&p, "areds", "healthy diet").unwrap(), 0.0);
        assert!(p.embed("unscripted").is_err());
    }

    proptest! {
        #[test]
        fn trigram_symmetric_and_in_range(a in "[a-z ,.-]{1,30}", b in "[a-z ,.-]{1,30}") {
            let p = TrigramEmbedder::<f64>::default();
            match (similarity(&p, &a, &b), similarity(&p, &b, &a)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x - y).abs() <= 1e-12);
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }

        #[test]
        fn cosine_in_range(u in proptest::collection::vec(-10.0f64..10.0, 4), v in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let (u, v) = (ev(&u), ev(&v));
            if let Ok(c) = cosine(&u, &v) {
                prop_assert!((-1.0..=1.0).contains(&c));
                prop_assert_eq!(c, cosine(&v, &u).unwrap());
            }
        }
    }
}
