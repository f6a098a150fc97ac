//! Embedder contracts for the three feature streams and the text/image
//! consistency score, plus the built-in synthetic backend and the
//! content-addressed embedding cache.

mod cache;
mod synthetic;

pub use cache::{
    content_digest, decode_record, encode_record, CachedBackend, EmbeddingCache, RECORD_MAGIC,
    RECORD_VERSION,
};
pub use synthetic::{synthetic_embed, SyntheticEmbedder};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Default common embedding width.
pub const DEFAULT_DIM: usize = 512;

/// Patch-level visual, global semantic and texture descriptors of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTriple {
    pub vis: Vec<f32>,
    pub clip: Vec<f32>,
    pub tex: Vec<f32>,
}

impl FeatureTriple {
    pub fn new(vis: Vec<f32>, clip: Vec<f32>, tex: Vec<f32>) -> Result<Self> {
        let t = Self { vis, clip, tex };
        t.validate()?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.vis.len()
    }

    pub fn streams(&self) -> [&[f32]; 3] {
        [&self.vis, &self.clip, &self.tex]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.vis.len();
        if d == 0 {
            return Err(Error::config("feature triple has zero dimension"));
        }
        for s in [&self.clip, &self.tex] {
            if s.len() != d {
                return Err(Error::Shape {
                    expected: d,
                    actual: s.len(),
                });
            }
        }
        if self
            .streams()
            .iter()
            .any(|s| s.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric("non-finite entry in feature triple".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vec: Vec<f32>,
    pub source_text: String,
}

/// Source of per-image feature triples and of the joint text/image space
/// used for prompt consistency scoring.
///
/// Implementations must be deterministic: the same input yields bitwise
/// identical output for a given instance.
pub trait EmbedderBackend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> String;

    /// Width `d` of each stream in [`FeatureTriple`].
    fn dim(&self) -> usize;

    fn embed_image(&self, image: &ImageBuffer) -> Result<FeatureTriple>;

    fn embed_text(&self, text: &str) -> Result<TextEmbedding>;

    /// Global image vector living in the same space as [`Self::embed_text`].
    fn embed_image_global(&self, image: &ImageBuffer) -> Result<Vec<f32>>;

    /// Whether concurrent calls from several workers are allowed.
    fn parallel_safe(&self) -> bool {
        true
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, accumulated in `f64`.
///
/// A zero vector has no direction, so it is reported as
/// [`Error::UndefinedSimilarity`] rather than scored as 0.
pub fn cosine<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(Error::Numeric("non-finite value in cosine".into()));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("cosine of a zero vector"));
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    Ok(c.clamp(-1.0, 1.0))
}

/// Per-stream cosines `(s_vis, s_clip, s_tex)` of two triples.
pub fn stream_similarities(a: &FeatureTriple, b: &FeatureTriple) -> Result<[f64; 3]> {
    Ok([
        cosine(&a.vis, &b.vis)?,
        cosine(&a.clip, &b.clip)?,
        cosine(&a.tex, &b.tex)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[0.3f64, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_vector_is_an_error() {
        assert!(matches!(
            cosine(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedSimilarity(_))
        ));
        assert!(matches!(
            cosine(&[1.0f64], &[1.0, 0.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn triple_validation() {
        assert!(FeatureTriple::new(vec![1.0; 4], vec![1.0; 4], vec![1.0; 3]).is_err());
        assert!(FeatureTriple::new(vec![1.0; 4], vec![f32::NAN; 4], vec![1.0; 4]).is_err());
        assert!(FeatureTriple::new(vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]).is_ok());
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 8)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_self_and_scale(a in nonzero_vec(), lambda in 0.01f64..100.0) {
            prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            prop_assert!((cosine(&a, &scaled).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_symmetric(a in nonzero_vec(), b in nonzero_vec()) {
            let ab = cosine(&a, &b).unwrap();
            let ba = cosine(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
