//! Attention fusion of the three feature streams into one unit vector.
//!
//! Each stream is linearly projected to `d_model`, offset by a fixed
//! sinusoidal slot encoding, and the resulting three tokens pass through a
//! pre-norm Transformer encoder (no dropout, no learned affine in the layer
//! norms). The tokens are pooled, layer-normed and scaled to unit length.
//! All weights come from a seeded generator and are never trained, so a
//! config fully determines the fuser.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{cosine, EmbedderBackend, FeatureTriple, DEFAULT_DIM};
use crate::image::ImageBuffer;
use crate::seeding::rng_for;

const LN_EPS: f64 = 1e-5;
const STREAMS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Width of each incoming stream.
    pub input_dim: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
    pub pooling: Pooling,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            input_dim: DEFAULT_DIM,
            d_model: DEFAULT_DIM,
            num_layers: 1,
            num_heads: 4,
            seed: 0,
            pooling: Pooling::Mean,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_model == 0 {
            return Err(Error::config("fusion dimensions must be positive"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("fusion needs at least one encoder layer"));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; identifies a fuser.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Unit-length fused embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedEmbedding {
    pub vec: Vec<f64>,
}

impl FusedEmbedding {
    /// Wraps an existing vector, rescaling it to unit length.
    pub fn from_vec(vec: Vec<f64>) -> Result<Self> {
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite fused vector".into()));
        }
        let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("fused vector has zero norm".into()));
        }
        Ok(Self {
            vec: vec.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn cosine(&self, other: &FusedEmbedding) -> Result<f64> {
        cosine(&self.vec, &other.vec)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
}

/// Built attention fuser. Immutable; safe to share across threads.
#[derive(Clone, Debug)]
pub struct Fuser {
    config: FusionConfig,
    digest: String,
    projections: Vec<Array2<f64>>,
    slots: Array2<f64>,
    layers: Vec<EncoderLayer>,
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64, tag: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, tag);
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        rng.sample::<f64, _>(StandardNormal) * scale
    })
}

/// Sinusoidal offsets for the three stream slots, scaled to roughly unit norm.
fn slot_encoding(d_model: usize) -> Array2<f64> {
    let scale = (2.0 / d_model as f64).sqrt();
    Array2::from_shape_fn((STREAMS, d_model), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
        let angle = pos as f64 * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

fn layer_norm_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn layer_norm(x: ArrayView1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.mapv(|v| (v - mean) * inv)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    m
}

impl EncoderLayer {
    fn seeded(d_model: usize, seed: u64, layer: usize) -> Self {
        let base = 100 + 16 * layer as u64;
        let ff = 2 * d_model;
        Self {
            wq: gaussian_matrix(d_model, d_model, seed, base),
            wk: gaussian_matrix(d_model, d_model, seed, base + 1),
            wv: gaussian_matrix(d_model, d_model, seed, base + 2),
            wo: gaussian_matrix(d_model, d_model, seed, base + 3),
            w1: gaussian_matrix(ff, d_model, seed, base + 4),
            w2: gaussian_matrix(d_model, ff, seed, base + 5),
        }
    }

    fn forward(&self, x: &Array2<f64>, heads: usize) -> Array2<f64> {
        let d_model = x.ncols();
        let dh = d_model / heads;
        let z = layer_norm_rows(x);
        let q = z.dot(&self.wq.t());
        let k = z.dot(&self.wk.t());
        let v = z.dot(&self.wv.t());
        let mut attended = Array2::<f64>::zeros(x.raw_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let weights = softmax_rows(scores);
            attended
                .slice_mut(cols)
                .assign(&weights.dot(&v.slice(cols)));
        }
        let x = x + &attended.dot(&self.wo.t());
        let z = layer_norm_rows(&x);
        let hidden = z.dot(&self.w1.t()).mapv(gelu);
        &x + &hidden.dot(&self.w2.t())
    }
}

impl Fuser {
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let projections = (0..STREAMS)
            .map(|s| gaussian_matrix(config.d_model, config.input_dim, seed, 10 + s as u64))
            .collect();
        let layers = (0..config.num_layers)
            .map(|l| EncoderLayer::seeded(config.d_model, seed, l))
            .collect();
        Ok(Self {
            digest: config.digest(),
            slots: slot_encoding(config.d_model),
            config,
            projections,
            layers,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Digest of the config this fuser was built from.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn fuse(&self, triple: &FeatureTriple) -> Result<FusedEmbedding> {
        let d_in = self.config.input_dim;
        for s in triple.streams() {
            if s.len() != d_in {
                return Err(Error::Shape {
                    expected: d_in,
                    actual: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite feature value".into()));
            }
        }
        let mut tokens = Array2::<f64>::zeros((STREAMS, self.config.d_model));
        for (i, stream) in triple.streams().iter().enumerate() {
            let x = Array1::from_iter(stream.iter().map(|&v| f64::from(v)));
            let projected = self.projections[i].dot(&x) + self.slots.row(i);
            tokens.row_mut(i).assign(&projected);
        }
        for layer in &self.layers {
            tokens = layer.forward(&tokens, self.config.num_heads);
        }
        let pooled = match self.config.pooling {
            Pooling::Mean => tokens.mean_axis(Axis(0)).expect("three tokens"),
            Pooling::FirstToken => tokens.row(0).to_owned(),
        };
        FusedEmbedding::from_vec(layer_norm(pooled.view()).to_vec())
    }

    pub fn fuse_image(
        &self,
        backend: &dyn EmbedderBackend,
        image: &ImageBuffer,
    ) -> Result<FusedEmbedding> {
        self.fuse(&backend.embed_image(image)?)
    }
}

pub fn build_fuser(config: FusionConfig) -> Result<Fuser> {
    Fuser::new(config)
}

/// Cosine of the fused embeddings of two triples.
pub fn fused_similarity(fuser: &Fuser, a: &FeatureTriple, b: &FeatureTriple) -> Result<f64> {
    fuser.fuse(a)?.cosine(&fuser.fuse(b)?)
}

/// [`fused_similarity`] on images, embedding both with `backend`.
pub fn fused_similarity_images(
    fuser: &Fuser,
    backend: &dyn EmbedderBackend,
    a: &ImageBuffer,
    b: &ImageBuffer,
) -> Result<f64> {
    fused_similarity(fuser, &backend.embed_image(a)?, &backend.embed_image(b)?)
}
