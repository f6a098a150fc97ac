//! Deterministic, weight-free embedder built from image statistics.
//!
//! Each stream starts from a small raw statistic vector and is mapped to
//! width `d` by a fixed Gaussian projection drawn from the seed:
//!
//! - `vis`: per-cell channel means on a 4x4 spatial grid
//! - `clip`: global 8-bin histograms per channel plus channel means
//! - `tex`: histogram of luma gradient magnitudes plus their mean
//!
//! Raw statistics are centred on their flat-image expectation and carry a
//! small constant bias term so the projection never sees a zero vector.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{EmbedderBackend, FeatureTriple, TextEmbedding};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::seeding::rng_for;

const VIS_GRID: usize = 4;
const COLOR_BINS: usize = 8;
const GRAD_BINS: usize = 12;
const BIAS: f64 = 0.1;
const TEXT_HASHES: u32 = 4;

const VIS_LEN: usize = VIS_GRID * VIS_GRID * 3 + 1;
const CLIP_LEN: usize = COLOR_BINS * 3 + 3 + 1;
const TEX_LEN: usize = GRAD_BINS + 1 + 1;

const TAG_VIS: u64 = 1;
const TAG_CLIP: u64 = 2;
const TAG_TEX: u64 = 3;
const TAG_ANCHOR: u64 = 4;

/// Row-major `rows x cols` Gaussian matrix scaled by `1/sqrt(cols)`.
#[derive(Clone, Debug)]
struct Projection {
    cols: usize,
    weights: Vec<f64>,
}

impl Projection {
    fn seeded(rows: usize, cols: usize, seed: u64, tag: u64) -> Self {
        let mut rng = rng_for(seed, tag);
        let scale = 1.0 / (cols as f64).sqrt();
        let weights = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self { cols, weights }
    }

    fn apply(&self, raw: &[f64]) -> Vec<f64> {
        debug_assert_eq!(raw.len(), self.cols);
        self.weights
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(raw).map(|(w, x)| w * x).sum())
            .collect()
    }
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric("cannot normalize projected stream".into()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Statistic-based embedder; the only backend that ships built in.
#[derive(Clone, Debug)]
pub struct SyntheticEmbedder {
    d: usize,
    seed: u64,
    vis: Projection,
    clip: Projection,
    tex: Projection,
    anchor: Vec<f64>,
}

impl SyntheticEmbedder {
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d < 4 {
            return Err(Error::config(format!(
                "embedding dimension must be at least 4, got {d}"
            )));
        }
        if d > u16::MAX as usize {
            return Err(Error::config(format!(
                "embedding dimension {d} exceeds {}",
                u16::MAX
            )));
        }
        let anchor = Projection::seeded(d, 1, seed, TAG_ANCHOR).apply(&[1.0]);
        Ok(Self {
            d,
            seed,
            vis: Projection::seeded(d, VIS_LEN, seed, TAG_VIS),
            clip: Projection::seeded(d, CLIP_LEN, seed, TAG_CLIP),
            tex: Projection::seeded(d, TEX_LEN, seed, TAG_TEX),
            anchor: unit(anchor)?,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn clip_unit(&self, image: &ImageBuffer) -> Result<Vec<f64>> {
        unit(self.clip.apply(&color_stats(image)))
    }

    fn text_hash_vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        let lowered = text.to_lowercase();
        for token in lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            for k in 0..TEXT_HASHES {
                let mut h = Sha256::new();
                h.update(self.seed.to_le_bytes());
                h.update(k.to_le_bytes());
                h.update(token.as_bytes());
                let out = h.finalize();
                let idx = u64::from_le_bytes(out[..8].try_into().unwrap()) as usize % self.d;
                let sign = if out[8] & 1 == 0 { 1.0 } else { -1.0 };
                v[idx] += sign;
            }
        }
        v
    }
}

impl EmbedderBackend for SyntheticEmbedder {
    fn id(&self) -> String {
        format!("synthetic-v1-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<FeatureTriple> {
        let vis = unit(self.vis.apply(&cell_means(image)))?;
        let clip = self.clip_unit(image)?;
        let tex = unit(self.tex.apply(&gradient_stats(image)))?;
        FeatureTriple::new(to_f32(vis), to_f32(clip), to_f32(tex))
    }

    /// Hashed bag of words plus a shared anchor direction, so prompt/image
    /// consistency lands mostly in the positive range.
    fn embed_text(&self, text: &str) -> Result<TextEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::data("cannot embed empty text"));
        }
        let hashed = self.text_hash_vector(text);
        let norm = hashed.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vec: Vec<f64> = self
            .anchor
            .iter()
            .zip(&hashed)
            .map(|(a, h)| a + if norm > 0.0 { 0.5 * h / norm } else { 0.0 })
            .collect();
        Ok(TextEmbedding {
            vec: to_f32(unit(vec)?),
            source_text: text.to_string(),
        })
    }

    fn embed_image_global(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        let clip = self.clip_unit(image)?;
        let v = self
            .anchor
            .iter()
            .zip(&clip)
            .map(|(a, c)| a + 0.5 * c)
            .collect();
        Ok(to_f32(unit(v)?))
    }
}

/// One-shot form of [`SyntheticEmbedder::embed_image`].
pub fn synthetic_embed(image: &ImageBuffer, d: usize, seed: u64) -> Result<FeatureTriple> {
    SyntheticEmbedder::new(d, seed)?.embed_image(image)
}

fn cell_bounds(len: usize, cells: usize, i: usize) -> (usize, usize) {
    (i * len / cells, (i + 1) * len / cells)
}

fn cell_means(image: &ImageBuffer) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let mut raw = Vec::with_capacity(VIS_LEN);
    for gy in 0..VIS_GRID {
        let (y0, y1) = cell_bounds(h, VIS_GRID, gy);
        for gx in 0..VIS_GRID {
            let (x0, x1) = cell_bounds(w, VIS_GRID, gx);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += image.get(y, x, c);
                    }
                }
                raw.push(sum / n - 0.5);
            }
        }
    }
    raw.push(BIAS);
    raw
}

fn color_stats(image: &ImageBuffer) -> Vec<f64> {
    let mut hist = [[0usize; COLOR_BINS]; 3];
    let mut sums = [0.0f64; 3];
    for px in image.pixels().chunks_exact(3) {
        for c in 0..3 {
            let bin = ((px[c] * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1);
            hist[c][bin] += 1;
            sums[c] += px[c];
        }
    }
    let n = (image.height() * image.width()) as f64;
    let uniform = 1.0 / COLOR_BINS as f64;
    let mut raw = Vec::with_capacity(CLIP_LEN);
    for channel in &hist {
        raw.extend(channel.iter().map(|&k| k as f64 / n - uniform));
    }
    raw.extend(sums.iter().map(|s| s / n - 0.5));
    raw.push(BIAS);
    raw
}

fn gradient_stats(image: &ImageBuffer) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let luma = image.luma();
    let max_mag = std::f64::consts::SQRT_2;
    let mut hist = [0usize; GRAD_BINS];
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let here = luma[y * w + x];
            let gx = luma[y * w + x + 1] - here;
            let gy = luma[(y + 1) * w + x] - here;
            let mag = (gx * gx + gy * gy).sqrt();
            let bin = ((mag / max_mag * GRAD_BINS as f64) as usize).min(GRAD_BINS - 1);
            hist[bin] += 1;
            total += mag;
        }
    }
    let n = ((h - 1) * (w - 1)) as f64;
    let uniform = 1.0 / GRAD_BINS as f64;
    let mut raw: Vec<f64> = hist.iter().map(|&k| k as f64 / n - uniform).collect();
    raw.push(total / n);
    raw.push(BIAS);
    raw
}
