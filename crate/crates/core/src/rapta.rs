//! Region-aware prompt augmentation.
//!
//! Detector proposals are merged with greedy NMS, filtered by confidence,
//! and the top `M` survivors are turned into coarse grid-position tokens.
//! A small template set instantiates region-aware variants of the base
//! prompt; each variant is scored against the image in a joint text/image
//! space and one is drawn with probability proportional to
//! `max(S_v, 0)^gamma`.

use std::fmt;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{cosine, EmbedderBackend, TextEmbedding};
use crate::image::ImageBuffer;
use crate::seeding::rng_for;

const TAG_PAIR: u64 = 0x5041_4952;
const TAG_SAMPLE: u64 = 0x5341_4d50;

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("box has non-finite coordinates"));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::data(format!("degenerate box {self:?}")));
        }
        if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > width as f64 || self.y2 > height as f64 {
            return Err(Error::data(format!(
                "box {self:?} outside {width}x{height} image"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_label: String,
    pub confidence: f64,
}

impl RegionProposal {
    pub fn new(bbox: BBox, class_label: impl Into<String>, confidence: f64) -> Self {
        Self {
            bbox,
            class_label: class_label.into(),
            confidence,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::data(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        self.bbox.check(width, height)
    }
}

/// Object detector adapter. Must be deterministic per instance.
pub trait DetectorBackend: Send + Sync {
    fn detect(&self, image: &ImageBuffer) -> Result<Vec<RegionProposal>>;
}

/// Returns a fixed list of proposals regardless of the image.
#[derive(Clone, Debug, Default)]
pub struct ScriptedDetector {
    pub proposals: Vec<RegionProposal>,
}

impl ScriptedDetector {
    pub fn new(proposals: Vec<RegionProposal>) -> Self {
        Self { proposals }
    }

    /// Reads a JSON array of proposals.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let proposals = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self { proposals })
    }
}

impl DetectorBackend for ScriptedDetector {
    fn detect(&self, _image: &ImageBuffer) -> Result<Vec<RegionProposal>> {
        Ok(self.proposals.clone())
    }
}

/// Stable sort by descending confidence.
fn by_confidence(proposals: &[RegionProposal]) -> Vec<RegionProposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    sorted
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending confidence (input order breaks ties);
/// each kept box suppresses every later box with IoU above `tau_nms`.
pub fn nms(proposals: &[RegionProposal], tau_nms: f64) -> Vec<RegionProposal> {
    let sorted = by_confidence(proposals);
    let mut suppressed = vec![false; sorted.len()];
    let mut kept = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        for j in i + 1..sorted.len() {
            if !suppressed[j] && sorted[i].bbox.iou(&sorted[j].bbox) > tau_nms {
                suppressed[j] = true;
            }
        }
        kept.push(sorted[i].clone());
    }
    kept
}

/// Keeps proposals with confidence strictly above `tau_b`, then the first
/// `top_m` by confidence.
pub fn filter_and_rank(
    proposals: &[RegionProposal],
    tau_b: f64,
    top_m: usize,
) -> Vec<RegionProposal> {
    let mut kept: Vec<RegionProposal> = by_confidence(proposals)
        .into_iter()
        .filter(|p| p.confidence > tau_b)
        .collect();
    kept.truncate(top_m);
    kept
}

const GRID_3X3: [[&str; 3]; 3] = [
    ["top-left", "top-center", "top-right"],
    ["middle-left", "center", "middle-right"],
    ["bottom-left", "bottom-center", "bottom-right"],
];

/// Coarse location of a box center.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPosition {
    pub row: usize,
    pub col: usize,
    pub token: String,
}

impl fmt::Display for GridPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token)
    }
}

fn grid_cell(u: f64, cells: usize) -> usize {
    ((u * cells as f64).floor() as usize).min(cells - 1)
}

/// Position token for a normalized center `(u, v)` in `[0, 1]^2`.
///
/// A coordinate on an interior boundary belongs to the higher-index cell;
/// 1.0 belongs to the last cell.
pub fn grid_position_normalized(u: f64, v: f64, rows: usize, cols: usize) -> Result<GridPosition> {
    if rows == 0 || cols == 0 {
        return Err(Error::config("grid needs at least one row and column"));
    }
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::data(format!(
            "normalized center ({u}, {v}) outside [0, 1]"
        )));
    }
    let (row, col) = (grid_cell(v, rows), grid_cell(u, cols));
    let token = if rows == 3 && cols == 3 {
        GRID_3X3[row][col].to_string()
    } else {
        format!("r{row}c{col}")
    };
    Ok(GridPosition { row, col, token })
}

pub fn grid_position(
    bbox: &BBox,
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
) -> Result<GridPosition> {
    bbox.check(width, height)?;
    let u = (bbox.x1 + bbox.x2) / (2.0 * width as f64);
    let v = (bbox.y1 + bbox.y2) / (2.0 * height as f64);
    grid_position_normalized(u, v, rows, cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Prompt,
    Class,
    OtherClass,
    Position,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

/// Fill-in caption template with `⟨p⟩`, `⟨c⟩`, `⟨c'⟩` and `⟨pos⟩`
/// placeholders (ASCII `<...>` is accepted too).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    source: String,
    segments: Vec<Segment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    /// Uses at most one region: `p`, `c`, `pos`.
    Single,
    /// Uses two distinct regions: `p`, `c`, `c'`.
    Pair,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = source.chars();
        while let Some(ch) = chars.next() {
            let close = match ch {
                '⟨' => '⟩',
                '<' => '>',
                _ => {
                    text.push(ch);
                    continue;
                }
            };
            let mut name = String::new();
            let mut closed = false;
            for inner in chars.by_ref() {
                if inner == close {
                    closed = true;
                    break;
                }
                name.push(inner);
            }
            if !closed {
                return Err(Error::Template(format!(
                    "unclosed placeholder `{ch}{name}` in template {source:?}"
                )));
            }
            let slot = match name.trim() {
                "p" => Slot::Prompt,
                "c" => Slot::Class,
                "c'" | "c’" => Slot::OtherClass,
                "pos" => Slot::Position,
                other => {
                    return Err(Error::Template(format!(
                        "unknown placeholder `{ch}{other}{close}` in template {source:?}"
                    )))
                }
            };
            if !text.is_empty() {
                segments.push(Segment::Text(std::mem::take(&mut text)));
            }
            segments.push(Segment::Slot(slot));
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        let t = Self {
            source: source.to_string(),
            segments,
        };
        if t.uses(Slot::OtherClass) && t.uses(Slot::Position) {
            return Err(Error::Template(format!(
                "template {source:?} mixes `pos` with `c'`; pair templates take only p, c, c'"
            )));
        }
        Ok(t)
    }

    fn uses(&self, slot: Slot) -> bool {
        self.segments.contains(&Segment::Slot(slot))
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn kind(&self) -> TemplateKind {
        if self.uses(Slot::OtherClass) {
            TemplateKind::Pair
        } else {
            TemplateKind::Single
        }
    }

    pub fn render(&self, prompt: &str, class: &str, position: &str, other_class: &str) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.as_str(),
                Segment::Slot(Slot::Prompt) => prompt,
                Segment::Slot(Slot::Class) => class,
                Segment::Slot(Slot::OtherClass) => other_class,
                Segment::Slot(Slot::Position) => position,
            })
            .collect()
    }
}

/// Parses a template file: one template per non-blank line.
pub fn parse_templates(text: &str) -> Result<Vec<Template>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t = Template::parse(line.trim_end())
            .map_err(|e| Error::Template(format!("line {}: {e}", n + 1)))?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Template("template file has no templates".into()));
    }
    Ok(out)
}

pub fn load_templates(path: &Path) -> Result<Vec<Template>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_templates(&text).map_err(|e| match e {
        Error::Template(msg) => Error::Template(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn default_templates() -> Vec<String> {
    vec![
        "⟨p⟩, with a ⟨c⟩ in the ⟨pos⟩".to_string(),
        "⟨p⟩, featuring ⟨c⟩ and ⟨c'⟩".to_string(),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaptaConfig {
    pub tau_nms: f64,
    pub tau_b: f64,
    pub top_m: usize,
    pub templates: Vec<String>,
    pub gamma: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for RaptaConfig {
    fn default() -> Self {
        Self {
            tau_nms: 0.5,
            tau_b: 0.7,
            top_m: 3,
            templates: default_templates(),
            gamma: 2.0,
            grid_rows: 3,
            grid_cols: 3,
        }
    }
}

impl RaptaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_nms > 0.0 && self.tau_nms <= 1.0) {
            return Err(Error::config(format!(
                "tau_nms = {} outside (0, 1]",
                self.tau_nms
            )));
        }
        if !(0.0..1.0).contains(&self.tau_b) {
            return Err(Error::config(format!(
                "tau_b = {} outside [0, 1)",
                self.tau_b
            )));
        }
        if self.top_m == 0 {
            return Err(Error::config("top_m must be positive"));
        }
        if self.templates.is_empty() {
            return Err(Error::config("at least one template is required"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma = {} must be positive",
                self.gamma
            )));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::config("grid needs at least one row and column"));
        }
        self.parsed_templates().map(|_| ())
    }

    pub fn parsed_templates(&self) -> Result<Vec<Template>> {
        self.templates.iter().map(|t| Template::parse(t)).collect()
    }
}

/// A region that survived filtering, with its grid token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeptRegion {
    pub proposal: RegionProposal,
    pub position: GridPosition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariantSource {
    Base,
    Template {
        template: usize,
        regions: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub text: String,
    pub source: VariantSource,
    /// Consistency score `S_v`, filled in by [`score_and_sample`].
    pub consistency: Option<f64>,
    /// `max(S_v, 0)^gamma`.
    pub weight: Option<f64>,
    pub probability: Option<f64>,
}

impl PromptVariant {
    fn new(text: String, source: VariantSource) -> Self {
        Self {
            text,
            source,
            consistency: None,
            weight: None,
            probability: None,
        }
    }
}

/// Builds the variant pool: the base prompt first, then every
/// (region, single-region template) instantiation in region order, then
/// pair templates for one seeded ordered pair `i != i'`. Texts that repeat
/// an earlier variant are dropped.
pub fn build_variant_pool(
    prompt: &str,
    regions: &[KeptRegion],
    templates: &[Template],
    seed: u64,
) -> Vec<PromptVariant> {
    let mut pool = vec![PromptVariant::new(prompt.to_string(), VariantSource::Base)];
    let push = |pool: &mut Vec<PromptVariant>, text: String, source| {
        if !pool.iter().any(|v| v.text == text) {
            pool.push(PromptVariant::new(text, source));
        }
    };
    for (i, region) in regions.iter().enumerate() {
        for (j, t) in templates.iter().enumerate() {
            if t.kind() == TemplateKind::Single {
                let text = t.render(
                    prompt,
                    &region.proposal.class_label,
                    &region.position.token,
                    "",
                );
                push(
                    &mut pool,
                    text,
                    VariantSource::Template {
                        template: j,
                        regions: vec![i],
                    },
                );
            }
        }
    }
    let has_pair = templates.iter().any(|t| t.kind() == TemplateKind::Pair);
    if has_pair && regions.len() >= 2 {
        let mut rng = rng_for(seed, TAG_PAIR);
        let n = regions.len();
        let first = rng.random_range(0..n);
        let mut second = rng.random_range(0..n - 1);
        if second >= first {
            second += 1;
        }
        let (a, b) = (&regions[first], &regions[second]);
        for (j, t) in templates.iter().enumerate() {
            if t.kind() == TemplateKind::Pair {
                let text = t.render(
                    prompt,
                    &a.proposal.class_label,
                    &a.position.token,
                    &b.proposal.class_label,
                );
                push(
                    &mut pool,
                    text,
                    VariantSource::Template {
                        template: j,
                        regions: vec![first, second],
                    },
                );
            }
        }
    }
    pool
}

/// Sampling distribution `π(v) ∝ max(S_v, 0)^gamma`.
///
/// When every weight is zero the whole mass goes to index 0, the base
/// prompt. The flag reports whether that fallback fired.
pub fn sampling_distribution(scores: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    if scores.is_empty() {
        return Err(Error::data("variant pool is empty"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!("gamma = {gamma} must be positive")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite consistency score".into()));
    }
    let weights: Vec<f64> = scores.iter().map(|&s| s.max(0.0).powf(gamma)).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        let probs = weights.iter().map(|w| w / total).collect();
        Ok((weights, probs, false))
    } else {
        let mut probs = vec![0.0; scores.len()];
        probs[0] = 1.0;
        Ok((weights, probs, true))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPrompt {
    pub index: usize,
    pub text: String,
    pub embedding: TextEmbedding,
    pub pool: Vec<PromptVariant>,
    pub fallback_to_base: bool,
}

/// Scores every variant against the image, fills in `S_v`, `w_v` and `π`,
/// and draws one variant with a generator seeded from `seed`.
pub fn score_and_sample(
    pool: &[PromptVariant],
    image: &ImageBuffer,
    backend: &dyn EmbedderBackend,
    gamma: f64,
    seed: u64,
) -> Result<SampledPrompt> {
    if pool.is_empty() {
        return Err(Error::data("variant pool is empty"));
    }
    let global = backend.embed_image_global(image)?;
    let scores = pool
        .iter()
        .map(|v| cosine(&global, &backend.embed_text(&v.text)?.vec))
        .collect::<Result<Vec<f64>>>()?;
    let (weights, probs, fallback) = sampling_distribution(&scores, gamma)?;
    let index = if pool.len() == 1 || fallback {
        0
    } else {
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Numeric(e.to_string()))?;
        dist.sample(&mut rng_for(seed, TAG_SAMPLE))
    };
    let annotated = pool
        .iter()
        .zip(scores.iter().zip(weights.iter().zip(&probs)))
        .map(|(v, (&s, (&w, &p)))| PromptVariant {
            consistency: Some(s),
            weight: Some(w),
            probability: Some(p),
            ..v.clone()
        })
        .collect();
    let text = pool[index].text.clone();
    Ok(SampledPrompt {
        index,
        embedding: backend.embed_text(&text)?,
        text,
        pool: annotated,
        fallback_to_base: fallback,
    })
}

/// Audit record of one augmentation call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub prompt: String,
    pub seed: u64,
    pub proposals: Vec<RegionProposal>,
    pub merged: Vec<RegionProposal>,
    pub kept: Vec<KeptRegion>,
    pub pool: Vec<PromptVariant>,
    pub sampled_index: usize,
    pub sampled: String,
    pub fallback_to_base: bool,
}

/// Full augmentation for one `(image, prompt)` training pair. Returns the
/// trace and the text embedding of the sampled prompt.
pub fn augment(
    image: &ImageBuffer,
    prompt: &str,
    detector: &dyn DetectorBackend,
    backend: &dyn EmbedderBackend,
    config: &RaptaConfig,
    seed: u64,
) -> Result<(AugmentTrace, TextEmbedding)> {
    config.validate()?;
    if prompt.trim().is_empty() {
        return Err(Error::data("base prompt is empty"));
    }
    let templates = config.parsed_templates()?;
    let proposals = detector.detect(image)?;
    for p in &proposals {
        p.validate(image.width(), image.height())?;
    }
    let merged = nms(&proposals, config.tau_nms);
    let kept = filter_and_rank(&merged, config.tau_b, config.top_m)
        .into_iter()
        .map(|proposal| {
            let position = grid_position(
                &proposal.bbox,
                image.width(),
                image.height(),
                config.grid_rows,
                config.grid_cols,
            )?;
            Ok(KeptRegion { proposal, position })
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = build_variant_pool(prompt, &kept, &templates, seed);
    let sampled = score_and_sample(&pool, image, backend, config.gamma, seed)?;
    let trace = AugmentTrace {
        prompt: prompt.to_string(),
        seed,
        proposals,
        merged,
        kept,
        pool: sampled.pool,
        sampled_index: sampled.index,
        sampled: sampled.text,
        fallback_to_base: sampled.fallback_to_base,
    };
    Ok((trace, sampled.embedding))
}

/// Noise-prediction objective: mean of `(noise - prediction)^2`.
pub fn diffusion_loss(noise: &[f64], prediction: &[f64]) -> Result<f64> {
    if noise.len() != prediction.len() {
        return Err(Error::Shape {
            expected: noise.len(),
            actual: prediction.len(),
        });
    }
    if noise.is_empty() {
        return Err(Error::data("diffusion loss of empty tensors"));
    }
    let sum: f64 = noise
        .iter()
        .zip(prediction)
        .map(|(e, p)| (e - p) * (e - p))
        .sum();
    Ok(sum / noise.len() as f64)
}
