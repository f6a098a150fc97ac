//! Two-threshold copy decision.
//!
//! A pair is a copy when the fused cosine strictly exceeds `tau1`. Flagged
//! pairs are typed by the weighted stream score `s_bar = ω·(s_vis, s_clip,
//! s_tex)`: retrieve when `s_bar > tau2`, style otherwise.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{stream_similarities, EmbedderBackend, FeatureTriple};
use crate::fusion::Fuser;
use crate::image::ImageBuffer;

pub const DEFAULT_TAU1: f64 = 0.938;
pub const DEFAULT_TAU2: f64 = 0.970;
pub const DEFAULT_OMEGA: [f64; 3] = [0.24, 0.38, 0.38];

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionConfig {
    pub tau1: f64,
    pub tau2: f64,
    /// Weights for `(s_vis, s_clip, s_tex)`.
    pub omega: [f64; 3],
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            omega: DEFAULT_OMEGA,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigViolation {
    Tau1OutOfRange(f64),
    Tau2OutOfRange(f64),
    NegativeWeight { index: usize, value: f64 },
    NonFiniteWeight { index: usize },
    WeightSum(f64),
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tau1OutOfRange(v) => write!(f, "tau1 = {v} is outside (0, 1)"),
            Self::Tau2OutOfRange(v) => write!(f, "tau2 = {v} is outside (0, 1)"),
            Self::NegativeWeight { index, value } => {
                write!(f, "omega[{index}] = {value} is negative")
            }
            Self::NonFiniteWeight { index } => write!(f, "omega[{index}] is not finite"),
            Self::WeightSum(s) => write!(f, "omega sums to {s}, expected 1"),
        }
    }
}

fn open_unit(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

fn weight_violations(omega: &[f64; 3]) -> Vec<ConfigViolation> {
    let mut out = Vec::new();
    for (index, &value) in omega.iter().enumerate() {
        if !value.is_finite() {
            out.push(ConfigViolation::NonFiniteWeight { index });
        } else if value < 0.0 {
            out.push(ConfigViolation::NegativeWeight { index, value });
        }
    }
    let sum: f64 = omega.iter().sum();
    if sum.is_finite() && (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        out.push(ConfigViolation::WeightSum(sum));
    }
    out
}

/// Every violated invariant of `config`; empty when valid.
pub fn validate_config(config: &DecisionConfig) -> Vec<ConfigViolation> {
    let mut out = Vec::new();
    if !open_unit(config.tau1) {
        out.push(ConfigViolation::Tau1OutOfRange(config.tau1));
    }
    if !open_unit(config.tau2) {
        out.push(ConfigViolation::Tau2OutOfRange(config.tau2));
    }
    out.extend(weight_violations(&config.omega));
    out
}

fn violations_to_error(v: Vec<ConfigViolation>) -> Result<()> {
    if v.is_empty() {
        return Ok(());
    }
    let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
    Err(Error::config(msg.join("; ")))
}

impl DecisionConfig {
    pub fn check(&self) -> Result<()> {
        violations_to_error(validate_config(self))
    }
}

/// `ω1·s_vis + ω2·s_clip + ω3·s_tex`.
pub fn weighted_score(streams: [f64; 3], omega: [f64; 3]) -> Result<f64> {
    violations_to_error(weight_violations(&omega))?;
    Ok(omega[0] * streams[0] + omega[1] * streams[1] + omega[2] * streams[2])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyType {
    Retrieve,
    Style,
    NotCopy,
}

impl CopyType {
    pub fn as_str(self) -> &'static str {
        match self {
            CopyType::Retrieve => "retrieve",
            CopyType::Style => "style",
            CopyType::NotCopy => "not_copy",
        }
    }
}

impl fmt::Display for CopyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSimilarities {
    pub s_fus: f64,
    pub s_vis: f64,
    pub s_clip: f64,
    pub s_tex: f64,
    /// Present only when the pair passed the copy gate.
    pub s_bar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyVerdict {
    pub is_copy: bool,
    pub copy_type: CopyType,
    pub scores: StreamSimilarities,
}

impl CopyVerdict {
    /// `copy_type == NotCopy` exactly when `!is_copy`.
    pub fn is_consistent(&self) -> bool {
        (self.copy_type == CopyType::NotCopy) != self.is_copy
            && (self.is_copy == self.scores.s_bar.is_some())
    }
}

/// Applies the two-threshold rule to precomputed similarities.
pub fn classify(s_fus: f64, streams: [f64; 3], config: &DecisionConfig) -> Result<CopyVerdict> {
    config.check()?;
    let [s_vis, s_clip, s_tex] = streams;
    let mut scores = StreamSimilarities {
        s_fus,
        s_vis,
        s_clip,
        s_tex,
        s_bar: None,
    };
    if s_fus <= config.tau1 {
        return Ok(CopyVerdict {
            is_copy: false,
            copy_type: CopyType::NotCopy,
            scores,
        });
    }
    let s_bar = weighted_score(streams, config.omega)?;
    scores.s_bar = Some(s_bar);
    let copy_type = if s_bar > config.tau2 {
        CopyType::Retrieve
    } else {
        CopyType::Style
    };
    Ok(CopyVerdict {
        is_copy: true,
        copy_type,
        scores,
    })
}

/// Verdict for precomputed triples of the generated and reference images.
pub fn decide_triples(
    g: &FeatureTriple,
    r: &FeatureTriple,
    fuser: &Fuser,
    config: &DecisionConfig,
) -> Result<CopyVerdict> {
    config.check()?;
    let s_fus = fuser.fuse(g)?.cosine(&fuser.fuse(r)?)?;
    // Stream similarities come from the raw backbone outputs, upstream of fusion.
    let streams = stream_similarities(g, r)?;
    classify(s_fus, streams, config)
}

/// Full copy decision for a generated image `g` against reference `r`.
pub fn decide(
    g: &ImageBuffer,
    r: &ImageBuffer,
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
    config: &DecisionConfig,
) -> Result<CopyVerdict> {
    config.check()?;
    let tg = backend.embed_image(g)?;
    let tr = backend.embed_image(r)?;
    decide_triples(&tg, &tr, fuser, config)
}

/// One line of verdict JSONL output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub query: String,
    pub reference: String,
    pub s_fus: f64,
    pub s_vis: f64,
    pub s_clip: f64,
    pub s_tex: f64,
    pub s_bar: Option<f64>,
    pub is_copy: bool,
    pub copy_type: CopyType,
}

impl VerdictRecord {
    pub fn new(query: impl Into<String>, reference: impl Into<String>, v: &CopyVerdict) -> Self {
        Self {
            query: query.into(),
            reference: reference.into(),
            s_fus: v.scores.s_fus,
            s_vis: v.scores.s_vis,
            s_clip: v.scores.s_clip,
            s_tex: v.scores.s_tex,
            s_bar: v.scores.s_bar,
            is_copy: v.is_copy,
            copy_type: v.copy_type,
        }
    }
}
