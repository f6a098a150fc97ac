use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::Confusion;
use crate::decision::{decide_triples, CopyType, CopyVerdict, DecisionConfig};
use crate::error::{Error, Result};
use crate::features::{EmbedderBackend, FeatureTriple};
use crate::fusion::Fuser;
use crate::image::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Retrieve,
    Style,
    Noncopy,
}

impl PairLabel {
    pub fn is_copy(self) -> bool {
        self != PairLabel::Noncopy
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairLabel::Retrieve => "retrieve",
            PairLabel::Style => "style",
            PairLabel::Noncopy => "noncopy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRow {
    pub query: PathBuf,
    pub reference: PathBuf,
    pub label: PairLabel,
}

/// Labeled (query, reference) pairs. Paths are resolved at load time.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairManifest {
    pub rows: Vec<PairRow>,
}

impl PairManifest {
    /// Reads JSONL rows `{query, reference, label}`. Relative paths are
    /// taken relative to the manifest's directory and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row: PairRow = serde_json::from_str(line).map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", n + 1),
            })?;
            for p in [&mut row.query, &mut row.reference] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    return Err(Error::data(format!(
                        "{}: line {}: {} does not exist",
                        path.display(),
                        n + 1,
                        p.display()
                    )));
                }
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Runs the copy decision on every pair, embedding each distinct image once.
    pub fn decide(
        &self,
        backend: &dyn EmbedderBackend,
        fuser: &Fuser,
        config: &DecisionConfig,
    ) -> Result<Vec<CopyVerdict>> {
        if self.rows.is_empty() {
            return Err(Error::data("manifest has no pairs"));
        }
        config.check()?;
        let paths: BTreeSet<&PathBuf> = self
            .rows
            .iter()
            .flat_map(|r| [&r.query, &r.reference])
            .collect();
        let triples: BTreeMap<&PathBuf, FeatureTriple> = paths
            .into_par_iter()
            .map(|p| Ok((p, backend.embed_image(&ImageBuffer::load(p)?)?)))
            .collect::<Result<_>>()?;
        self.rows
            .par_iter()
            .map(|r| decide_triples(&triples[&r.query], &triples[&r.reference], fuser, config))
            .collect()
    }
}

/// Counts of predicted copy type (columns) per true label (rows), over
/// pairs that passed the gate.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeConfusion {
    pub rows: BTreeMap<PairLabel, BTreeMap<CopyType, usize>>,
}

impl TypeConfusion {
    pub fn count(&self, label: PairLabel, predicted: CopyType) -> usize {
        self.rows
            .get(&label)
            .and_then(|r| r.get(&predicted))
            .copied()
            .unwrap_or(0)
    }

    pub fn row_total(&self, label: PairLabel) -> usize {
        self.rows.get(&label).map(|r| r.values().sum()).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of pairs flagged as copies.
    pub copy_rate: f64,
    pub type_confusion: TypeConfusion,
}

/// Gate metrics treat retrieve and style as positive.
pub fn summarize(labels: &[PairLabel], verdicts: &[CopyVerdict]) -> Result<EvalReport> {
    if labels.len() != verdicts.len() {
        return Err(Error::Shape {
            expected: labels.len(),
            actual: verdicts.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let mut c = Confusion::default();
    let mut types = TypeConfusion::default();
    for (&label, v) in labels.iter().zip(verdicts) {
        match (label.is_copy(), v.is_copy) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
        if v.is_copy {
            let row = types.rows.entry(label).or_default();
            *row.entry(v.copy_type).or_default() += 1;
        }
    }
    Ok(EvalReport {
        pairs: labels.len(),
        confusion: c,
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        copy_rate: (c.tp + c.fp) as f64 / labels.len() as f64,
        type_confusion: types,
    })
}

pub fn evaluate_manifest(
    manifest: &PairManifest,
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
    config: &DecisionConfig,
) -> Result<EvalReport> {
    let verdicts = manifest.decide(backend, fuser, config)?;
    let labels: Vec<_> = manifest.rows.iter().map(|r| r.label).collect();
    summarize(&labels, &verdicts)
}
