//! Reference gallery: indexing, exact top-k retrieval, copy rate, pair
//! manifest evaluation and the SSIM baseline.

mod manifest;
mod ssim;

pub use manifest::{
    evaluate_manifest, summarize, EvalReport, PairLabel, PairManifest, PairRow, TypeConfusion,
};
pub use ssim::{
    baseline_metric, ssim, Baseline, SimilarityMetric, SsimMetric, SSIM_C1, SSIM_C2, SSIM_WINDOW,
};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::write_atomic;
use crate::decision::{classify, CopyVerdict, DecisionConfig};
use crate::error::{Error, Result};
use crate::features::{
    decode_record, encode_record, stream_similarities, EmbedderBackend, FeatureTriple,
};
use crate::fusion::{FusedEmbedding, Fuser};
use crate::image::ImageBuffer;

const HEADER_FILE: &str = "header.json";
const RECORD_DIR: &str = "records";
const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub id: String,
    pub source: PathBuf,
    pub fused: FusedEmbedding,
    pub triple: FeatureTriple,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    pub fuser_digest: String,
    pub backend_id: String,
    pub entries: Vec<GalleryEntry>,
}

/// An image to index: identifier plus the file it is read from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GalleryItem {
    pub id: String,
    pub source: PathBuf,
}

/// Per-item failure collected during a build.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub id: String,
    pub source: PathBuf,
    pub error: String,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    fuser_digest: String,
    backend_id: String,
    d_model: usize,
    dim: usize,
    count: usize,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    id: String,
    source: PathBuf,
}

/// A single retrieval hit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub id: String,
    pub score: f64,
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::data(format!("duplicate gallery id `{id}`")));
        }
    }
    Ok(())
}

/// Lists the PNG/JPEG files of a directory, sorted by name; ids are file stems.
pub fn gallery_items(dir: &Path) -> Result<Vec<GalleryItem>> {
    let mut items = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::data(format!("{}: non-UTF-8 file name", path.display())))?
                .to_string();
            items.push(GalleryItem { id, source: path });
        }
    }
    items.sort_by(|a, b| a.source.cmp(&b.source));
    if items.is_empty() {
        return Err(Error::data(format!(
            "{}: no PNG or JPEG images",
            dir.display()
        )));
    }
    Ok(items)
}

impl GalleryIndex {
    pub fn new(
        fuser_digest: impl Into<String>,
        backend_id: impl Into<String>,
        entries: Vec<GalleryEntry>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::data("gallery index has no entries"));
        }
        check_unique(entries.iter().map(|e| e.id.as_str()))?;
        Ok(Self {
            fuser_digest: fuser_digest.into(),
            backend_id: backend_id.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&GalleryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Writes `header.json` plus one binary triple record per entry.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let records = dir.join(RECORD_DIR);
        fs::create_dir_all(&records).map_err(|e| Error::io(&records, e))?;
        for (i, entry) in self.entries.iter().enumerate() {
            let bytes = encode_record(&entry.triple.streams())?;
            write_atomic(&records.join(format!("{i:06}.bin")), &bytes)?;
        }
        let first = &self.entries[0];
        let header = IndexHeader {
            version: INDEX_VERSION,
            fuser_digest: self.fuser_digest.clone(),
            backend_id: self.backend_id.clone(),
            d_model: first.fused.vec.len(),
            dim: first.triple.dim(),
            count: self.entries.len(),
            entries: self
                .entries
                .iter()
                .map(|e| HeaderEntry {
                    id: e.id.clone(),
                    source: e.source.clone(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        write_atomic(&dir.join(HEADER_FILE), format!("{text}\n").as_bytes())
    }

    /// Loads an index and re-fuses the stored triples with `fuser`, which
    /// must carry the digest the index was built with.
    pub fn load(dir: &Path, fuser: &Fuser, backend_id: &str) -> Result<Self> {
        let header_path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: IndexHeader = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: header_path.clone(),
            message: e.to_string(),
        })?;
        if header.version != INDEX_VERSION {
            return Err(Error::StaleIndex(format!(
                "{}: index format version {} (expected {INDEX_VERSION}); rebuild with `copyforge index`",
                dir.display(),
                header.version
            )));
        }
        if header.fuser_digest != fuser.digest() {
            return Err(Error::StaleIndex(format!(
                "{}: built with fuser {} but the current configuration is {}; rebuild with `copyforge index`",
                dir.display(),
                header.fuser_digest,
                fuser.digest()
            )));
        }
        if header.backend_id != backend_id {
            return Err(Error::StaleIndex(format!(
                "{}: built with backend {} but the current backend is {backend_id}; rebuild with `copyforge index`",
                dir.display(),
                header.backend_id
            )));
        }
        if header.count != header.entries.len() {
            return Err(Error::Integrity {
                key: header_path.display().to_string(),
                reason: format!(
                    "count {} but {} entries",
                    header.count,
                    header.entries.len()
                ),
            });
        }
        let entries = header
            .entries
            .into_par_iter()
            .enumerate()
            .map(|(i, h)| {
                let path = dir.join(RECORD_DIR).join(format!("{i:06}.bin"));
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let mut streams = decode_record(&bytes, &path.display().to_string())?;
                if streams.len() != 3 {
                    return Err(Error::Integrity {
                        key: path.display().to_string(),
                        reason: format!("expected 3 streams, found {}", streams.len()),
                    });
                }
                let tex = streams.pop().expect("three streams");
                let clip = streams.pop().expect("three streams");
                let vis = streams.pop().expect("three streams");
                let triple = FeatureTriple::new(vis, clip, tex)?;
                Ok(GalleryEntry {
                    fused: fuser.fuse(&triple)?,
                    id: h.id,
                    source: h.source,
                    triple,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GalleryIndex::new(header.fuser_digest, header.backend_id, entries)
    }
}

fn embed(
    image: &ImageBuffer,
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
) -> Result<(FeatureTriple, FusedEmbedding)> {
    let triple = backend.embed_image(image)?;
    let fused = fuser.fuse(&triple)?;
    Ok((triple, fused))
}

/// Indexes in-memory images. Any failure is fatal.
pub fn index_images(
    images: &[(String, ImageBuffer)],
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
) -> Result<GalleryIndex> {
    if images.is_empty() {
        return Err(Error::data("no images to index"));
    }
    check_unique(images.iter().map(|(id, _)| id.as_str()))?;
    let entries = images
        .par_iter()
        .map(|(id, img)| {
            let (triple, fused) = embed(img, backend, fuser)?;
            Ok(GalleryEntry {
                id: id.clone(),
                source: PathBuf::new(),
                fused,
                triple,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GalleryIndex::new(fuser.digest(), backend.id(), entries)
}

/// Reads and indexes image files. Unreadable or unembeddable items are
/// returned as failures; an index with no entries is an error.
pub fn build_index(
    items: &[GalleryItem],
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
) -> Result<(GalleryIndex, Vec<ItemFailure>)> {
    if items.is_empty() {
        return Err(Error::data("no images to index"));
    }
    check_unique(items.iter().map(|i| i.id.as_str()))?;
    let results: Vec<_> = items
        .par_iter()
        .map(|item| {
            ImageBuffer::load(&item.source)
                .and_then(|img| embed(&img, backend, fuser))
                .map_err(|e| ItemFailure {
                    id: item.id.clone(),
                    source: item.source.clone(),
                    error: e.to_string(),
                })
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (item, result) in items.iter().zip(results) {
        match result {
            Ok((triple, fused)) => entries.push(GalleryEntry {
                id: item.id.clone(),
                source: item.source.clone(),
                fused,
                triple,
            }),
            Err(f) => failures.push(f),
        }
    }
    if entries.is_empty() {
        let detail = failures
            .first()
            .map(|f| format!(": {}", f.error))
            .unwrap_or_default();
        return Err(Error::data(format!(
            "no gallery image could be indexed{detail}"
        )));
    }
    Ok((
        GalleryIndex::new(fuser.digest(), backend.id(), entries)?,
        failures,
    ))
}

/// Exact ranking by fused cosine, descending, ties broken by id.
pub fn top_k(query: &FusedEmbedding, index: &GalleryIndex, k: usize) -> Result<Vec<Match>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if index.is_empty() {
        return Err(Error::data("gallery index is empty"));
    }
    let mut hits = index
        .entries
        .iter()
        .map(|e| {
            Ok(Match {
                id: e.id.clone(),
                score: query.cosine(&e.fused)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    hits.truncate(k);
    Ok(hits)
}

pub fn top_k_image(
    query: &ImageBuffer,
    index: &GalleryIndex,
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
    k: usize,
) -> Result<Vec<Match>> {
    top_k(&fuser.fuse_image(backend, query)?, index, k)
}

/// Outcome for one query: its best match and the verdict against it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryVerdict {
    pub query: String,
    pub reference: String,
    pub verdict: CopyVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyRateReport {
    pub rate: f64,
    pub flagged: usize,
    pub total: usize,
    pub verdicts: Vec<QueryVerdict>,
}

/// An embedded query.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub fused: FusedEmbedding,
    pub triple: FeatureTriple,
}

/// Fraction of queries whose top-1 fused similarity exceeds `tau1`.
pub fn copy_rate_embedded(
    queries: &[Query],
    index: &GalleryIndex,
    config: &DecisionConfig,
) -> Result<CopyRateReport> {
    config.check()?;
    if queries.is_empty() {
        return Err(Error::data("no queries"));
    }
    let verdicts = queries
        .par_iter()
        .map(|q| {
            let best = top_k(&q.fused, index, 1)?.remove(0);
            let entry = index.get(&best.id).expect("hit comes from the index");
            let streams = stream_similarities(&q.triple, &entry.triple)?;
            Ok(QueryVerdict {
                query: q.id.clone(),
                reference: best.id,
                verdict: classify(best.score, streams, config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flagged = verdicts.iter().filter(|v| v.verdict.is_copy).count();
    Ok(CopyRateReport {
        rate: flagged as f64 / queries.len() as f64,
        flagged,
        total: queries.len(),
        verdicts,
    })
}

pub fn copy_rate(
    queries: &[(String, ImageBuffer)],
    index: &GalleryIndex,
    backend: &dyn EmbedderBackend,
    fuser: &Fuser,
    config: &DecisionConfig,
) -> Result<CopyRateReport> {
    let embedded = queries
        .par_iter()
        .map(|(id, img)| {
            let (triple, fused) = embed(img, backend, fuser)?;
            Ok(Query {
                id: id.clone(),
                fused,
                triple,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    copy_rate_embedded(&embedded, index, config)
}
