//! Content-addressed on-disk store for feature triples.
//!
//! Layout: `<root>/<backend id>/<sha256 hex>.bin`. Each file is one binary
//! record: a 16-byte header followed by `streams * d` little-endian `f32`s.
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `ADMC`                                 |
//! | 4      | 2    | version (u16 LE)                             |
//! | 6      | 2    | d (u16 LE)                                   |
//! | 8      | 1    | stream count                                 |
//! | 9      | 3    | reserved, zero                               |
//! | 12     | 4    | first 4 bytes of SHA-256(payload), u32 LE    |

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{EmbedderBackend, FeatureTriple, TextEmbedding};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const RECORD_MAGIC: &[u8; 4] = b"ADMC";
pub const RECORD_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// Hex SHA-256 of `raw image bytes ‖ backend id ‖ d (u64 LE)`.
pub fn content_digest(image: &ImageBuffer, backend_id: &str, d: usize) -> String {
    let mut h = Sha256::new();
    h.update(image.raw_bytes());
    h.update(backend_id.as_bytes());
    h.update((d as u64).to_le_bytes());
    hex::encode(h.finalize())
}

fn payload_checksum(payload: &[u8]) -> u32 {
    let digest = Sha256::digest(payload);
    u32::from_le_bytes(digest[..4].try_into().unwrap())
}

/// Serializes equal-length `f32` streams into one record.
pub fn encode_record(streams: &[&[f32]]) -> Result<Vec<u8>> {
    let d = streams.first().map_or(0, |s| s.len());
    if streams.is_empty() || streams.len() > u8::MAX as usize {
        return Err(Error::config(format!(
            "record needs 1..=255 streams, got {}",
            streams.len()
        )));
    }
    if d == 0 || d > u16::MAX as usize {
        return Err(Error::config(format!("record width {d} out of range")));
    }
    if let Some(s) = streams.iter().find(|s| s.len() != d) {
        return Err(Error::Shape {
            expected: d,
            actual: s.len(),
        });
    }
    let mut payload = Vec::with_capacity(streams.len() * d * 4);
    for s in streams {
        for v in s.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u16).to_le_bytes());
    out.push(streams.len() as u8);
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&payload_checksum(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a record; `key` only labels integrity errors.
pub fn decode_record(bytes: &[u8], key: &str) -> Result<Vec<Vec<f32>>> {
    let bad = |reason: String| Error::Integrity {
        key: key.to_string(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "record is {} bytes, shorter than header",
            bytes.len()
        )));
    }
    if &bytes[..4] != RECORD_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RECORD_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let d = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let streams = bytes[8] as usize;
    let stored_sum = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != d * streams * 4 {
        return Err(bad(format!(
            "payload is {} bytes, header declares {streams} x {d} floats",
            payload.len()
        )));
    }
    if payload_checksum(payload) != stored_sum {
        return Err(bad("checksum mismatch".into()));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(floats.chunks(d.max(1)).map(<[f32]>::to_vec).collect())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Append-only triple cache. Reads run concurrently; writes are serialized.
#[derive(Debug)]
pub struct EmbeddingCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, backend_id: &str, key: &str) -> PathBuf {
        self.root
            .join(sanitize(backend_id))
            .join(format!("{key}.bin"))
    }

    pub fn get(&self, backend_id: &str, key: &str) -> Result<Option<FeatureTriple>> {
        let path = self.entry_path(backend_id, key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut streams = decode_record(&bytes, key)?;
        if streams.len() != 3 {
            return Err(Error::Integrity {
                key: key.to_string(),
                reason: format!("expected 3 streams, found {}", streams.len()),
            });
        }
        let tex = streams.pop().unwrap();
        let clip = streams.pop().unwrap();
        let vis = streams.pop().unwrap();
        FeatureTriple::new(vis, clip, tex)
            .map(Some)
            .map_err(|e| Error::Integrity {
                key: key.to_string(),
                reason: e.to_string(),
            })
    }

    /// Stores `triple` under `key`. An existing entry is left untouched.
    pub fn put(&self, backend_id: &str, key: &str, triple: &FeatureTriple) -> Result<()> {
        let record = encode_record(&triple.streams())?;
        let path = self.entry_path(backend_id, key);
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, &record).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Wraps a backend with an [`EmbeddingCache`] for `embed_image`.
pub struct CachedBackend<B> {
    inner: B,
    cache: EmbeddingCache,
}

impl<B: EmbedderBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<B: EmbedderBackend> EmbedderBackend for CachedBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_image(&self, image: &ImageBuffer) -> Result<FeatureTriple> {
        let id = self.inner.id();
        let key = content_digest(image, &id, self.inner.dim());
        if let Some(hit) = self.cache.get(&id, &key)? {
            return Ok(hit);
        }
        let triple = self.inner.embed_image(image)?;
        self.cache.put(&id, &key, &triple)?;
        Ok(triple)
    }

    fn embed_text(&self, text: &str) -> Result<TextEmbedding> {
        self.inner.embed_text(text)
    }

    fn embed_image_global(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        self.inner.embed_image_global(image)
    }

    fn parallel_safe(&self) -> bool {
        self.inner.parallel_safe()
    }
}
