//! On-disk datasets: a JSON manifest plus one `SGPC` geometry blob per shape.
//!
//! Blob layout (little-endian): magic `SGPC`, u32 version, u32 n, u32 m,
//! `n x 3` f32 points, `n` u8 label indices, `m` u8 existence flags,
//! `m x m` u8 adjacency entries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::shape::PointCloud;
use crate::structure::{validate_structuregraph, StructureGraph};

pub const SCHEMA_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 4] = b"SGPC";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub structure_code: String,
    pub cloud: PointCloud,
    pub graph: StructureGraph,
}

impl ShapeRecord {
    pub fn validate(&self) -> Result<()> {
        validate_structuregraph(&self.graph, self.cloud.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub shape_id: String,
    pub structure_code: String,
    pub split: Split,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub category: String,
    pub m: usize,
    pub records: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(category: impl Into<String>, m: usize) -> Self {
        DatasetManifest { schema_version: SCHEMA_VERSION, category: category.into(), m, records: Vec::new() }
    }

    pub fn push(&mut self, record: &ShapeRecord, split: Split) {
        self.records.push(ManifestEntry {
            shape_id: record.shape_id.clone(),
            structure_code: record.structure_code.clone(),
            split,
            blob: format!("blobs/{}.sgpc", record.shape_id),
        });
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

/// Records paired with their manifest entries, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ShapeRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ShapeRecord> {
        self.manifest.records.iter().zip(&self.records).filter(|(e, _)| e.split == split).map(|(_, r)| r).collect()
    }

    /// Stable content hash over the manifest and every blob.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest).expect("manifest serializes"));
        for r in &self.records {
            h.update(encode_blob(r));
        }
        hex::encode(h.finalize())
    }
}

pub fn encode_blob(record: &ShapeRecord) -> Vec<u8> {
    let g = &record.graph;
    let (n, m) = (record.cloud.len(), g.m());
    let mut out = Vec::with_capacity(16 + 12 * n + n + m + m * m);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for p in record.cloud.points() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for i in 0..n {
        out.push(g.label_of(i).expect("validated record") as u8);
    }
    out.extend(g.existence().iter().map(|&b| u8::from(b)));
    out.extend(g.adjacency().iter().map(|&b| u8::from(b)));
    out
}

pub fn decode_blob(bytes: &[u8], shape_id: &str, structure_code: &str) -> Result<ShapeRecord> {
    let corrupt = |why: &str| Error::CorruptRecord(format!("{shape_id}: {why}"));
    if bytes.len() < 16 || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::SchemaVersionMismatch(format!("{shape_id}: bad blob magic")));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
    if word(1) != BLOB_VERSION as usize {
        return Err(Error::SchemaVersionMismatch(format!("{shape_id}: blob version {}", word(1))));
    }
    let (n, m) = (word(2), word(3));
    let expected = n.checked_mul(13).and_then(|x| x.checked_add(16 + m + m * m));
    if m == 0 || n == 0 || expected != Some(bytes.len()) {
        return Err(corrupt("length header does not match blob size"));
    }
    let mut off = 16;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0f32; 3];
        for c in &mut p {
            *c = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            off += 4;
        }
        points.push(p);
    }
    let labels: Vec<usize> = bytes[off..off + n].iter().map(|&b| b as usize).collect();
    off += n;
    let flag = |b: u8| match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(corrupt("non-binary flag")),
    };
    let existence = bytes[off..off + m].iter().map(|&b| flag(b)).collect::<Result<Vec<_>>>()?;
    off += m;
    let adjacency = bytes[off..off + m * m].iter().map(|&b| flag(b)).collect::<Result<Vec<_>>>()?;
    let cloud = PointCloud::new(points).map_err(|e| corrupt(&e.to_string()))?;
    let graph = StructureGraph::from_indices(&labels, existence, adjacency).map_err(|e| corrupt(&e.to_string()))?;
    let record = ShapeRecord { shape_id: shape_id.into(), structure_code: structure_code.into(), cloud, graph };
    record.validate().map_err(|e| corrupt(&e.to_string()))?;
    Ok(record)
}

/// Writes `manifest.json` and the blobs under `dir`.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, records: &[ShapeRecord]) -> Result<()> {
    if manifest.records.len() != records.len() {
        return Err(Error::DatasetInvalid(format!("{} manifest entries for {} records", manifest.records.len(), records.len())));
    }
    std::fs::create_dir_all(dir.join("blobs"))?;
    for (entry, record) in manifest.records.iter().zip(records) {
        record.validate()?;
        if entry.shape_id != record.shape_id || record.graph.m() != manifest.m {
            return Err(Error::DatasetInvalid(format!("record {} does not match its manifest entry", record.shape_id)));
        }
        write_atomic(&dir.join(&entry.blob), &encode_blob(record))?;
    }
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

/// Loads a dataset directory. A path ending in `train` or `test` whose parent
/// holds the manifest loads just that split.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (dir, only) = resolve_dataset_path(path)?;
    let text = std::fs::read(dir.join(MANIFEST_FILE))?;
    let mut manifest: DatasetManifest = serde_json::from_slice(&text).map_err(|e| Error::SchemaVersionMismatch(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch(format!("manifest schema {}, expected {SCHEMA_VERSION}", manifest.schema_version)));
    }
    if let Some(split) = only {
        manifest.records.retain(|r| r.split == split);
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let bytes = std::fs::read(dir.join(&e.blob))?;
        let record = decode_blob(&bytes, &e.shape_id, &e.structure_code)?;
        if record.graph.m() != manifest.m {
            return Err(Error::CorruptRecord(format!("{}: m={} but manifest says {}", e.shape_id, record.graph.m(), manifest.m)));
        }
        records.push(record);
    }
    Ok(Dataset { manifest, records })
}

fn resolve_dataset_path(path: &Path) -> Result<(PathBuf, Option<Split>)> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok((path.to_path_buf(), None));
    }
    let split = match path.file_name().and_then(|s| s.to_str()) {
        Some("train") => Some(Split::Train),
        Some("test") => Some(Split::Test),
        _ => None,
    };
    if let (Some(split), Some(parent)) = (split, path.parent()) {
        if parent.join(MANIFEST_FILE).is_file() {
            return Ok((parent.to_path_buf(), Some(split)));
        }
    }
    Err(Error::DatasetInvalid(format!("no {MANIFEST_FILE} at {}", path.display())))
}
