//! On-disk corpus: a directory with
//!
//! - `examples.jsonl`: one [`RoutingExample`] per line, sorted by id;
//! - `embeddings.bin`: little-endian `f32`, row-major, one row per example
//!   and modality;
//! - `manifest.json`: id to `(offset, dim)` per modality, offsets in bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{GateInput, QUESTION_DIM, TEXT_DIM, VISION_DIM};
use crate::table::Table;
use crate::trainer::RoutingExample;
use crate::types::DatasetTag;

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const SIDECAR_FILE: &str = "embeddings.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "tabroute-corpus-v1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("corpus is invalid: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Correctness of each path, used by simulated backends to answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOutcome {
    pub text: bool,
    pub image: bool,
    pub fusion: bool,
}

/// An instance before ingest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub dataset: DatasetTag,
    pub question: String,
    pub table: Table,
    #[serde(default)]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimOutcome>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CorpusError::Invalid(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub offset: u64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub question: EmbeddingRef,
    pub text: EmbeddingRef,
    pub vision: EmbeddingRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub entries: BTreeMap<String, ManifestEntry>,
}

/// Writes examples (sorted by id) with their embeddings.
pub fn write_corpus(dir: &Path, examples: &[RoutingExample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut sorted: Vec<&RoutingExample> = examples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = HashSet::new();
    for ex in &sorted {
        if !seen.insert(ex.id.as_str()) {
            return Err(CorpusError::Invalid(format!("duplicate id {}", ex.id)));
        }
    }

    let sidecar = dir.join(SIDECAR_FILE);
    let mut w = BufWriter::new(fs::File::create(&sidecar).map_err(io_err(&sidecar))?);
    let mut offset = 0u64;
    let mut entries = BTreeMap::new();
    for ex in &sorted {
        let gi = ex
            .embeddings
            .as_ref()
            .ok_or_else(|| CorpusError::Invalid(format!("{} has no embeddings", ex.id)))?;
        let mut put = |v: &[f32]| -> Result<EmbeddingRef> {
            let r = EmbeddingRef { offset, dim: v.len() };
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(io_err(&sidecar))?;
            }
            offset += 4 * v.len() as u64;
            Ok(r)
        };
        let entry = ManifestEntry {
            question: put(&gi.question_embedding)?,
            text: put(&gi.text_embedding)?,
            vision: put(&gi.vision_embedding)?,
        };
        entries.insert(ex.id.clone(), entry);
    }
    w.flush().map_err(io_err(&sidecar))?;

    let manifest = Manifest {
        format: FORMAT.into(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CorpusError::Invalid(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    write_jsonl(&dir.join(EXAMPLES_FILE), &sorted)
}

/// Loads a corpus and resolves every embedding reference.
pub fn load_corpus(dir: &Path) -> Result<Vec<RoutingExample>> {
    let mut examples: Vec<RoutingExample> = read_jsonl(&dir.join(EXAMPLES_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?).map_err(|source| {
        CorpusError::Json {
            path: path.clone(),
            line: 0,
            source,
        }
    })?;
    if manifest.format != FORMAT {
        return Err(CorpusError::Invalid(format!("unsupported corpus format {:?}", manifest.format)));
    }
    let sidecar_path = dir.join(SIDECAR_FILE);
    let sidecar = fs::read(&sidecar_path).map_err(io_err(&sidecar_path))?;

    let read = |id: &str, r: EmbeddingRef, expected: usize, what: &str| -> Result<Vec<f32>> {
        if r.dim != expected {
            return Err(CorpusError::Invalid(format!("{id}: {what} embedding has dim {}, expected {expected}", r.dim)));
        }
        let start = r.offset as usize;
        let end = start + 4 * r.dim;
        if r.offset % 4 != 0 || end > sidecar.len() {
            return Err(CorpusError::Invalid(format!("{id}: {what} embedding reference is out of bounds")));
        }
        Ok(sidecar[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };

    let mut seen = HashSet::new();
    for ex in &mut examples {
        if !seen.insert(ex.id.clone()) {
            return Err(CorpusError::Invalid(format!("duplicate id {}", ex.id)));
        }
        ex.validate_scores().map_err(|e| CorpusError::Invalid(e.to_string()))?;
        let entry = manifest
            .entries
            .get(&ex.id)
            .ok_or_else(|| CorpusError::Invalid(format!("{} has no manifest entry", ex.id)))?;
        ex.embeddings = Some(GateInput {
            question_embedding: read(&ex.id, entry.question, QUESTION_DIM, "question")?,
            text_embedding: read(&ex.id, entry.text, TEXT_DIM, "text")?,
            vision_embedding: read(&ex.id, entry.vision, VISION_DIM, "vision")?,
        });
    }
    Ok(examples)
}
