//! Expert backends: frozen-encoder embeddings and single-modality answer
//! generation. Backends are either simulated (deterministic, label-driven) or
//! remote model servers spoken to over HTTP/JSON.

mod remote;
mod simulated;

pub use remote::{RemoteClient, RemoteConfig, RemoteEmbedder, RemoteError, RemoteGenerator};
pub use simulated::{
    wrong_answer, LabelBook, LatencyModel, SimLabel, SimulatedEmbedder, SimulatedExpertConfig,
    SimulatedGenerator, TokensModel,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{QUESTION_DIM, TEXT_DIM, VISION_DIM};
use crate::types::DatasetTag;

/// One backend's answer for a table-query instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub answer: String,
    pub explanation: String,
    pub latency_seconds: f64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
    Question,
}

impl Modality {
    pub fn embedding_dim(self) -> usize {
        match self {
            Modality::Text => TEXT_DIM,
            Modality::Vision => VISION_DIM,
            Modality::Question => QUESTION_DIM,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Question => "question",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Simulated,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub modality: Modality,
    pub embedding_dim: usize,
    /// Endpoint URL for remote backends, a label for simulated ones.
    pub endpoint: String,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind, modality: Modality, endpoint: impl Into<String>) -> Self {
        Self {
            kind,
            modality,
            embedding_dim: modality.embedding_dim(),
            endpoint: endpoint.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("{backend} returned a {actual}-dim embedding, contract requires {expected}")]
    ContractViolation {
        backend: String,
        expected: usize,
        actual: usize,
    },
    #[error("{backend} expects a {expected} payload, got {got}")]
    PayloadMismatch {
        backend: String,
        expected: &'static str,
        got: &'static str,
    },
    #[error("backend configuration error: {0}")]
    Configuration(String),
}

pub type Result<T> = std::result::Result<T, ExpertError>;

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedPayload {
    /// Serialized table text.
    TableText(String),
    /// Rendered table image bytes.
    TableImage(Vec<u8>),
    Question(String),
}

impl EmbedPayload {
    pub fn modality(&self) -> Modality {
        match self {
            EmbedPayload::TableText(_) => Modality::Text,
            EmbedPayload::TableImage(_) => Modality::Vision,
            EmbedPayload::Question(_) => Modality::Question,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        match self {
            EmbedPayload::TableText(s) | EmbedPayload::Question(s) => s.as_bytes(),
            EmbedPayload::TableImage(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRequest {
    pub payload: EmbedPayload,
    pub dataset: Option<DatasetTag>,
}

/// A value together with the time it took to produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub example_id: String,
    pub table_markdown: String,
    pub question: String,
    pub dataset: DatasetTag,
}

/// Partial forward of a frozen encoder, producing a pooled embedding.
pub trait EmbeddingBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn embed_raw(&self, req: &EmbedRequest) -> Result<Timed<Vec<f32>>>;
}

/// A single-modality expert producing an answer plus rationale.
pub trait GenerationBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn generate(&self, req: &GenerateRequest) -> Result<ExpertOutput>;
}

/// Embeds through `backend`, enforcing the payload kind and the declared
/// dimension.
pub fn embed(backend: &dyn EmbeddingBackend, req: &EmbedRequest) -> Result<Timed<Vec<f32>>> {
    let desc = backend.descriptor();
    let got = req.payload.modality();
    if got != desc.modality {
        return Err(ExpertError::PayloadMismatch {
            backend: desc.endpoint.clone(),
            expected: desc.modality.as_str(),
            got: got.as_str(),
        });
    }
    let out = backend.embed_raw(req)?;
    if out.value.len() != desc.embedding_dim {
        return Err(ExpertError::ContractViolation {
            backend: desc.endpoint.clone(),
            expected: desc.embedding_dim,
            actual: out.value.len(),
        });
    }
    Ok(out)
}

/// The three encoders used for phase-1 feature extraction.
pub struct EmbeddingSet<'a> {
    pub question: &'a dyn EmbeddingBackend,
    pub text: &'a dyn EmbeddingBackend,
    pub vision: &'a dyn EmbeddingBackend,
}

/// Text and vision generators.
pub struct GeneratorPair<'a> {
    pub text: &'a dyn GenerationBackend,
    pub vision: &'a dyn GenerationBackend,
}
