//! Turns raw records into labeled routing examples: embeds each instance,
//! runs all three paths and scores them against the gold answer.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::answers_match;
use crate::corpus::RawRecord;
use crate::engine::{extract_features, generate_pair, Backends, TimingSource};
use crate::experts::{LabelBook, SimLabel};
use crate::fusion::{fuse, FusionRequest};
use crate::trainer::RoutingExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Largest tolerated fraction of skipped records.
    pub max_skip_rate: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { max_skip_rate: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub examples: Vec<RoutingExample>,
    pub skipped: Vec<SkippedRecord>,
}

impl IngestReport {
    pub fn skip_rate(&self) -> f64 {
        let total = self.examples.len() + self.skipped.len();
        if total == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / total as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no raw records")]
    Empty,
    #[error("skipped {skipped} of {total} records, above the {threshold} limit")]
    SkipRate {
        skipped: usize,
        total: usize,
        threshold: f64,
        report: Box<IngestReport>,
    },
}

/// Ground truth for simulated backends from raw records carrying outcomes.
pub fn label_book_from_raw(raw: &[RawRecord]) -> LabelBook {
    raw.iter()
        .filter_map(|r| {
            let sim = r.sim?;
            let gold = r.gold_answer.clone()?;
            Some((
                r.id.clone(),
                SimLabel {
                    gold,
                    text: sim.text,
                    image: sim.image,
                    fusion: sim.fusion,
                },
            ))
        })
        .collect()
}

/// Ground truth for simulated backends from an ingested corpus.
pub fn label_book_from_corpus(examples: &[RoutingExample]) -> LabelBook {
    examples
        .iter()
        .map(|e| {
            (
                e.id.clone(),
                SimLabel {
                    gold: e.gold_answer.clone(),
                    text: e.path_scores[0] == 1,
                    image: e.path_scores[1] == 1,
                    fusion: e.path_scores[2] == 1,
                },
            )
        })
        .collect()
}

fn ingest_one(raw: &RawRecord, gold: &str, backends: &Backends<'_>, timing: TimingSource) -> Result<RoutingExample, String> {
    let mut ex = RoutingExample {
        id: raw.id.clone(),
        dataset: raw.dataset,
        question: raw.question.clone(),
        table_markdown: raw.table.to_markdown(),
        table: raw.table.clone(),
        path_scores: [0; 3],
        gold_answer: gold.to_string(),
        cached_expert_outputs: None,
        embeddings: None,
    };
    let (features, _) = extract_features(&ex, &backends.embedders, timing).map_err(|e| e.to_string())?;
    let (text, vision) = generate_pair(&ex, &backends.generators, timing);
    let text = text.map_err(|e| e.to_string())?;
    let vision = vision.map_err(|e| e.to_string())?;
    let request = FusionRequest {
        example_id: ex.id.clone(),
        question: ex.question.clone(),
        table_markdown: ex.table_markdown.clone(),
        text_output: text.clone(),
        vision_output: vision.clone(),
        dataset_tag: ex.dataset.as_str().to_string(),
    };
    let fused = fuse(&request, backends.agent).map_err(|e| e.to_string())?;
    ex.path_scores = [
        answers_match(&text.answer, gold) as u8,
        answers_match(&vision.answer, gold) as u8,
        answers_match(&fused.final_answer, gold) as u8,
    ];
    ex.cached_expert_outputs = Some((text, vision));
    ex.embeddings = Some(features);
    Ok(ex)
}

/// Ingests records in input order. Failing records are logged and skipped;
/// too many skips is an error.
pub fn ingest(
    raw: &[RawRecord],
    backends: &Backends<'_>,
    timing: TimingSource,
    cfg: &IngestConfig,
) -> Result<IngestReport, IngestError> {
    if raw.is_empty() {
        return Err(IngestError::Empty);
    }
    let mut report = IngestReport {
        examples: Vec::with_capacity(raw.len()),
        skipped: Vec::new(),
    };
    let mut seen = HashSet::new();
    for r in raw {
        let outcome = match r.gold_answer.as_deref().map(str::trim) {
            _ if !seen.insert(r.id.as_str()) => Err("duplicate id".to_string()),
            None | Some("") => Err("missing gold answer".to_string()),
            Some(gold) => ingest_one(r, gold, backends, timing),
        };
        match outcome {
            Ok(ex) => report.examples.push(ex),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", r.id);
                report.skipped.push(SkippedRecord { id: r.id.clone(), reason });
            }
        }
    }
    if report.skip_rate() > cfg.max_skip_rate {
        return Err(IngestError::SkipRate {
            skipped: report.skipped.len(),
            total: raw.len(),
            threshold: cfg.max_skip_rate,
            report: Box::new(report),
        });
    }
    Ok(report)
}
