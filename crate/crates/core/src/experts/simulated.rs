//! Deterministic stand-ins for the frozen 7B/8B experts.
//!
//! Embeddings are a hash of the payload expanded by a counter-based
//! generator into values in `[-1, 1]`, optionally shifted by a fixed sign
//! pattern per dataset tag. Generation returns the gold answer exactly when
//! the per-example label for that modality is set.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    BackendDescriptor, BackendKind, EmbedRequest, EmbeddingBackend, ExpertError, ExpertOutput,
    GenerateRequest, GenerationBackend, Modality, Result, Timed,
};
use crate::answer::whitespace_tokens;
use crate::hashing::{derive_seed, hash64, splitmix64, unit_interval_f32};
use crate::types::DatasetTag;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub mean_s: f64,
    #[serde(default)]
    pub jitter_s: f64,
}

impl LatencyModel {
    pub fn fixed(mean_s: f64) -> Self {
        Self { mean_s, jitter_s: 0.0 }
    }

    /// `mean + jitter * u` with `u` in `[-1, 1]` derived from `bits`,
    /// clamped at zero.
    fn sample(&self, bits: u64) -> f64 {
        if self.jitter_s == 0.0 {
            return self.mean_s;
        }
        let u = unit_interval_f32(bits) as f64;
        (self.mean_s + self.jitter_s * u).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokensModel {
    pub mean: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl TokensModel {
    fn sample(&self, bits: u64) -> u64 {
        let u = if self.jitter == 0.0 { 0.0 } else { unit_interval_f32(bits) as f64 };
        (self.mean + self.jitter * u).round().max(0.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedExpertConfig {
    pub latency: LatencyModel,
    /// Output token model; `None` counts whitespace tokens of the answer and
    /// explanation.
    #[serde(default)]
    pub tokens: Option<TokensModel>,
    #[serde(default)]
    pub embedding_seed: u64,
    /// Scale of the payload-hash component of embeddings.
    #[serde(default = "one")]
    pub noise_scale: f32,
    /// Per-dataset amplitude of a fixed sign-pattern bias added to embeddings.
    #[serde(default)]
    pub dataset_bias: BTreeMap<DatasetTag, f32>,
}

fn one() -> f32 {
    1.0
}

impl SimulatedExpertConfig {
    pub fn new(latency: LatencyModel) -> Self {
        Self {
            latency,
            tokens: None,
            embedding_seed: 0,
            noise_scale: 1.0,
            dataset_bias: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latency.mean_s > 0.0) || !(self.latency.jitter_s >= 0.0) {
            return Err(ExpertError::Configuration(format!(
                "latency model needs mean > 0 and jitter >= 0, got {:?}",
                self.latency
            )));
        }
        if let Some(t) = self.tokens {
            if !(t.mean >= 0.0 && t.jitter >= 0.0) {
                return Err(ExpertError::Configuration(format!("bad tokens model {t:?}")));
            }
        }
        Ok(())
    }
}

pub struct SimulatedEmbedder {
    descriptor: BackendDescriptor,
    config: SimulatedExpertConfig,
}

impl SimulatedEmbedder {
    pub fn new(modality: Modality, config: SimulatedExpertConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            descriptor: BackendDescriptor::new(
                BackendKind::Simulated,
                modality,
                format!("simulated-{}", modality.as_str()),
            ),
            config,
        })
    }

    fn modality_salt(&self) -> u64 {
        hash64(self.descriptor.modality.as_str().as_bytes())
    }

    /// Sign pattern for a dataset tag, independent of the payload.
    fn bias_bit(&self, tag: DatasetTag, i: usize) -> bool {
        let base = derive_seed(
            hash64(tag.as_str().as_bytes()) ^ self.modality_salt(),
            self.config.embedding_seed,
        );
        splitmix64(base ^ (i as u64)) & 1 == 1
    }
}

impl EmbeddingBackend for SimulatedEmbedder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_raw(&self, req: &EmbedRequest) -> Result<Timed<Vec<f32>>> {
        let key = derive_seed(hash64(req.payload.bytes()) ^ self.modality_salt(), self.config.embedding_seed);
        let bias = req
            .dataset
            .and_then(|tag| self.config.dataset_bias.get(&tag).map(|&a| (tag, a)));
        let value = (0..self.descriptor.embedding_dim)
            .map(|i| {
                let noise = unit_interval_f32(splitmix64(key.wrapping_add(i as u64))) * self.config.noise_scale;
                match bias {
                    Some((tag, amp)) if self.bias_bit(tag, i) => noise + amp,
                    Some((_, amp)) => noise - amp,
                    None => noise,
                }
            })
            .collect();
        Ok(Timed {
            value,
            latency_seconds: self.config.latency.sample(splitmix64(key ^ 0x4c41_54)),
        })
    }
}

/// Per-example ground truth driving simulated generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimLabel {
    pub gold: String,
    pub text: bool,
    pub image: bool,
    pub fusion: bool,
}

pub type LabelBook = HashMap<String, SimLabel>;

/// Deterministic incorrect answer: gold plus a modality marker, which never
/// normalizes to the gold answer.
pub fn wrong_answer(gold: &str, marker: &str) -> String {
    format!("{} ~{marker}", gold.trim())
}

pub struct SimulatedGenerator {
    descriptor: BackendDescriptor,
    config: SimulatedExpertConfig,
    labels: std::sync::Arc<LabelBook>,
}

impl SimulatedGenerator {
    pub fn new(
        modality: Modality,
        config: SimulatedExpertConfig,
        labels: std::sync::Arc<LabelBook>,
    ) -> Result<Self> {
        if modality == Modality::Question {
            return Err(ExpertError::Configuration("question encoders do not generate answers".into()));
        }
        config.validate()?;
        Ok(Self {
            descriptor: BackendDescriptor::new(
                BackendKind::Simulated,
                modality,
                format!("simulated-{}-generator", modality.as_str()),
            ),
            config,
            labels,
        })
    }
}

impl GenerationBackend for SimulatedGenerator {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate(&self, req: &GenerateRequest) -> Result<ExpertOutput> {
        let label = self.labels.get(&req.example_id).ok_or_else(|| {
            ExpertError::Configuration(format!("no correctness label for example {:?}", req.example_id))
        })?;
        let (correct, marker, name) = match self.descriptor.modality {
            Modality::Text => (label.text, "t", "table-as-text"),
            _ => (label.image, "v", "table-as-image"),
        };
        let answer = if correct {
            label.gold.clone()
        } else {
            wrong_answer(&label.gold, marker)
        };
        let explanation = format!(
            "The {name} expert read the table for \"{}\" and concluded: {answer}.",
            req.question
        );
        let bits = derive_seed(hash64(req.example_id.as_bytes()), self.config.embedding_seed ^ hash64(marker.as_bytes()));
        let output_tokens = match self.config.tokens {
            Some(model) => model.sample(splitmix64(bits ^ 0x544f_4b)),
            None => whitespace_tokens(&answer) + whitespace_tokens(&explanation),
        };
        Ok(ExpertOutput {
            answer,
            explanation,
            latency_seconds: self.config.latency.sample(bits),
            output_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::answers_match;
    use crate::experts::{embed, EmbedPayload};
    use std::sync::Arc;

    fn question_backend(seed: u64) -> SimulatedEmbedder {
        let mut cfg = SimulatedExpertConfig::new(LatencyModel::fixed(0.05));
        cfg.embedding_seed = seed;
        SimulatedEmbedder::new(Modality::Question, cfg).unwrap()
    }

    fn q(text: &str) -> EmbedRequest {
        EmbedRequest {
            payload: EmbedPayload::Question(text.into()),
            dataset: None,
        }
    }

    #[test]
    fn embeddings_are_deterministic_and_sized() {
        let b = question_backend(3);
        let a = embed(&b, &q("how many medals?")).unwrap();
        let again = embed(&b, &q("how many medals?")).unwrap();
        assert_eq!(a.value.len(), 384);
        assert!(a.value.iter().zip(&again.value).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.latency_seconds, 0.05);
        let other = embed(&b, &q("how many golds?")).unwrap();
        assert_ne!(a.value, other.value);
        let reseeded = embed(&question_backend(4), &q("how many medals?")).unwrap();
        assert_ne!(a.value, reseeded.value);
        assert!(a.value.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn embedding_values_are_pinned() {
        // Guards the integer-only construction against accidental changes.
        let b = question_backend(0);
        let v = embed(&b, &q("pinned")).unwrap().value;
        let key = derive_seed(hash64(b"pinned") ^ hash64(b"question"), 0);
        assert_eq!(v[0], unit_interval_f32(splitmix64(key)));
        assert_eq!(v[383], unit_interval_f32(splitmix64(key + 383)));
    }

    #[test]
    fn dataset_bias_shifts_embeddings() {
        let mut cfg = SimulatedExpertConfig::new(LatencyModel::fixed(0.1));
        cfg.noise_scale = 0.0;
        cfg.dataset_bias.insert(DatasetTag::Wtq, 0.5);
        let b = SimulatedEmbedder::new(Modality::Text, cfg).unwrap();
        let req = |tag| EmbedRequest {
            payload: EmbedPayload::TableText("t".into()),
            dataset: Some(tag),
        };
        let wtq = embed(&b, &req(DatasetTag::Wtq)).unwrap().value;
        assert!(wtq.iter().all(|&v| v == 0.5 || v == -0.5));
        let positives = wtq.iter().filter(|&&v| v > 0.0).count();
        assert!((1500..2100).contains(&positives), "{positives}");
        let unbiased = embed(&b, &req(DatasetTag::TabFact)).unwrap().value;
        assert!(unbiased.iter().all(|&v| v == 0.0));
    }

    fn book() -> Arc<LabelBook> {
        Arc::new(LabelBook::from([(
            "ex1".to_string(),
            SimLabel {
                gold: "Bolivia".into(),
                text: true,
                image: false,
                fusion: true,
            },
        )]))
    }

    fn gen_req(id: &str) -> GenerateRequest {
        GenerateRequest {
            example_id: id.into(),
            table_markdown: "| a |\n| --- |\n| 1 |\n".into(),
            question: "Which country?".into(),
            dataset: DatasetTag::Wtq,
        }
    }

    #[test]
    fn generation_follows_labels() {
        let cfg = SimulatedExpertConfig::new(LatencyModel::fixed(1.445));
        let text = SimulatedGenerator::new(Modality::Text, cfg.clone(), book()).unwrap();
        let vision = SimulatedGenerator::new(Modality::Vision, cfg, book()).unwrap();
        let t = text.generate(&gen_req("ex1")).unwrap();
        assert_eq!(t.answer, "Bolivia");
        assert_eq!(t.latency_seconds, 1.445);
        assert!(t.output_tokens > 0);
        let v = vision.generate(&gen_req("ex1")).unwrap();
        assert!(!answers_match(&v.answer, "Bolivia"));
        assert_eq!(v, vision.generate(&gen_req("ex1")).unwrap());
    }

    #[test]
    fn missing_label_is_configuration_error() {
        let cfg = SimulatedExpertConfig::new(LatencyModel::fixed(1.0));
        let text = SimulatedGenerator::new(Modality::Text, cfg, book()).unwrap();
        assert!(matches!(text.generate(&gen_req("nope")), Err(ExpertError::Configuration(_))));
    }

    #[test]
    fn jitter_stays_in_band() {
        let mut cfg = SimulatedExpertConfig::new(LatencyModel { mean_s: 1.0, jitter_s: 0.2 });
        cfg.tokens = Some(TokensModel { mean: 50.0, jitter: 10.0 });
        let labels: LabelBook = (0..50)
            .map(|i| (format!("e{i}"), SimLabel { gold: "x".into(), text: true, image: true, fusion: true }))
            .collect();
        let g = SimulatedGenerator::new(Modality::Text, cfg, Arc::new(labels)).unwrap();
        let outs: Vec<_> = (0..50).map(|i| g.generate(&gen_req(&format!("e{i}"))).unwrap()).collect();
        assert!(outs.iter().all(|o| (0.8..=1.2).contains(&o.latency_seconds)));
        assert!(outs.iter().all(|o| (40..=60).contains(&o.output_tokens)));
        assert!(outs.iter().any(|o| o.latency_seconds != 1.0));
    }

    #[test]
    fn invalid_configs() {
        assert!(SimulatedEmbedder::new(Modality::Text, SimulatedExpertConfig::new(LatencyModel::fixed(0.0))).is_err());
        let bad = SimulatedExpertConfig::new(LatencyModel { mean_s: 1.0, jitter_s: -1.0 });
        assert!(SimulatedEmbedder::new(Modality::Text, bad).is_err());
        let ok = SimulatedExpertConfig::new(LatencyModel::fixed(1.0));
        assert!(SimulatedGenerator::new(Modality::Question, ok, book()).is_err());
    }
}
