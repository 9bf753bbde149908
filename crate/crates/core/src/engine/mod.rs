//! Adaptive inference.
//!
//! Each instance runs in three phases:
//!
//! 1. Feature extraction: question, table-text and table-image embeddings,
//!    concurrently. `t1 = max` of the three.
//! 2. Gating: the gate picks a path. Zero in non-adaptive mode, which always
//!    fuses.
//! 3. Generation: the chosen expert, or both experts concurrently followed by
//!    the fusion agent. `t3 = max(text_gen, image_gen) + agent` for fusion.
//!
//! The record's parallel latency is `t1 + t2 + t3`, computed from per-task
//! durations, so it does not depend on how the tasks were actually scheduled.

mod bench;
mod cost;

pub use bench::{run_efficiency_bench, BenchConfig, BenchReport, BenchRow, BenchSummaryRow};
pub use cost::{
    fusion_from_unimodal, measure_cost, path_cost, write_cost_csv, CostConfig, CostMeasurement, PathSample,
};

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experts::{
    embed, EmbedPayload, EmbedRequest, EmbeddingBackend, EmbeddingSet, ExpertError, ExpertOutput,
    GenerateRequest, GenerationBackend, GeneratorPair, Timed,
};
use crate::fusion::{fuse, FusionAgent, FusionError, FusionRequest, FusionRole};
use crate::gate::{concat_input, logits, GateError, GateInput, GateParameters, RoutingLogits};
use crate::numerics::{softmax, NumericsError, ProbVector};
use crate::trainer::{select_path, PathCostVector, RoutingExample};
use crate::types::{DatasetTag, RoutePath};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{example_id}: backend failure in {phase}: {source}")]
    Backend {
        example_id: String,
        phase: &'static str,
        partial: Box<PartialRecord>,
        #[source]
        source: ExpertError,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("adaptive mode requires a trained gate")]
    MissingGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub path: RoutePath,
    pub logits: RoutingLogits,
    /// `softmax(z)` at unit temperature.
    pub probabilities: ProbVector,
}

/// Argmax routing with the cheapest-path tie break.
pub fn route(gate: &GateParameters, gi: &GateInput, c: &PathCostVector) -> Result<RouteDecision, EngineError> {
    let x = concat_input(gi)?;
    route_logits(logits(gate, &x)?, c)
}

pub fn route_logits(z: RoutingLogits, c: &PathCostVector) -> Result<RouteDecision, EngineError> {
    Ok(RouteDecision {
        path: select_path(&z, c),
        logits: z,
        probabilities: softmax(&z, 1.0)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Gate decides per instance.
    Adaptive,
    /// Always fuse; no gating phase.
    NonAdaptive,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Adaptive => "adaptive",
            RoutingMode::NonAdaptive => "non-adaptive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimingSource {
    /// Durations reported by the backends; simulated backends report their
    /// configured latencies, so runs are reproducible.
    Reported,
    /// Monotonic wall-clock around every task.
    WallClock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineOptions {
    pub mode: RoutingMode,
    pub timing: TimingSource,
    /// Gate duration charged in [`TimingSource::Reported`] mode.
    pub gate_latency_s: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            mode: RoutingMode::Adaptive,
            timing: TimingSource::Reported,
            gate_latency_s: 0.001,
        }
    }
}

/// Backends and agent shared by every inference.
pub struct Backends<'a> {
    pub embedders: EmbeddingSet<'a>,
    pub generators: GeneratorPair<'a>,
    pub agent: &'a dyn FusionAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub example_id: String,
    pub dataset: DatasetTag,
    pub chosen_path: RoutePath,
    pub t_phase1: f64,
    pub t_phase2: f64,
    pub t_phase3: f64,
    pub parallel_latency: f64,
    pub final_answer: String,
    pub output_tokens: u64,
    pub fusion_role: Option<FusionRole>,
    pub degraded: bool,
}

impl InferenceRecord {
    pub fn tps(&self) -> f64 {
        if self.parallel_latency > 0.0 {
            self.output_tokens as f64 / self.parallel_latency
        } else {
            0.0
        }
    }
}

/// Whatever had completed when a backend failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRecord {
    pub example_id: String,
    pub chosen_path: Option<RoutePath>,
    pub t_phase1: Option<f64>,
    pub t_phase2: Option<f64>,
}

/// Phase-3 timings of one instance, combined by the accounting formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenerationTiming {
    Unimodal { generation: f64 },
    Fusion { text: f64, image: f64, api: f64 },
}

impl GenerationTiming {
    pub fn duration(self) -> f64 {
        match self {
            GenerationTiming::Unimodal { generation } => generation,
            GenerationTiming::Fusion { text, image, api } => text.max(image) + api,
        }
    }
}

/// The three embedding requests for an instance. Ingest and inference share
/// this so stored and live embeddings agree.
pub fn embed_requests(ex: &RoutingExample) -> [EmbedRequest; 3] {
    let dataset = Some(ex.dataset);
    [
        EmbedRequest {
            payload: EmbedPayload::Question(ex.question.clone()),
            dataset,
        },
        EmbedRequest {
            payload: EmbedPayload::TableText(ex.table_markdown.clone()),
            dataset,
        },
        // No renderer is bundled: the structural serialization stands in for
        // the table screenshot bytes.
        EmbedRequest {
            payload: EmbedPayload::TableImage(ex.table.serialize_structural().into_bytes()),
            dataset,
        },
    ]
}

pub fn generate_request(ex: &RoutingExample) -> GenerateRequest {
    GenerateRequest {
        example_id: ex.id.clone(),
        table_markdown: ex.table_markdown.clone(),
        question: ex.question.clone(),
        dataset: ex.dataset,
    }
}

fn timed<T>(
    timing: TimingSource,
    f: impl FnOnce() -> Result<Timed<T>, ExpertError>,
) -> Result<Timed<T>, ExpertError> {
    let start = Instant::now();
    let mut out = f()?;
    if timing == TimingSource::WallClock {
        out.latency_seconds = start.elapsed().as_secs_f64();
    }
    Ok(out)
}

/// Runs the three encoders concurrently.
pub fn extract_features(
    ex: &RoutingExample,
    embedders: &EmbeddingSet<'_>,
    timing: TimingSource,
) -> Result<(GateInput, [f64; 3]), ExpertError> {
    let [q, t, v] = embed_requests(ex);
    let run = |backend: &dyn EmbeddingBackend, req: EmbedRequest| timed(timing, || embed(backend, &req));
    let (q, t, v) = std::thread::scope(|s| {
        let qh = s.spawn(|| run(embedders.question, q));
        let th = s.spawn(|| run(embedders.text, t));
        let vh = s.spawn(|| run(embedders.vision, v));
        (
            qh.join().expect("question encoder panicked"),
            th.join().expect("text encoder panicked"),
            vh.join().expect("vision encoder panicked"),
        )
    });
    let (q, t, v) = (q?, t?, v?);
    let latencies = [q.latency_seconds, t.latency_seconds, v.latency_seconds];
    Ok((
        GateInput {
            question_embedding: q.value,
            text_embedding: t.value,
            vision_embedding: v.value,
        },
        latencies,
    ))
}

fn generate_one(
    backend: &dyn GenerationBackend,
    req: &GenerateRequest,
    timing: TimingSource,
) -> Result<ExpertOutput, ExpertError> {
    let start = Instant::now();
    let mut out = backend.generate(req)?;
    if timing == TimingSource::WallClock {
        out.latency_seconds = start.elapsed().as_secs_f64();
    }
    Ok(out)
}

/// Runs both generators concurrently.
pub fn generate_pair(
    ex: &RoutingExample,
    generators: &GeneratorPair<'_>,
    timing: TimingSource,
) -> (Result<ExpertOutput, ExpertError>, Result<ExpertOutput, ExpertError>) {
    let req = generate_request(ex);
    std::thread::scope(|s| {
        let th = s.spawn(|| generate_one(generators.text, &req, timing));
        let vh = s.spawn(|| generate_one(generators.vision, &req, timing));
        (
            th.join().expect("text generator panicked"),
            vh.join().expect("vision generator panicked"),
        )
    })
}

/// End-to-end inference for one instance.
pub fn infer(
    ex: &RoutingExample,
    gate: Option<&GateParameters>,
    backends: &Backends<'_>,
    c: &PathCostVector,
    options: &EngineOptions,
) -> Result<InferenceRecord, EngineError> {
    let mut partial = PartialRecord {
        example_id: ex.id.clone(),
        chosen_path: None,
        t_phase1: None,
        t_phase2: None,
    };
    let fail = |phase: &'static str, partial: &PartialRecord, source: ExpertError| EngineError::Backend {
        example_id: ex.id.clone(),
        phase,
        partial: Box::new(partial.clone()),
        source,
    };

    let (features, embed_latencies) =
        extract_features(ex, &backends.embedders, options.timing).map_err(|e| fail("feature extraction", &partial, e))?;
    let t_phase1 = embed_latencies.iter().copied().fold(0.0, f64::max);
    partial.t_phase1 = Some(t_phase1);

    let (path, t_phase2) = match options.mode {
        RoutingMode::NonAdaptive => (RoutePath::Fusion, 0.0),
        RoutingMode::Adaptive => {
            let gate = gate.ok_or(EngineError::MissingGate)?;
            let start = Instant::now();
            let decision = route(gate, &features, c)?;
            let elapsed = start.elapsed().as_secs_f64();
            let t2 = match options.timing {
                TimingSource::Reported => options.gate_latency_s,
                TimingSource::WallClock => elapsed,
            };
            (decision.path, t2)
        }
    };
    partial.chosen_path = Some(path);
    partial.t_phase2 = Some(t_phase2);

    let (final_answer, output_tokens, fusion_role, degraded, timing) = match path {
        RoutePath::Text | RoutePath::Image => {
            let backend = if path == RoutePath::Text {
                backends.generators.text
            } else {
                backends.generators.vision
            };
            let out = generate_one(backend, &generate_request(ex), options.timing)
                .map_err(|e| fail("generation", &partial, e))?;
            (
                out.answer,
                out.output_tokens,
                None,
                false,
                GenerationTiming::Unimodal {
                    generation: out.latency_seconds,
                },
            )
        }
        RoutePath::Fusion => {
            let (text, vision) = generate_pair(ex, &backends.generators, options.timing);
            let text = text.map_err(|e| fail("generation", &partial, e))?;
            let vision = vision.map_err(|e| fail("generation", &partial, e))?;
            let request = FusionRequest {
                example_id: ex.id.clone(),
                question: ex.question.clone(),
                table_markdown: ex.table_markdown.clone(),
                dataset_tag: ex.dataset.as_str().to_string(),
                text_output: text.clone(),
                vision_output: vision.clone(),
            };
            let start = Instant::now();
            let fused = fuse(&request, backends.agent);
            let wall = start.elapsed().as_secs_f64();
            let gen_tokens = text.output_tokens + vision.output_tokens;
            match fused {
                Ok(r) => {
                    let api = match options.timing {
                        TimingSource::Reported => r.api_latency_seconds,
                        TimingSource::WallClock => wall,
                    };
                    (
                        r.final_answer,
                        gen_tokens + r.output_tokens,
                        Some(r.role),
                        r.degraded,
                        GenerationTiming::Fusion {
                            text: text.latency_seconds,
                            image: vision.latency_seconds,
                            api,
                        },
                    )
                }
                Err(FusionError::Unavailable(err)) => {
                    log::warn!("{}: fusion agent unavailable ({err}); using text answer", ex.id);
                    let api = match options.timing {
                        TimingSource::Reported => 0.0,
                        TimingSource::WallClock => wall,
                    };
                    (
                        text.answer.clone(),
                        gen_tokens,
                        None,
                        true,
                        GenerationTiming::Fusion {
                            text: text.latency_seconds,
                            image: vision.latency_seconds,
                            api,
                        },
                    )
                }
                Err(FusionError::Parse { .. }) => unreachable!("fuse falls back on parse failures"),
            }
        }
    };
    let t_phase3 = timing.duration();
    Ok(InferenceRecord {
        example_id: ex.id.clone(),
        dataset: ex.dataset,
        chosen_path: path,
        t_phase1,
        t_phase2,
        t_phase3,
        parallel_latency: t_phase1 + t_phase2 + t_phase3,
        final_answer,
        output_tokens,
        fusion_role,
        degraded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use std::collections::BTreeMap;
    use std::sync::Arc;

    use crate::experts::{
        LabelBook, LatencyModel, SimLabel, SimulatedEmbedder, SimulatedExpertConfig, SimulatedGenerator,
        TokensModel,
    };
    use crate::experts::Modality;
    use crate::fusion::ScriptedAgent;
    use crate::gate::GateDims;
    use crate::table::Table;

    struct Stack {
        q: SimulatedEmbedder,
        t: SimulatedEmbedder,
        v: SimulatedEmbedder,
        tg: SimulatedGenerator,
        vg: SimulatedGenerator,
        agent: ScriptedAgent,
    }

    impl Stack {
        fn new(labels: LabelBook, agent: ScriptedAgent) -> Self {
            let labels = Arc::new(labels);
            let emb = |m, s| SimulatedEmbedder::new(m, SimulatedExpertConfig::new(LatencyModel::fixed(s))).unwrap();
            let gen = |m, s, tokens: f64| {
                let mut cfg = SimulatedExpertConfig::new(LatencyModel::fixed(s));
                cfg.tokens = Some(TokensModel { mean: tokens, jitter: 0.0 });
                SimulatedGenerator::new(m, cfg, labels.clone()).unwrap()
            };
            Self {
                q: emb(Modality::Question, 0.05),
                t: emb(Modality::Text, 0.10),
                v: emb(Modality::Vision, 0.20),
                tg: gen(Modality::Text, 1.0, 20.0),
                vg: gen(Modality::Vision, 1.5, 30.0),
                agent,
            }
        }

        fn backends(&self) -> Backends<'_> {
            Backends {
                embedders: EmbeddingSet {
                    question: &self.q,
                    text: &self.t,
                    vision: &self.v,
                },
                generators: GeneratorPair {
                    text: &self.tg,
                    vision: &self.vg,
                },
                agent: &self.agent,
            }
        }
    }

    fn example(id: &str) -> RoutingExample {
        let table = Table::new(vec!["a".into()], vec![vec!["1".into()]]);
        RoutingExample {
            id: id.into(),
            dataset: DatasetTag::Wtq,
            question: "what is a?".into(),
            table_markdown: table.to_markdown(),
            table,
            path_scores: [1, 0, 1],
            gold_answer: "1".into(),
            cached_expert_outputs: None,
            embeddings: None,
        }
    }

    fn labels() -> LabelBook {
        LabelBook::from([(
            "e1".to_string(),
            SimLabel {
                gold: "1".into(),
                text: true,
                image: false,
                fusion: true,
            },
        )])
    }

    /// Zero weights; the output bias alone decides the path.
    fn biased_gate(path: RoutePath) -> GateParameters {
        let mut g = GateParameters::zeros(GateDims::CANONICAL);
        g.b2_mut()[path.index()] = 1.0;
        g
    }

    fn fixture(path: RoutePath, mode: RoutingMode) -> InferenceRecord {
        let stack = Stack::new(labels(), ScriptedAgent::constant(0.3, r#"{"answer": "1"}"#));
        let opts = EngineOptions {
            mode,
            ..EngineOptions::default()
        };
        infer(&example("e1"), Some(&biased_gate(path)), &stack.backends(), &PathCostVector::MEASURED, &opts).unwrap()
    }

    #[test]
    fn unimodal_latency_fixture() {
        let r = fixture(RoutePath::Text, RoutingMode::Adaptive);
        assert_eq!(r.chosen_path, RoutePath::Text);
        assert_eq!(r.t_phase1, 0.20);
        assert_eq!(r.t_phase2, 0.001);
        assert_eq!(r.t_phase3, 1.0);
        assert!((r.parallel_latency - 1.201).abs() < 1e-12);
        assert_eq!(r.final_answer, "1");
        assert_eq!(r.output_tokens, 20);
        assert!(r.fusion_role.is_none());
    }

    #[test]
    fn fusion_latency_fixture() {
        let r = fixture(RoutePath::Fusion, RoutingMode::Adaptive);
        assert_eq!(r.chosen_path, RoutePath::Fusion);
        assert!((r.t_phase3 - 1.8).abs() < 1e-12);
        assert!((r.parallel_latency - 2.001).abs() < 1e-12);
        assert_eq!(r.fusion_role, Some(FusionRole::Arbitrator));
        assert!(!r.degraded);
    }

    #[test]
    fn non_adaptive_skips_gating() {
        let r = fixture(RoutePath::Text, RoutingMode::NonAdaptive);
        assert_eq!(r.chosen_path, RoutePath::Fusion);
        assert_eq!(r.t_phase2, 0.0);
        assert!((r.parallel_latency - 2.0).abs() < 1e-12);
        assert_eq!(r.parallel_latency, r.t_phase1 + r.t_phase2 + r.t_phase3);
    }

    #[test]
    fn tps_definition() {
        let mut r = fixture(RoutePath::Text, RoutingMode::Adaptive);
        r.output_tokens = 20;
        r.parallel_latency = 2.0;
        assert_eq!(r.tps(), 10.0);
    }

    #[test]
    fn adaptive_requires_gate() {
        let stack = Stack::new(labels(), ScriptedAgent::constant(0.3, r#"{"answer": "1"}"#));
        let err = infer(&example("e1"), None, &stack.backends(), &PathCostVector::MEASURED, &EngineOptions::default());
        assert!(matches!(err, Err(EngineError::MissingGate)));
    }

    #[test]
    fn unavailable_agent_degrades_to_text_answer() {
        let agent = ScriptedAgent::new(0.3, |_| {
            Err(crate::experts::RemoteError::ConnectionRefused {
                endpoint: "stub".into(),
                attempts: 3,
            })
        });
        let stack = Stack::new(labels(), agent);
        let opts = EngineOptions {
            mode: RoutingMode::NonAdaptive,
            ..EngineOptions::default()
        };
        let r = infer(&example("e1"), None, &stack.backends(), &PathCostVector::MEASURED, &opts).unwrap();
        assert!(r.degraded);
        assert_eq!(r.final_answer, "1");
    }

    #[test]
    fn missing_label_reports_partial_record() {
        let stack = Stack::new(labels(), ScriptedAgent::constant(0.3, "{}"));
        let err = infer(
            &example("nope"),
            Some(&biased_gate(RoutePath::Image)),
            &stack.backends(),
            &PathCostVector::MEASURED,
            &EngineOptions::default(),
        )
        .unwrap_err();
        match err {
            EngineError::Backend { partial, phase, .. } => {
                assert_eq!(phase, "generation");
                assert_eq!(partial.chosen_path, Some(RoutePath::Image));
                assert_eq!(partial.t_phase1, Some(0.20));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cost_protocol_on_simulated_generators() {
        let stack = Stack::new(labels(), ScriptedAgent::constant(0.3, "{}"));
        let b = stack.backends();
        let testbed = vec![example("e1")];
        let cfg = CostConfig::default();
        let text = measure_cost(RoutePath::Text, &testbed, &b.generators, TimingSource::Reported, &cfg).unwrap();
        assert_eq!(text.avg_latency_seconds, 1.0);
        assert_eq!(text.avg_tps, 20.0);
        let fusion = measure_cost(RoutePath::Fusion, &testbed, &b.generators, TimingSource::Reported, &cfg).unwrap();
        assert!((fusion.avg_latency_seconds - 1.8).abs() < 1e-12);
        assert_eq!(fusion.avg_tps, 20.0);
        assert!((fusion.cost - path_cost(1.8, 20.0)).abs() < 1e-12);
        let empty = measure_cost(RoutePath::Text, &[], &b.generators, TimingSource::Reported, &cfg);
        assert!(matches!(empty, Err(EngineError::InvalidArgument(_))));
    }

    #[test]
    fn bench_closed_form_and_text_gate_is_faster() {
        let mut book = LabelBook::new();
        let mut pool = Vec::new();
        for i in 0..4 {
            let id = format!("w{i}");
            book.insert(
                id.clone(),
                SimLabel {
                    gold: "1".into(),
                    text: true,
                    image: true,
                    fusion: true,
                },
            );
            pool.push(example(&id));
        }
        let stack = Stack::new(book, ScriptedAgent::constant(0.3, r#"{"answer": "1"}"#));
        let data = BTreeMap::from([(DatasetTag::Wtq, pool)]);
        let cfg = BenchConfig {
            n_per_dataset: 6,
            n_seeds: 2,
            seed: 1,
        };
        let gate = biased_gate(RoutePath::Text);
        let report = run_efficiency_bench(
            &data,
            &gate,
            &stack.backends(),
            &PathCostVector::MEASURED,
            &EngineOptions::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.rows.len(), 4);
        let adaptive = report.summary_for(DatasetTag::Wtq, RoutingMode::Adaptive).unwrap();
        let fused = report.summary_for(DatasetTag::Wtq, RoutingMode::NonAdaptive).unwrap();
        assert!((adaptive.mean_latency_s - 1.201).abs() < 1e-12);
        assert!((adaptive.mean_tps - 20.0 / 1.201).abs() < 1e-9);
        assert!((fused.mean_latency_s - 2.0).abs() < 1e-12);
        assert!(adaptive.mean_latency_s < fused.mean_latency_s);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("dataset,mode,seed,mean_latency_s,mean_tps\n"));
        assert!(csv.contains("wtq,adaptive,mean,1.201000,"));
    }

    #[test]
    fn route_on_raw_logits() {
        let c = PathCostVector::MEASURED;
        assert_eq!(route_logits([2.0, 1.0, 0.0], &c).unwrap().path, RoutePath::Text);
        assert_eq!(route_logits([1.0, 1.0, 0.0], &c).unwrap().path, RoutePath::Text);
        let d = route_logits([0.0, 0.0, 3.0], &c).unwrap();
        assert_eq!(d.path, RoutePath::Fusion);
        assert!((d.probabilities.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phase_three_formulas() {
        assert_eq!(GenerationTiming::Unimodal { generation: 1.0 }.duration(), 1.0);
        let f = GenerationTiming::Fusion { text: 1.0, image: 1.5, api: 0.3 };
        assert!((f.duration() - 1.8).abs() < 1e-15);
    }
}
