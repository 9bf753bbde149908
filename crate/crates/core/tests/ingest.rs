use std::sync::Arc;

use tabroute::config::{RunConfig, Stack};
use tabroute::corpus::{load_corpus, write_corpus, RawRecord, SimOutcome, EXAMPLES_FILE, SIDECAR_FILE};
use tabroute::ingest::{ingest, label_book_from_raw, IngestConfig, IngestError};
use tabroute::synth::{generate, SynthConfig};

fn toy(n: usize) -> Vec<RawRecord> {
    let mut raw = generate(&SynthConfig {
        per_dataset: 2,
        per_eval_only: 0,
        seed: 3,
    });
    raw.truncate(n);
    raw
}

fn run(raw: &[RawRecord], cfg: &IngestConfig) -> Result<tabroute::ingest::IngestReport, IngestError> {
    let run_cfg = RunConfig::default();
    let stack = Stack::build(&run_cfg, Arc::new(label_book_from_raw(raw))).unwrap();
    ingest(raw, &stack.backends(), run_cfg.engine.timing, cfg)
}

#[test]
fn toy_corpus_round_trips() {
    let raw = toy(10);
    let report = run(&raw, &IngestConfig::default()).unwrap();
    assert_eq!(report.examples.len(), 10);
    assert!(report.skipped.is_empty());
    for (r, ex) in raw.iter().zip(&report.examples) {
        let sim = r.sim.unwrap();
        assert_eq!(ex.path_scores, [sim.text as u8, sim.image as u8, sim.fusion as u8], "{}", ex.id);
        assert!(ex.cached_expert_outputs.is_some());
    }
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &report.examples).unwrap();
    let loaded = load_corpus(dir.path()).unwrap();
    assert_eq!(loaded.len(), 10);
    assert!(loaded.iter().all(|e| e.embeddings.is_some()));
}

#[test]
fn records_without_gold_are_skipped() {
    let mut raw = toy(10);
    raw[4].gold_answer = None;
    let report = run(&raw, &IngestConfig { max_skip_rate: 0.5 }).unwrap();
    assert_eq!(report.examples.len(), 9);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].id, raw[4].id);
    assert!(report.skipped[0].reason.contains("gold"));

    match run(&raw, &IngestConfig { max_skip_rate: 0.05 }) {
        Err(IngestError::SkipRate { skipped, total, .. }) => assert_eq!((skipped, total), (1, 10)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn fusion_rescue_is_labeled() {
    let mut raw = toy(1);
    raw[0].sim = Some(SimOutcome {
        text: false,
        image: false,
        fusion: true,
    });
    let report = run(&raw, &IngestConfig::default()).unwrap();
    assert_eq!(report.examples[0].path_scores, [0, 0, 1]);
}

#[test]
fn reingest_is_bitwise_identical() {
    let raw = toy(10);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_corpus(a.path(), &run(&raw, &IngestConfig::default()).unwrap().examples).unwrap();
    write_corpus(b.path(), &run(&raw, &IngestConfig::default()).unwrap().examples).unwrap();
    for f in [SIDECAR_FILE, EXAMPLES_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
