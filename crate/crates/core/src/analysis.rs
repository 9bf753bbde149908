//! Policy diagnostics over per-instance outcomes.
//!
//! All rates are percentages in `[0, 100]`. A rate whose denominator is empty
//! is reported as `None` rather than 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::answers_match;
use crate::engine::InferenceRecord;
use crate::gate::{logits, GateDims, GateParameters};
use crate::trainer::{
    evaluate_samples, prepare_samples, select_path, train_samples_with_dims, PathCostVector, PolicyMetrics,
    RoutingExample, TrainConfig, TrainError, TrainingSample,
};
use crate::types::{DatasetTag, RoutePath};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no records to analyze")]
    Empty,
    #[error("record {0} has no fusion label but both experts are wrong")]
    IncompleteData(String),
    #[error("lambda sweep needs at least one lambda")]
    NoLambdas,
    #[error(transparent)]
    Train(#[from] TrainError),
}

type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub example_id: String,
    pub dataset: DatasetTag,
    pub text_correct: bool,
    pub image_correct: bool,
    pub fusion_correct: Option<bool>,
    pub chosen_path: RoutePath,
    pub final_correct: bool,
}

impl OutcomeRecord {
    /// Outcome of routing `ex` to `path`, scored by the offline path labels.
    pub fn from_routing(ex: &RoutingExample, path: RoutePath) -> Self {
        Self {
            example_id: ex.id.clone(),
            dataset: ex.dataset,
            text_correct: ex.path_scores[0] == 1,
            image_correct: ex.path_scores[1] == 1,
            fusion_correct: Some(ex.path_scores[2] == 1),
            chosen_path: path,
            final_correct: ex.path_scores[path.index()] == 1,
        }
    }

    /// Outcome of a live inference, scored against the gold answer.
    pub fn from_inference(ex: &RoutingExample, rec: &InferenceRecord) -> Self {
        Self {
            final_correct: answers_match(&rec.final_answer, &ex.gold_answer),
            ..Self::from_routing(ex, rec.chosen_path)
        }
    }
}

fn percent(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

/// Share of records where exactly one single-modality expert is correct.
pub fn complementarity_rate(records: &[OutcomeRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let k = records.iter().filter(|r| r.text_correct != r.image_correct).count();
    Ok(percent(k, records.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CasePartition {
    pub both_correct: f64,
    pub only_text: f64,
    pub only_image: f64,
    pub both_wrong_rescued: f64,
    pub both_wrong_unsolved: f64,
}

impl CasePartition {
    pub fn total(&self) -> f64 {
        self.both_correct + self.only_text + self.only_image + self.both_wrong_rescued + self.both_wrong_unsolved
    }
}

pub fn case_partition(records: &[OutcomeRecord]) -> Result<CasePartition> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut counts = [0usize; 5];
    for r in records {
        let bucket = match (r.text_correct, r.image_correct) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => match r.fusion_correct {
                Some(true) => 3,
                Some(false) => 4,
                None => return Err(AnalysisError::IncompleteData(r.example_id.clone())),
            },
        };
        counts[bucket] += 1;
    }
    let n = records.len();
    Ok(CasePartition {
        both_correct: percent(counts[0], n),
        only_text: percent(counts[1], n),
        only_image: percent(counts[2], n),
        both_wrong_rescued: percent(counts[3], n),
        both_wrong_unsolved: percent(counts[4], n),
    })
}

/// Share of hard cases (both experts wrong) that fusion solves. `None` when
/// there are no hard cases.
pub fn synergy_success_rate(records: &[OutcomeRecord]) -> Result<Option<f64>> {
    let mut hard = 0;
    let mut rescued = 0;
    for r in records.iter().filter(|r| !r.text_correct && !r.image_correct) {
        hard += 1;
        match r.fusion_correct {
            Some(true) => rescued += 1,
            Some(false) => {}
            None => return Err(AnalysisError::IncompleteData(r.example_id.clone())),
        }
    }
    Ok((hard > 0).then(|| percent(rescued, hard)))
}

/// The greedy reference: text if it is right, else image if it is right,
/// else fuse.
pub fn heuristic_choice(text_correct: bool, image_correct: bool) -> RoutePath {
    if text_correct {
        RoutePath::Text
    } else if image_correct {
        RoutePath::Image
    } else {
        RoutePath::Fusion
    }
}

/// Share of records whose chosen path matches the greedy reference.
pub fn heuristic_alignment(records: &[OutcomeRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let k = records
        .iter()
        .filter(|r| heuristic_choice(r.text_correct, r.image_correct) == r.chosen_path)
        .count();
    Ok(percent(k, records.len()))
}

/// Unweighted mean over datasets of the per-dataset final accuracy, in
/// percent.
pub fn mean_dataset_performance(records: &[OutcomeRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut per: BTreeMap<DatasetTag, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = per.entry(r.dataset).or_default();
        e.0 += r.final_correct as usize;
        e.1 += 1;
    }
    Ok(per.values().map(|&(k, n)| percent(k, n)).sum::<f64>() / per.len() as f64)
}

/// Routes every example with `gate` and scores it by its path labels.
pub fn route_outcomes(
    gate: &GateParameters,
    examples: &[RoutingExample],
    samples: &[TrainingSample],
    c: &PathCostVector,
) -> Result<Vec<OutcomeRecord>> {
    examples
        .iter()
        .zip(samples)
        .map(|(ex, s)| {
            let x: Vec<f64> = s.features.iter().map(|&v| v as f64).collect();
            let z = logits(gate, &x).map_err(TrainError::from)?;
            Ok(OutcomeRecord::from_routing(ex, select_path(&z, c)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub metrics: PolicyMetrics,
    pub alignment: f64,
    pub performance: f64,
}

/// Trains one gate per lambda from the same seed and evaluates each on
/// `val`. Runs sequentially.
pub fn lambda_sweep(
    train: &[RoutingExample],
    val: &[RoutingExample],
    lambdas: &[f64],
    cfg: &TrainConfig,
    c: &PathCostVector,
) -> Result<Vec<SweepRow>> {
    let kept: Vec<RoutingExample> = train.iter().filter(|e| e.dataset.is_trainable()).cloned().collect();
    let train_samples = prepare_samples(&kept, "training")?;
    let val_samples = prepare_samples(val, "validation")?;
    lambda_sweep_samples(GateDims::CANONICAL, &train_samples, val, &val_samples, lambdas, cfg, c)
}

/// [`lambda_sweep`] over prepared samples; `val` and `val_samples` are
/// parallel.
pub fn lambda_sweep_samples(
    dims: GateDims,
    train: &[TrainingSample],
    val: &[RoutingExample],
    val_samples: &[TrainingSample],
    lambdas: &[f64],
    cfg: &TrainConfig,
    c: &PathCostVector,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(AnalysisError::NoLambdas);
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig { lambda, ..cfg.clone() };
        let outcome = train_samples_with_dims(dims, train, val_samples, &cfg, c)?;
        let metrics = evaluate_samples(&outcome.best, val_samples, c, cfg.tau_g)?;
        let outcomes = route_outcomes(&outcome.best, val, val_samples, c)?;
        rows.push(SweepRow {
            lambda,
            metrics,
            alignment: heuristic_alignment(&outcomes)?,
            performance: mean_dataset_performance(&outcomes)?,
        });
    }
    Ok(rows)
}

/// Per-lambda path shares in percent.
pub fn write_path_distribution_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "text_pct", "image_pct", "fusion_pct", "expected_cost", "routing_accuracy"])?;
    for r in rows {
        let d = r.metrics.path_distribution;
        w.write_record([
            r.lambda.to_string(),
            format!("{:.4}", 100.0 * d[0]),
            format!("{:.4}", 100.0 * d[1]),
            format!("{:.4}", 100.0 * d[2]),
            format!("{:.6}", r.metrics.expected_cost),
            format!("{:.6}", r.metrics.routing_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Heuristic alignment against mean task performance, per lambda.
pub fn write_alignment_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "alignment_pct", "performance_pct"])?;
    for r in rows {
        w.write_record([
            r.lambda.to_string(),
            format!("{:.4}", r.alignment),
            format!("{:.4}", r.performance),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_outcomes_csv<W: std::io::Write>(outcomes: &[OutcomeRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "example_id",
        "dataset",
        "text_correct",
        "image_correct",
        "fusion_correct",
        "chosen_path",
        "final_correct",
    ])?;
    let bit = |b: bool| if b { "1" } else { "0" };
    for o in outcomes {
        w.write_record([
            o.example_id.as_str(),
            o.dataset.as_str(),
            bit(o.text_correct),
            bit(o.image_correct),
            o.fusion_correct.map(bit).unwrap_or(""),
            o.chosen_path.as_str(),
            bit(o.final_correct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n: usize,
    pub complementarity_rate: f64,
    pub case_partition: CasePartition,
    pub synergy_success_rate: Option<f64>,
    pub heuristic_alignment: f64,
    pub performance: f64,
    pub path_distribution: [f64; 3],
}

pub fn analyze(records: &[OutcomeRecord]) -> Result<AnalysisReport> {
    let n = records.len();
    if n == 0 {
        return Err(AnalysisError::Empty);
    }
    let mut dist = [0.0; 3];
    for r in records {
        dist[r.chosen_path.index()] += 100.0 / n as f64;
    }
    Ok(AnalysisReport {
        n,
        complementarity_rate: complementarity_rate(records)?,
        case_partition: case_partition(records)?,
        synergy_success_rate: synergy_success_rate(records)?,
        heuristic_alignment: heuristic_alignment(records)?,
        performance: mean_dataset_performance(records)?,
        path_distribution: dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, t: bool, i: bool, f: Option<bool>, path: RoutePath) -> OutcomeRecord {
        let final_correct = match path {
            RoutePath::Text => t,
            RoutePath::Image => i,
            RoutePath::Fusion => f.unwrap_or(false),
        };
        OutcomeRecord {
            example_id: id.into(),
            dataset: DatasetTag::Wtq,
            text_correct: t,
            image_correct: i,
            fusion_correct: f,
            chosen_path: path,
            final_correct,
        }
    }

    #[test]
    fn complementarity_counts() {
        let all = vec![rec("a", true, true, Some(true), RoutePath::Text); 3];
        assert_eq!(complementarity_rate(&all).unwrap(), 0.0);
        let mixed = vec![
            rec("a", true, true, Some(true), RoutePath::Text),
            rec("b", true, false, Some(true), RoutePath::Text),
            rec("c", false, true, Some(true), RoutePath::Text),
            rec("d", false, false, Some(true), RoutePath::Text),
        ];
        assert_eq!(complementarity_rate(&mixed).unwrap(), 50.0);
        assert!(matches!(complementarity_rate(&[]), Err(AnalysisError::Empty)));
    }

    #[test]
    fn partition_fixture() {
        let mut rs = Vec::new();
        for k in 0..6 {
            rs.push(rec(&format!("b{k}"), true, true, None, RoutePath::Text));
        }
        rs.push(rec("t", true, false, None, RoutePath::Text));
        rs.push(rec("i1", false, true, None, RoutePath::Image));
        rs.push(rec("i2", false, true, None, RoutePath::Image));
        rs.push(rec("r", false, false, Some(true), RoutePath::Fusion));
        let p = case_partition(&rs).unwrap();
        assert_eq!(
            (p.both_correct, p.only_text, p.only_image, p.both_wrong_rescued, p.both_wrong_unsolved),
            (60.0, 10.0, 20.0, 10.0, 0.0)
        );
        assert!((p.total() - 100.0).abs() < 1e-9);
        rs.push(rec("missing", false, false, None, RoutePath::Text));
        match case_partition(&rs) {
            Err(AnalysisError::IncompleteData(id)) => assert_eq!(id, "missing"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synergy_rates() {
        let mut rs: Vec<_> = (0..4).map(|k| rec(&k.to_string(), false, false, Some(false), RoutePath::Fusion)).collect();
        rs.push(rec("x", false, false, Some(true), RoutePath::Fusion));
        assert_eq!(synergy_success_rate(&rs).unwrap(), Some(20.0));
        let all = vec![rec("x", false, false, Some(true), RoutePath::Fusion); 3];
        assert_eq!(synergy_success_rate(&all).unwrap(), Some(100.0));
        let easy = vec![rec("x", true, true, None, RoutePath::Text)];
        assert_eq!(synergy_success_rate(&easy).unwrap(), None);
    }

    #[test]
    fn alignment_hand_trace() {
        let rs = vec![
            rec("1", true, false, None, RoutePath::Text),
            rec("2", false, true, None, RoutePath::Fusion),
            rec("3", false, false, Some(false), RoutePath::Fusion),
            rec("4", true, false, None, RoutePath::Image),
        ];
        assert_eq!(heuristic_alignment(&rs).unwrap(), 50.0);
    }

    #[test]
    fn performance_is_unweighted_over_datasets() {
        let mut a = rec("a", true, true, None, RoutePath::Text);
        a.dataset = DatasetTag::TabFact;
        let b = rec("b", false, false, Some(false), RoutePath::Text);
        let c = rec("c", false, false, Some(false), RoutePath::Text);
        assert_eq!(mean_dataset_performance(&[a, b, c]).unwrap(), 50.0);
    }

    prop_compose! {
        fn arb_record()(t: bool, i: bool, f: bool, p in 0usize..3, d in 0usize..7) -> OutcomeRecord {
            let mut r = rec("r", t, i, Some(f), RoutePath::from_index(p).unwrap());
            r.dataset = DatasetTag::ALL[d];
            r
        }
    }

    proptest! {
        #[test]
        fn greedy_policy_is_fully_aligned(mut rs in prop::collection::vec(arb_record(), 1..200)) {
            for r in &mut rs {
                r.chosen_path = heuristic_choice(r.text_correct, r.image_correct);
            }
            prop_assert_eq!(heuristic_alignment(&rs).unwrap(), 100.0);
        }

        #[test]
        fn percentages_are_bounded(rs in prop::collection::vec(arb_record(), 1..200)) {
            let report = analyze(&rs).unwrap();
            let p = report.case_partition;
            prop_assert!((p.total() - 100.0).abs() < 1e-9);
            for v in [report.complementarity_rate, report.heuristic_alignment, report.performance,
                      p.both_correct, p.only_text, p.only_image, p.both_wrong_rescued, p.both_wrong_unsolved] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
            if let Some(s) = report.synergy_success_rate {
                prop_assert!((0.0..=100.0).contains(&s));
            }
        }
    }
}
