//! Gate policy training.
//!
//! Each instance carries binary per-path correctness scores `s`. The training
//! target is `softmax(s / tau)`; the gate's distribution `softmax(z / tau_g)`
//! is pulled toward it by KL divergence, plus `lambda` times the expected path
//! cost under the gate's distribution.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experts::ExpertOutput;
use crate::gate::{
    backward_accumulate, concat_input, forward, init_gate, logits, GateDims, GateError, GateInput,
    GateParameters, Mode, RoutingLogits, NUM_PATHS,
};
use crate::hashing::derive_seed;
use crate::numerics::{
    adamw_step, clip_grad_norm, kl_div, lr_at, softmax, NumericsError, OptimizerState, ProbVector,
    ScheduleConfig,
};
use crate::table::Table;
use crate::types::{DatasetTag, PathScores, RoutePath};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Gate(#[from] GateError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// One table-query instance with its per-path correctness labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingExample {
    pub id: String,
    pub dataset: DatasetTag,
    pub question: String,
    pub table: Table,
    pub table_markdown: String,
    /// Text, image, fusion correctness in path order.
    pub path_scores: PathScores,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_expert_outputs: Option<(ExpertOutput, ExpertOutput)>,
    /// Resolved from the embedding sidecar; `None` means unresolved.
    #[serde(skip)]
    pub embeddings: Option<GateInput>,
}

impl RoutingExample {
    pub fn validate_scores(&self) -> Result<()> {
        if self.path_scores.iter().any(|&s| s > 1) {
            return Err(TrainError::Ingest(format!(
                "{}: path scores must be 0/1, got {:?}",
                self.id, self.path_scores
            )));
        }
        Ok(())
    }
}

/// Empirical per-path cost in path order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct PathCostVector([f64; 3]);

impl PathCostVector {
    /// Measured text / image / fusion costs.
    pub const MEASURED: PathCostVector = PathCostVector([0.73, 0.81, 0.96]);

    pub fn new(costs: [f64; 3]) -> Result<Self> {
        if costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(TrainError::Config(format!("path costs must be positive, got {costs:?}")));
        }
        Ok(Self(costs))
    }

    pub fn as_array(&self) -> &[f64; 3] {
        &self.0
    }

    pub fn get(&self, path: RoutePath) -> f64 {
        self.0[path.index()]
    }
}

impl Default for PathCostVector {
    fn default() -> Self {
        Self::MEASURED
    }
}

impl TryFrom<[f64; 3]> for PathCostVector {
    type Error = TrainError;

    fn try_from(value: [f64; 3]) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PathCostVector> for [f64; 3] {
    fn from(c: PathCostVector) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub tau: f64,
    pub tau_g: f64,
    pub lambda: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            batch_size: 8,
            grad_accum: 4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            tau: 0.3,
            tau_g: 1.0,
            lambda: 0.15,
            warmup_ratio: 0.05,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_max", self.lr_max),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("tau", self.tau),
            ("tau_g", self.tau_g),
        ];
        for (name, v) in positive {
            // weight_decay may be zero for ablations.
            let ok = if name == "weight_decay" { v >= 0.0 } else { v > 0.0 };
            if !(ok && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return Err(TrainError::Config(
                "batch_size, grad_accum and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::Config(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}

/// `softmax(s / tau)`.
pub fn build_target(s: &PathScores, tau: f64) -> Result<ProbVector> {
    Ok(softmax(&s.map(f64::from), tau)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub resource: f64,
    pub grad: [f64; 3],
}

/// Task loss, expected-cost loss, their weighted sum and the analytic
/// gradient of the sum with respect to the logits.
pub fn total_loss(
    z: &RoutingLogits,
    s: &PathScores,
    c: &PathCostVector,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let target = build_target(s, cfg.tau)?;
    let p = softmax(z, cfg.tau_g)?;
    let task = kl_div(&target, &p)?;
    let resource = p.dot(c.as_array());
    let mut grad = [0.0; 3];
    for (i, g) in grad.iter_mut().enumerate() {
        let pi = p.get(i);
        let d_task = (pi - target.get(i)) / cfg.tau_g;
        let d_resource = pi * (c.as_array()[i] - resource) / cfg.tau_g;
        *g = d_task + cfg.lambda * d_resource;
    }
    Ok(LossBreakdown {
        total: task + cfg.lambda * resource,
        task,
        resource,
        grad,
    })
}

/// Argmax over logits; exact ties go to the cheapest path, then the lowest
/// index.
pub fn select_path(z: &RoutingLogits, c: &PathCostVector) -> RoutePath {
    let mut best = 0;
    for i in 1..NUM_PATHS {
        let better = z[i] > z[best] || (z[i] == z[best] && c.as_array()[i] < c.as_array()[best]);
        if better {
            best = i;
        }
    }
    RoutePath::from_index(best).expect("index below NUM_PATHS")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub routing_accuracy: f64,
    pub expected_cost: f64,
    pub path_distribution: [f64; 3],
    pub n: usize,
}

/// A training-ready instance: concatenated features plus scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: Vec<f32>,
    pub scores: PathScores,
}

impl TrainingSample {
    fn input(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }
}

/// Concatenates resolved embeddings into training features. `role` names
/// the split in error messages.
pub fn prepare_samples(data: &[RoutingExample], role: &str) -> Result<Vec<TrainingSample>> {
    data.iter()
        .map(|ex| {
            ex.validate_scores()?;
            let gi = ex.embeddings.as_ref().ok_or_else(|| {
                TrainError::Ingest(format!("{role} example {} has unresolved embeddings", ex.id))
            })?;
            let x = concat_input(gi).map_err(|e| TrainError::Ingest(format!("{}: {e}", ex.id)))?;
            Ok(TrainingSample {
                features: x.into_iter().map(|v| v as f32).collect(),
                scores: ex.path_scores,
            })
        })
        .collect()
}

pub fn evaluate_policy(
    gate: &GateParameters,
    data: &[RoutingExample],
    c: &PathCostVector,
    tau_g: f64,
) -> Result<PolicyMetrics> {
    let samples = prepare_samples(data, "evaluation")?;
    evaluate_samples(gate, &samples, c, tau_g)
}

pub fn evaluate_samples(
    gate: &GateParameters,
    data: &[TrainingSample],
    c: &PathCostVector,
    tau_g: f64,
) -> Result<PolicyMetrics> {
    if data.is_empty() {
        return Err(TrainError::Config("cannot evaluate a policy on no data".into()));
    }
    let mut correct = 0usize;
    let mut cost = 0.0;
    let mut counts = [0usize; 3];
    for sample in data {
        let z = logits(gate, &sample.input())?;
        let path = select_path(&z, c);
        counts[path.index()] += 1;
        if sample.scores[path.index()] == 1 {
            correct += 1;
        }
        cost += softmax(&z, tau_g)?.dot(c.as_array());
    }
    let n = data.len() as f64;
    Ok(PolicyMetrics {
        routing_accuracy: correct as f64 / n,
        expected_cost: cost / n,
        path_distribution: counts.map(|k| k as f64 / n),
        n: data.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub task: f64,
    pub resource: f64,
    pub grad_norm: f64,
}

pub const HISTORY_CSV_HEADER: [&str; 6] = ["step", "lr", "L_total", "L_task", "L_resource", "grad_norm"];

pub fn write_history_csv<W: std::io::Write>(rows: &[HistoryRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.lr),
            format!("{:.12}", r.total),
            format!("{:.12}", r.task),
            format!("{:.12}", r.resource),
            format!("{:.12}", r.grad_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best gate by validation routing accuracy, rounded to `f32`.
    pub best: GateParameters,
    /// Optimizer state at the end of the epoch that produced `best`.
    pub optimizer: OptimizerState,
    pub best_epoch: usize,
    pub best_metrics: PolicyMetrics,
    pub epoch_metrics: Vec<PolicyMetrics>,
    pub history: Vec<HistoryRow>,
    pub excluded: usize,
}

impl TrainOutcome {
    pub fn checkpoint_metadata(&self, cfg: &TrainConfig) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("best_epoch".into(), self.best_epoch.to_string()),
            ("val_routing_accuracy".into(), format!("{:.6}", self.best_metrics.routing_accuracy)),
            ("val_expected_cost".into(), format!("{:.6}", self.best_metrics.expected_cost)),
            ("lambda".into(), cfg.lambda.to_string()),
            ("seed".into(), cfg.seed.to_string()),
        ])
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;
const INIT_STREAM: u64 = 0x494e_4954;

/// Trains a canonical-size gate. Examples from evaluation-only datasets are
/// dropped from the training set.
pub fn train(
    dataset: &[RoutingExample],
    val: &[RoutingExample],
    cfg: &TrainConfig,
    c: &PathCostVector,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (kept, excluded): (Vec<&RoutingExample>, Vec<&RoutingExample>) =
        dataset.iter().partition(|ex| ex.dataset.is_trainable());
    if !excluded.is_empty() {
        warn!("excluding {} evaluation-only examples from training", excluded.len());
    }
    let kept: Vec<RoutingExample> = kept.into_iter().cloned().collect();
    let train_samples = prepare_samples(&kept, "training")?;
    let val_samples = prepare_samples(val, "validation")?;
    let mut outcome = train_samples_with_dims(GateDims::CANONICAL, &train_samples, &val_samples, cfg, c)?;
    outcome.excluded = excluded.len();
    Ok(outcome)
}

/// Training loop over prepared samples of any gate size.
pub fn train_samples_with_dims(
    dims: GateDims,
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
    cfg: &TrainConfig,
    c: &PathCostVector,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    for s in train_set.iter().chain(val_set) {
        if s.features.len() != dims.input {
            return Err(TrainError::Ingest(format!(
                "feature length {} does not match gate input {}",
                s.features.len(),
                dims.input
            )));
        }
    }

    let steps_per_epoch = train_set.len().div_ceil(cfg.effective_batch()) as u64;
    let schedule = ScheduleConfig::new(cfg.lr_max, cfg.warmup_ratio, steps_per_epoch * cfg.epochs as u64)?;

    let mut params = init_gate(dims, derive_seed(cfg.seed, INIT_STREAM));
    let mut opt = OptimizerState::new(params.num_params(), cfg.weight_decay);
    let mut grads = GateParameters::zeros(dims);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let dropout_base = derive_seed(cfg.seed, DROPOUT_STREAM);
    let mut forward_calls = 0u64;

    let mut history = Vec::with_capacity(schedule.total_steps as usize);
    let mut epoch_metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, GateParameters, OptimizerState, PolicyMetrics)> = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        // An optimizer step covers `grad_accum` micro-batches of `batch_size`.
        for group in order.chunks(cfg.effective_batch()) {
            grads.fill_zero();
            let scale = 1.0 / group.len() as f64;
            let (mut total, mut task, mut resource) = (0.0, 0.0, 0.0);
            for micro in group.chunks(cfg.batch_size) {
                for &idx in micro {
                    let sample = &train_set[idx];
                    let x = sample.input();
                    let seed = derive_seed(dropout_base, forward_calls);
                    forward_calls += 1;
                    let (z, cache) = forward(&params, &x, Mode::Train, seed)?;
                    let loss = total_loss(&z, &sample.scores, c, cfg)?;
                    total += loss.total * scale;
                    task += loss.task * scale;
                    resource += loss.resource * scale;
                    backward_accumulate(&params, &cache, &loss.grad.map(|g| g * scale), &mut grads)?;
                }
            }
            let grad_norm = clip_grad_norm(grads.as_flat_mut(), cfg.clip_norm);
            let lr = lr_at(step, &schedule)?;
            adamw_step(params.as_flat_mut(), grads.as_flat(), &mut opt, lr)?;
            history.push(HistoryRow {
                step,
                lr,
                total,
                task,
                resource,
                grad_norm,
            });
            step += 1;
        }

        let mut snapshot = params.clone();
        snapshot.round_to_f32();
        let metrics = evaluate_samples(&snapshot, val_set, c, cfg.tau_g)?;
        info!(
            "epoch {epoch}: val routing accuracy {:.4}, expected cost {:.4}",
            metrics.routing_accuracy, metrics.expected_cost
        );
        let improved = best
            .as_ref()
            .is_none_or(|(_, _, _, m)| metrics.routing_accuracy > m.routing_accuracy);
        epoch_metrics.push(metrics.clone());
        if improved {
            best = Some((epoch, snapshot, opt.clone(), metrics));
        }
    }

    let (best_epoch, best, optimizer, best_metrics) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        optimizer,
        best_epoch,
        best_metrics,
        epoch_metrics,
        history,
        excluded: 0,
    })
}

/// Splits examples into train and validation, stratified by dataset tag.
/// Each tag contributes `round(n * val_fraction)` examples to validation.
pub fn split_train_val(
    examples: &[RoutingExample],
    val_fraction: f64,
    seed: u64,
) -> (Vec<RoutingExample>, Vec<RoutingExample>) {
    let mut by_tag: BTreeMap<DatasetTag, Vec<&RoutingExample>> = BTreeMap::new();
    for ex in examples {
        by_tag.entry(ex.dataset).or_default().push(ex);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut group) in by_tag {
        group.shuffle(&mut rng);
        let n_val = (group.len() as f64 * val_fraction).round() as usize;
        let (v, t) = group.split_at(n_val.min(group.len()));
        val.extend(v.iter().map(|e| (*e).clone()));
        train.extend(t.iter().map(|e| (*e).clone()));
    }
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg_with(lambda: f64, tau: f64, tau_g: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            tau,
            tau_g,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_max, 1e-4);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.grad_accum, 4);
        assert_eq!(cfg.effective_batch(), 32);
        assert_eq!(cfg.weight_decay, 0.01);
        assert_eq!(cfg.clip_norm, 1.0);
        assert_eq!(cfg.tau, 0.3);
        assert_eq!(cfg.tau_g, 1.0);
        assert_eq!(cfg.lambda, 0.15);
        assert_eq!(cfg.warmup_ratio, 0.05);
        assert_eq!(cfg.epochs, 1);
    }

    #[test]
    fn config_rejects_nonsense() {
        assert!(TrainConfig { tau: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { weight_decay: 0.0, ..TrainConfig::default() }.validate().is_ok());
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn targets() {
        for s in [[1, 1, 1], [0, 0, 0]] {
            let t = build_target(&s, 0.3).unwrap();
            for i in 0..3 {
                assert_abs_diff_eq!(t.get(i), 1.0 / 3.0, epsilon = 1e-12);
            }
        }
        let t = build_target(&[1, 0, 0], 0.3).unwrap();
        assert_abs_diff_eq!(t.get(0), 0.93340, epsilon = 1e-5);
        assert_abs_diff_eq!(t.get(1), 0.03330, epsilon = 1e-5);
        assert_abs_diff_eq!(t.get(2), 0.03330, epsilon = 1e-5);
    }

    #[test]
    fn loss_degenerate_cases() {
        let c = PathCostVector::MEASURED;
        let z = [0.4, -1.0, 2.0];
        let l = total_loss(&z, &[1, 0, 1], &c, &cfg_with(0.0, 0.3, 1.0)).unwrap();
        assert_eq!(l.total, l.task);

        let l = total_loss(&[0.0; 3], &[0, 1, 0], &c, &cfg_with(0.15, 0.3, 1.0)).unwrap();
        assert_abs_diff_eq!(l.resource, 0.83333, epsilon = 1e-5);
        assert_abs_diff_eq!(l.resource, (0.73 + 0.81 + 0.96) / 3.0, epsilon = 1e-12);

        // z / tau_g equal to s / tau up to a shift reproduces the target.
        let s = [1, 0, 1];
        let z = [1.0 + 5.0, 5.0, 1.0 + 5.0];
        let l = total_loss(&z, &s, &c, &cfg_with(0.15, 0.3, 0.3)).unwrap();
        assert_abs_diff_eq!(l.task, 0.0, epsilon = 1e-12);
        let z = [1.0 / 0.3 - 2.0, -2.0, 1.0 / 0.3 - 2.0];
        let l = total_loss(&z, &s, &c, &cfg_with(0.15, 0.3, 1.0)).unwrap();
        assert_abs_diff_eq!(l.task, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tie_break_prefers_cheapest() {
        let c = PathCostVector::MEASURED;
        assert_eq!(select_path(&[2.0, 1.0, 0.0], &c), RoutePath::Text);
        assert_eq!(select_path(&[1.0, 1.0, 0.0], &c), RoutePath::Text);
        assert_eq!(select_path(&[0.0, 1.0, 1.0], &c), RoutePath::Image);
        assert_eq!(select_path(&[0.0; 3], &c), RoutePath::Text);
        let reversed = PathCostVector::new([0.9, 0.8, 0.1]).unwrap();
        assert_eq!(select_path(&[0.0; 3], &reversed), RoutePath::Fusion);
    }

    #[test]
    fn cost_vector_validation() {
        assert!(PathCostVector::new([0.1, 0.0, 1.0]).is_err());
        assert!(PathCostVector::new([0.1, f64::NAN, 1.0]).is_err());
        assert!(serde_json::from_str::<PathCostVector>("[1, -1, 1]").is_err());
    }

    fn toy_samples(n: usize, dim: usize, seed: u64) -> Vec<TrainingSample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let class = rng.gen_range(0..3usize);
                let features = (0..dim)
                    .map(|i| {
                        let signal = if i % 3 == class { 1.0 } else { -1.0 };
                        (signal + rng.gen_range(-0.5..0.5)) as f32
                    })
                    .collect();
                let mut scores = [0u8; 3];
                scores[class] = 1;
                TrainingSample { features, scores }
            })
            .collect()
    }

    #[test]
    fn policy_evaluation_basics() {
        let dims = GateDims::new(6, 4);
        let samples = toy_samples(30, 6, 1);
        // A zero gate always ties and therefore always picks the cheapest path.
        let zero = GateParameters::zeros(dims);
        let m = evaluate_samples(&zero, &samples, &PathCostVector::MEASURED, 1.0).unwrap();
        assert_eq!(m.path_distribution, [1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(m.expected_cost, (0.73 + 0.81 + 0.96) / 3.0, epsilon = 1e-12);

        // Gate whose output bias always selects fusion, on data where fusion is always right.
        let mut fusion = GateParameters::zeros(dims);
        fusion.b2_mut()[2] = 5.0;
        let all_fusion: Vec<_> = samples
            .iter()
            .map(|s| TrainingSample { scores: [0, 0, 1], ..s.clone() })
            .collect();
        let m = evaluate_samples(&fusion, &all_fusion, &PathCostVector::MEASURED, 1.0).unwrap();
        assert_eq!(m.routing_accuracy, 1.0);
        assert_abs_diff_eq!(m.path_distribution.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(evaluate_samples(&fusion, &[], &PathCostVector::MEASURED, 1.0).is_err());
    }

    #[test]
    fn small_gate_learns_and_is_deterministic() {
        let dims = GateDims::new(24, 16);
        let train_set = toy_samples(600, 24, 2);
        let val_set = toy_samples(150, 24, 3);
        let cfg = TrainConfig {
            lambda: 0.0,
            lr_max: 1e-2,
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_samples_with_dims(dims, &train_set, &val_set, &cfg, &PathCostVector::MEASURED).unwrap();
        let b = train_samples_with_dims(dims, &train_set, &val_set, &cfg, &PathCostVector::MEASURED).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.history.len(), 3 * 600usize.div_ceil(32));
        assert!(a.best_metrics.routing_accuracy > 0.9, "{:?}", a.best_metrics);
        assert_eq!(a.history[0].lr, 0.0);
        assert!(a.history.iter().all(|r| r.grad_norm.is_finite()));
    }

    #[test]
    fn unresolved_embeddings_fail_fast() {
        let ex = RoutingExample {
            id: "x1".into(),
            dataset: DatasetTag::Wtq,
            question: "q".into(),
            table: Table::default(),
            table_markdown: String::new(),
            path_scores: [1, 0, 0],
            gold_answer: "a".into(),
            cached_expert_outputs: None,
            embeddings: None,
        };
        let err = train(&[ex.clone()], &[ex], &TrainConfig::default(), &PathCostVector::MEASURED).unwrap_err();
        assert!(matches!(err, TrainError::Ingest(ref m) if m.contains("x1")), "{err}");
    }

    #[test]
    fn stratified_split() {
        let mk = |i: usize, tag: DatasetTag| RoutingExample {
            id: format!("{tag}-{i}"),
            dataset: tag,
            question: String::new(),
            table: Table::default(),
            table_markdown: String::new(),
            path_scores: [0, 0, 1],
            gold_answer: "g".into(),
            cached_expert_outputs: None,
            embeddings: None,
        };
        let mut all = Vec::new();
        for i in 0..20 {
            all.push(mk(i, DatasetTag::Wtq));
        }
        for i in 0..40 {
            all.push(mk(i, DatasetTag::TabFact));
        }
        let (train, val) = split_train_val(&all, 0.15, 1);
        assert_eq!(val.iter().filter(|e| e.dataset == DatasetTag::Wtq).count(), 3);
        assert_eq!(val.iter().filter(|e| e.dataset == DatasetTag::TabFact).count(), 6);
        assert_eq!(train.len() + val.len(), 60);
        let (train2, val2) = split_train_val(&all, 0.15, 1);
        assert_eq!((train, val), (train2, val2));
    }

    #[test]
    fn history_csv_columns() {
        let mut buf = Vec::new();
        write_history_csv(
            &[HistoryRow { step: 0, lr: 0.0, total: 1.0, task: 0.5, resource: 0.8, grad_norm: 2.0 }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,lr,L_total,L_task,L_resource,grad_norm\n0,"));
    }
}
