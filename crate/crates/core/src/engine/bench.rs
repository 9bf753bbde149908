//! Efficiency benchmark: adaptive routing against always-fuse.
//!
//! For each seed and dataset, a fixed-size sample is drawn without
//! replacement and inferred in both modes. Rows report the per-sample mean
//! of parallel latency and of throughput; summary rows average the seeds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{infer, Backends, EngineError, EngineOptions, RoutingMode};
use crate::gate::GateParameters;
use crate::hashing::{derive_seed, hash64};
use crate::trainer::{PathCostVector, RoutingExample};
use crate::types::DatasetTag;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_per_dataset: usize,
    pub n_seeds: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_per_dataset: 50,
            n_seeds: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: DatasetTag,
    pub mode: RoutingMode,
    pub seed: u64,
    pub mean_latency_s: f64,
    pub mean_tps: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummaryRow {
    pub dataset: DatasetTag,
    pub mode: RoutingMode,
    pub mean_latency_s: f64,
    pub mean_tps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummaryRow>,
    /// Datasets with fewer instances than requested.
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn summary_for(&self, dataset: DatasetTag, mode: RoutingMode) -> Option<&BenchSummaryRow> {
        self.summary.iter().find(|r| r.dataset == dataset && r.mode == mode)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["dataset", "mode", "seed", "mean_latency_s", "mean_tps"])?;
        for r in &self.rows {
            w.write_record([
                r.dataset.as_str().to_string(),
                r.mode.as_str().to_string(),
                r.seed.to_string(),
                format!("{:.6}", r.mean_latency_s),
                format!("{:.6}", r.mean_tps),
            ])?;
        }
        for r in &self.summary {
            w.write_record([
                r.dataset.as_str().to_string(),
                r.mode.as_str().to_string(),
                "mean".to_string(),
                format!("{:.6}", r.mean_latency_s),
                format!("{:.6}", r.mean_tps),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run_efficiency_bench(
    datasets: &BTreeMap<DatasetTag, Vec<RoutingExample>>,
    gate: &GateParameters,
    backends: &Backends<'_>,
    c: &PathCostVector,
    options: &EngineOptions,
    cfg: &BenchConfig,
) -> Result<BenchReport, EngineError> {
    if cfg.n_per_dataset == 0 || cfg.n_seeds == 0 {
        return Err(EngineError::InvalidArgument(
            "bench needs n_per_dataset > 0 and n_seeds > 0".into(),
        ));
    }
    let mut report = BenchReport::default();
    for (&tag, pool) in datasets {
        if pool.is_empty() {
            report.warnings.push(format!("{tag}: no instances; skipped"));
            continue;
        }
        if pool.len() < cfg.n_per_dataset {
            let msg = format!("{tag}: only {} instances, wanted {}", pool.len(), cfg.n_per_dataset);
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        let n = cfg.n_per_dataset.min(pool.len());
        for mode in [RoutingMode::Adaptive, RoutingMode::NonAdaptive] {
            let (mut lat_acc, mut tps_acc) = (0.0, 0.0);
            for s in 0..cfg.n_seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ hash64(tag.as_str().as_bytes()), s));
                let sample: Vec<&RoutingExample> = pool.choose_multiple(&mut rng, n).collect();
                let opts = EngineOptions { mode, ..*options };
                let (mut lat, mut tps) = (0.0, 0.0);
                for ex in &sample {
                    let rec = infer(ex, Some(gate), backends, c, &opts)?;
                    lat += rec.parallel_latency;
                    tps += rec.tps();
                }
                let row = BenchRow {
                    dataset: tag,
                    mode,
                    seed: s,
                    mean_latency_s: lat / n as f64,
                    mean_tps: tps / n as f64,
                    n,
                };
                lat_acc += row.mean_latency_s;
                tps_acc += row.mean_tps;
                report.rows.push(row);
            }
            report.summary.push(BenchSummaryRow {
                dataset: tag,
                mode,
                mean_latency_s: lat_acc / cfg.n_seeds as f64,
                mean_tps: tps_acc / cfg.n_seeds as f64,
            });
        }
    }
    Ok(report)
}
