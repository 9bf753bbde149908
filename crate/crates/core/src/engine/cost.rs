//! Per-path cost measurement.
//!
//! `cost = 0.5 * latency + 0.5 / tps`. Unimodal paths are timed directly.
//! The fusion path is derived from the two unimodal timings of each sample:
//! the experts run in parallel, so its latency is the slower one plus a fixed
//! API overhead, and its throughput is that slower expert's.

use serde::{Deserialize, Serialize};

use super::{generate_pair, EngineError, TimingSource};
use crate::experts::{ExpertOutput, GeneratorPair};
use crate::trainer::RoutingExample;
use crate::types::RoutePath;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub api_overhead_s: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            warmup_runs: 5,
            timed_runs: 10,
            api_overhead_s: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostMeasurement {
    pub path: RoutePath,
    pub avg_latency_seconds: f64,
    pub avg_tps: f64,
    pub cost: f64,
}

pub fn path_cost(avg_latency_seconds: f64, avg_tps: f64) -> f64 {
    0.5 * avg_latency_seconds + 0.5 * (1.0 / avg_tps)
}

/// One timed generation: latency and throughput.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub latency: f64,
    pub tps: f64,
}

impl PathSample {
    fn from_output(out: &ExpertOutput) -> Self {
        Self {
            latency: out.latency_seconds,
            tps: if out.latency_seconds > 0.0 {
                out.output_tokens as f64 / out.latency_seconds
            } else {
                0.0
            },
        }
    }
}

/// Fusion timing from the two unimodal timings: slower latency plus
/// overhead, and the slower expert's throughput.
pub fn fusion_from_unimodal(text: PathSample, image: PathSample, api_overhead_s: f64) -> PathSample {
    let slower = if image.latency >= text.latency { image } else { text };
    PathSample {
        latency: slower.latency + api_overhead_s,
        tps: slower.tps,
    }
}

/// Warm-up runs are executed and discarded; each timed run averages latency
/// and TPS over the testbed, and the reported values average the runs.
pub fn measure_cost(
    path: RoutePath,
    testbed: &[RoutingExample],
    generators: &GeneratorPair<'_>,
    timing: TimingSource,
    cfg: &CostConfig,
) -> Result<CostMeasurement, EngineError> {
    if testbed.is_empty() {
        return Err(EngineError::InvalidArgument("cost testbed is empty".into()));
    }
    if cfg.timed_runs == 0 {
        return Err(EngineError::InvalidArgument("timed_runs must be positive".into()));
    }
    let sample = |ex: &RoutingExample| -> Result<PathSample, EngineError> {
        let (text, image) = generate_pair(ex, generators, timing);
        let wrap = |r: Result<ExpertOutput, _>| {
            r.map_err(|source| EngineError::Backend {
                example_id: ex.id.clone(),
                phase: "cost measurement",
                partial: Box::new(super::PartialRecord {
                    example_id: ex.id.clone(),
                    chosen_path: Some(path),
                    t_phase1: None,
                    t_phase2: None,
                }),
                source,
            })
        };
        Ok(match path {
            RoutePath::Text => PathSample::from_output(&wrap(text)?),
            RoutePath::Image => PathSample::from_output(&wrap(image)?),
            RoutePath::Fusion => fusion_from_unimodal(
                PathSample::from_output(&wrap(text)?),
                PathSample::from_output(&wrap(image)?),
                cfg.api_overhead_s,
            ),
        })
    };
    for _ in 0..cfg.warmup_runs {
        for ex in testbed {
            sample(ex)?;
        }
    }
    let (mut latency_sum, mut tps_sum) = (0.0, 0.0);
    for _ in 0..cfg.timed_runs {
        let (mut run_latency, mut run_tps) = (0.0, 0.0);
        for ex in testbed {
            let s = sample(ex)?;
            run_latency += s.latency;
            run_tps += s.tps;
        }
        latency_sum += run_latency / testbed.len() as f64;
        tps_sum += run_tps / testbed.len() as f64;
    }
    let avg_latency_seconds = latency_sum / cfg.timed_runs as f64;
    let avg_tps = tps_sum / cfg.timed_runs as f64;
    Ok(CostMeasurement {
        path,
        avg_latency_seconds,
        avg_tps,
        cost: path_cost(avg_latency_seconds, avg_tps),
    })
}

pub fn write_cost_csv<W: std::io::Write>(rows: &[CostMeasurement], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "avg_latency_s", "avg_tps", "cost"])?;
    for r in rows {
        w.write_record([
            r.path.as_str().to_string(),
            format!("{:.6}", r.avg_latency_seconds),
            format!("{:.6}", r.avg_tps),
            format!("{:.6}", r.cost),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_cost_rows() {
        assert_abs_diff_eq!(path_cost(1.445, 44.19), 0.73, epsilon = 0.005);
        assert_abs_diff_eq!(path_cost(1.559, 18.78), 0.81, epsilon = 0.005);
        assert_abs_diff_eq!(path_cost(1.859, 18.78), 0.96, epsilon = 0.005);
    }

    #[test]
    fn fusion_takes_slower_expert() {
        let text = PathSample { latency: 1.445, tps: 44.19 };
        let image = PathSample { latency: 1.559, tps: 18.78 };
        let f = fusion_from_unimodal(text, image, 0.3);
        assert_abs_diff_eq!(f.latency, 1.859, epsilon = 1e-12);
        assert_eq!(f.tps, 18.78);
        let swapped = fusion_from_unimodal(image, text, 0.3);
        assert_eq!(swapped, f);
    }
}
