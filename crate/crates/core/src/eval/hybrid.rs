use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{encode_from_parts, problem_boundary};
use crate::domain::ProblemSpec;
use crate::error::{Error, Result};
use crate::field::DensityField;
use crate::filter::FilterKernel;
use crate::io;
use crate::net::{predict, Network, Prediction};
use crate::process::{Cutoff, CutoffDetector};
use crate::simp::{run_simp_with, IterationTrace, SimpConfig};

use super::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub tau: f64,
    /// Distance back from the cutoff iterate to the gradient reference.
    pub gap: usize,
    pub threshold: f64,
    pub epsilon: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            gap: 5,
            threshold: 0.5,
            epsilon: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridResult {
    pub seed: u64,
    pub cutoff: Cutoff,
    /// Iterations of the full solve.
    pub iterations: usize,
    pub cutoff_ms: f64,
    pub inference_ms: f64,
    pub full_ms: f64,
    /// `1 - (cutoff_ms + inference_ms) / full_ms`, zero on fallback.
    pub speedup: f64,
    /// The solver never met `tau`; the full solution stands in for the prediction.
    pub fallback: bool,
    pub prediction: Prediction,
    pub ground_truth: DensityField,
    pub report: MetricReport,
}

/// Runs the solver once to convergence, watching for the cutoff on the way;
/// the network predicts from the cutoff iterate and is scored against the
/// same run's final design.
pub fn hybrid_run(problem: &ProblemSpec, simp: &SimpConfig, net: &Network, config: &HybridConfig) -> Result<(HybridResult, IterationTrace)> {
    if config.gap == 0 {
        return Err(Error::Invalid("gradient gap must be at least 1".into()));
    }
    let domain = problem.domain;
    let kernel = FilterKernel::new(&domain, simp.filter_radius * domain.h());
    let mut detector = CutoffDetector::new(&kernel, config.tau);
    let mut hit: Option<(usize, f64)> = None;
    let trace = run_simp_with(problem, simp, |e| {
        if hit.is_none() && detector.push(e.density.values()) {
            hit = Some((e.iteration, e.wall_ms));
        }
    })?;
    let full_ms = trace.entries.last().unwrap().wall_ms;
    let truth = trace.final_density().clone();
    let grid = domain.grid();

    let (cutoff, cutoff_ms, inference_ms, prediction, fallback) = match hit {
        Some((m, at)) => {
            let start = Instant::now();
            let n = m.saturating_sub(config.gap);
            let input = encode_from_parts(grid, trace.density(m).values(), trace.density(n).values(), &problem_boundary(problem))?;
            let p = predict(net, &input, config.threshold, config.epsilon)?;
            (
                Cutoff {
                    iteration: m,
                    reached: true,
                },
                at,
                start.elapsed().as_secs_f64() * 1e3,
                p,
                false,
            )
        }
        None => {
            let binary = truth
                .values()
                .iter()
                .map(|&v| if crate::eval::is_solid(v, config.threshold) { 1.0 } else { 0.0 })
                .collect();
            (
                Cutoff {
                    iteration: trace.last_index(),
                    reached: false,
                },
                full_ms,
                0.0,
                Prediction {
                    density: truth.clone(),
                    binary: DensityField::new(grid, binary)?,
                },
                true,
            )
        }
    };
    let speedup = if fallback { 0.0 } else { 1.0 - (cutoff_ms + inference_ms) / full_ms };
    let report = MetricReport::from_pairs([(prediction.density.values(), truth.values())], config.threshold)?;
    Ok((
        HybridResult {
            seed: problem.seed,
            cutoff,
            iterations: trace.last_index(),
            cutoff_ms,
            inference_ms,
            full_ms,
            speedup,
            fallback,
            prediction,
            ground_truth: truth,
            report,
        },
        trace,
    ))
}

pub const HYBRID_COLUMNS: [&str; 11] = [
    "seed",
    "cutoff_iteration",
    "reached",
    "iterations",
    "cutoff_ms",
    "inference_ms",
    "full_ms",
    "speedup",
    "fallback",
    "binary_accuracy",
    "rms_accuracy",
];

pub fn write_hybrid_csv(path: &Path, rows: &[HybridResult]) -> Result<()> {
    io::write_csv(
        path,
        &HYBRID_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.seed as f64,
                r.cutoff.iteration as f64,
                r.cutoff.reached as u8 as f64,
                r.iterations as f64,
                r.cutoff_ms,
                r.inference_ms,
                r.full_ms,
                r.speedup,
                r.fallback as u8 as f64,
                r.report.binary_accuracy,
                r.report.rms_accuracy,
            ]
        }),
    )
}
