//! Iteration-progress instrumentation of SIMP traces.
//!
//! The cutoff detector watches the Frobenius norm of the change in the
//! spatial map `x - filter(x)` between consecutive iterates; once it drops to
//! `tau` the structure is considered resolved and can be handed to the
//! surrogate.

use std::path::Path;

use crate::error::Result;
use crate::eval::binary_accuracy_values;
use crate::field::frobenius_diff;
use crate::filter::FilterKernel;
use crate::io;
use crate::simp::IterationTrace;

/// Per-iteration values against normalised progress `t / T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressCurve {
    pub progress: Vec<f64>,
    pub values: Vec<f64>,
}

impl ProgressCurve {
    fn from_values(values: Vec<f64>) -> Self {
        let last = (values.len().max(2) - 1) as f64;
        let progress = (0..values.len()).map(|t| t as f64 / last).collect();
        Self { progress, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy scaled so the largest value is 1, for plotting.
    pub fn normalized(&self) -> Self {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        Self {
            progress: self.progress.clone(),
            values: self.values.iter().map(|v| v * scale).collect(),
        }
    }

    /// First iteration whose value reaches `level`, if any.
    pub fn first_at_least(&self, level: f64) -> Option<usize> {
        self.values.iter().position(|&v| v >= level)
    }

    /// `progress,iteration,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_csv(
            path,
            &["progress", "iteration", "value"],
            self.progress
                .iter()
                .zip(&self.values)
                .enumerate()
                .map(|(t, (p, v))| vec![*p, t as f64, *v]),
        )
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (_, rows) = io::read_csv(path)?;
        Ok(Self {
            progress: rows.iter().map(|r| r[0]).collect(),
            values: rows.iter().map(|r| r[2]).collect(),
        })
    }
}

/// Binary accuracy of every iterate against the final one.
pub fn binary_accuracy_curve(trace: &IterationTrace, threshold: f64) -> ProgressCurve {
    let last = trace.final_density().values();
    ProgressCurve::from_values(
        trace
            .entries
            .iter()
            .map(|e| binary_accuracy_values(e.density.values(), last, threshold))
            .collect(),
    )
}

/// Lag-one differences of `series` with the first value copied from the second.
fn lagged_norms(series: &[Vec<f64>]) -> Vec<f64> {
    let mut values: Vec<f64> = series.windows(2).map(|w| frobenius_diff(&w[1], &w[0])).collect();
    let first = values.first().copied().unwrap_or(0.0);
    values.insert(0, first);
    values
}

/// `||x(t) - x(t-1)||_F` per iteration.
pub fn gradient_norm_curve(trace: &IterationTrace) -> ProgressCurve {
    let fields: Vec<Vec<f64>> = trace.entries.iter().map(|e| e.density.values().to_vec()).collect();
    ProgressCurve::from_values(lagged_norms(&fields))
}

/// Local deviation `x - filter(x)`.
pub fn spatial_map(x: &[f64], kernel: &FilterKernel) -> Vec<f64> {
    x.iter().zip(kernel.apply(x)).map(|(a, b)| a - b).collect()
}

/// `||s(t) - s(t-1)||_F` of the spatial maps per iteration.
pub fn spatial_gradient_curve(trace: &IterationTrace, kernel: &FilterKernel) -> ProgressCurve {
    let maps: Vec<Vec<f64>> = trace
        .entries
        .iter()
        .map(|e| spatial_map(e.density.values(), kernel))
        .collect();
    ProgressCurve::from_values(lagged_norms(&maps))
}

/// Where the solver hands over to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cutoff {
    pub iteration: usize,
    /// `false` when the threshold was never met and `iteration` is the last one.
    pub reached: bool,
}

/// Online form of [`cutoff_iteration`]: feed iterates in order.
#[derive(Clone, Debug)]
pub struct CutoffDetector<'a> {
    kernel: &'a FilterKernel,
    tau: f64,
    previous: Option<Vec<f64>>,
    seen: usize,
    last_norm: Option<f64>,
}

impl<'a> CutoffDetector<'a> {
    pub fn new(kernel: &'a FilterKernel, tau: f64) -> Self {
        Self {
            kernel,
            tau,
            previous: None,
            seen: 0,
            last_norm: None,
        }
    }

    /// Pushes iterate `t = seen`; returns `true` if it triggers the cutoff.
    pub fn push(&mut self, x: &[f64]) -> bool {
        let map = spatial_map(x, self.kernel);
        let hit = match &self.previous {
            Some(prev) => {
                let norm = frobenius_diff(&map, prev);
                self.last_norm = Some(norm);
                norm <= self.tau
            }
            None => false,
        };
        self.previous = Some(map);
        self.seen += 1;
        hit
    }

    pub fn last_norm(&self) -> Option<f64> {
        self.last_norm
    }
}

/// Smallest `t >= 1` whose spatial-map change is at most `tau`, or the last
/// iteration flagged as not reached.
pub fn cutoff_iteration(trace: &IterationTrace, kernel: &FilterKernel, tau: f64) -> Cutoff {
    let mut detector = CutoffDetector::new(kernel, tau);
    for (t, e) in trace.entries.iter().enumerate() {
        if detector.push(e.density.values()) {
            return Cutoff {
                iteration: t,
                reached: true,
            };
        }
    }
    Cutoff {
        iteration: trace.last_index(),
        reached: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, BcCase, DesignDomain, Face, Load, ProblemSpec};
    use crate::field::DensityField;
    use crate::simp::TraceEntry;

    pub(crate) fn synthetic_trace(domain: DesignDomain, fields: Vec<Vec<f64>>) -> IterationTrace {
        let problem = ProblemSpec {
            domain,
            volume_fraction: 0.3,
            loads: vec![Load {
                face: Face::XMax,
                anchor: [0.5, 0.5],
                direction: [0.0, 0.0, 1.0],
                magnitude: -1.0,
            }],
            bc_case: BcCase::new(1).unwrap(),
            seed: 0,
        };
        let entries = fields
            .into_iter()
            .enumerate()
            .map(|(t, v)| TraceEntry {
                iteration: t,
                density: DensityField::new(domain.grid(), v).unwrap(),
                compliance: 1.0,
                max_change: 0.0,
                wall_ms: t as f64,
                solver_iterations: 0,
            })
            .collect();
        IterationTrace {
            problem,
            entries,
            converged: true,
        }
    }

    fn line() -> DesignDomain {
        build_domain(3, 1, 1, 3.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn spatial_map_hand_example() {
        let d = line();
        let k = FilterKernel::new(&d, 1.5 * d.h());
        let x = [1.0, 0.0, 0.0];
        let s = spatial_map(&x, &k);
        assert!((s[0] - 0.25).abs() < 1e-15);
        let filtered = k.apply(&x);
        for i in 0..3 {
            assert!((s[i] + filtered[i] - x[i]).abs() < 1e-12);
        }
        assert!(spatial_map(&[0.4; 3], &k).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_norm_examples() {
        let d = line();
        let t = synthetic_trace(d, vec![vec![0.5; 3], vec![0.5; 3], vec![0.5, 0.7, 0.5]]);
        let c = gradient_norm_curve(&t);
        assert_eq!(c.values.len(), 3);
        assert_eq!(c.values[1], 0.0);
        assert_eq!(c.values[0], c.values[1]);
        assert!((c.values[2] - 0.2).abs() < 1e-12);
        assert_eq!(c.progress, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn accuracy_curve_ends_at_one() {
        let d = line();
        let t = synthetic_trace(d, vec![vec![0.3; 3], vec![0.6, 0.4, 0.2], vec![0.9, 0.1, 0.0]]);
        let c = binary_accuracy_curve(&t, 0.5);
        assert_eq!(c.len(), 3);
        assert_eq!(*c.values.last().unwrap(), 1.0);
        assert!((c.values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(c.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_fields_cut_at_one() {
        let d = line();
        let k = FilterKernel::new(&d, 1.5 * d.h());
        let t = synthetic_trace(d, vec![vec![0.2, 0.5, 0.9]; 4]);
        assert_eq!(
            cutoff_iteration(&t, &k, 0.05),
            Cutoff {
                iteration: 1,
                reached: true
            }
        );
    }

    #[test]
    fn zero_tau_on_changing_maps_falls_back() {
        let d = line();
        let k = FilterKernel::new(&d, 1.5 * d.h());
        let fields = (0..6).map(|t| vec![0.1 * t as f64, 0.0, 0.0]).collect();
        let t = synthetic_trace(d, fields);
        assert_eq!(
            cutoff_iteration(&t, &k, 0.0),
            Cutoff {
                iteration: 5,
                reached: false
            }
        );
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = line();
        let t = synthetic_trace(d, vec![vec![0.1, 0.2, 0.3], vec![0.15, 0.25, 0.31], vec![1.0 / 3.0, 0.2, 0.3]]);
        let c = gradient_norm_curve(&t);
        let p = dir.path().join("c.csv");
        c.write_csv(&p).unwrap();
        assert_eq!(ProgressCurve::read_csv(&p).unwrap(), c);
    }
}
