use std::path::Path;

use crate::dataset::{
    augment_dataset, channel_indices, encode_from_parts, problem_boundary, ChannelGroup, SampleRecord, Strategy,
    AUGMENT_FRACTION,
};
use crate::error::{Error, Result};
use crate::io;
use crate::net::{train, Network, NetworkConfig, Telemetry, TrainConfig};
use crate::sampler::rng_from_seed;
use crate::simp::IterationTrace;

use super::MetricReport;

/// Runs the network over records and averages the metrics against their targets.
pub fn evaluate(net: &Network, records: &[SampleRecord], threshold: f64, eps: f64) -> Result<MetricReport> {
    let preds = records
        .iter()
        .map(|r| net.forward(&r.input.select(&net.config.channels), r.grid().dims(), eps))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<f64>> = records.iter().map(|r| r.target_values()).collect();
    MetricReport::from_pairs(
        preds.iter().zip(&targets).map(|(p, t)| (p.as_slice(), t.as_slice())),
        threshold,
    )
}

/// One record per trace at the fixed evaluation pair, for traces long enough.
pub fn test_records(traces: &[IterationTrace], m: usize, n: usize) -> Result<Vec<SampleRecord>> {
    traces
        .iter()
        .filter(|t| t.last_index() >= m)
        .map(|t| SampleRecord::from_trace(t, m, n, &problem_boundary(&t.problem)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub groups: Vec<ChannelGroup>,
    pub augmented: bool,
    pub report: MetricReport,
    pub telemetry: Telemetry,
}

/// One network per channel subset, all scored on the same test records.
pub fn ablation_study(
    train_set: &[SampleRecord],
    test_set: &[SampleRecord],
    subsets: &[Vec<ChannelGroup>],
    config: &TrainConfig,
    augment: bool,
) -> Result<Vec<AblationRow>> {
    let data = if augment {
        augment_dataset(train_set, AUGMENT_FRACTION, &mut rng_from_seed(config.seed))?
    } else {
        train_set.to_vec()
    };
    subsets
        .iter()
        .map(|groups| {
            let net_config = NetworkConfig::reference(channel_indices(groups)?);
            let (net, telemetry) = train(&data, &net_config, config)?;
            Ok(AblationRow {
                groups: groups.clone(),
                augmented: augment,
                report: evaluate(&net, test_set, config.threshold, config.epsilon)?,
                telemetry,
            })
        })
        .collect()
}

pub fn subset_label(groups: &[ChannelGroup]) -> String {
    groups
        .iter()
        .map(|g| match g {
            ChannelGroup::Density => "density",
            ChannelGroup::Gradient => "gradient",
            ChannelGroup::Boundary => "boundary",
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// `density,gradient,boundary,augmented,binary_accuracy,rms_accuracy,samples` with 0/1 flags.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    io::write_csv(
        path,
        &["density", "gradient", "boundary", "augmented", "binary_accuracy", "rms_accuracy", "samples"],
        rows.iter().map(|r| {
            let has = |g| if r.groups.contains(&g) { 1.0 } else { 0.0 };
            vec![
                has(ChannelGroup::Density),
                has(ChannelGroup::Gradient),
                has(ChannelGroup::Boundary),
                if r.augmented { 1.0 } else { 0.0 },
                r.report.binary_accuracy,
                r.report.rms_accuracy,
                r.report.samples as f64,
            ]
        }),
    )
}

/// Metrics for every `(m, n)` cell; `None` on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationGrid {
    pub m_list: Vec<usize>,
    pub n_list: Vec<usize>,
    pub binary: Vec<Vec<Option<f64>>>,
    pub rms: Vec<Vec<Option<f64>>>,
    pub samples: usize,
}

impl IterationGrid {
    /// Number of decreases walking down the m axis in column `j`.
    pub fn inversions(&self, j: usize) -> usize {
        let col: Vec<f64> = self.binary.iter().filter_map(|row| row[j]).collect();
        col.windows(2).filter(|w| w[1] < w[0]).count()
    }

    /// Rows per m, one column per n; absent cells are written as NaN.
    pub fn write_csv(&self, path: &Path, rms: bool) -> Result<()> {
        let cells = if rms { &self.rms } else { &self.binary };
        let names: Vec<String> = std::iter::once("m".to_string())
            .chain(self.n_list.iter().map(|n| format!("n{n}")))
            .collect();
        let header: Vec<&str> = names.iter().map(String::as_str).collect();
        io::write_csv(
            path,
            &header,
            self.m_list.iter().zip(cells).map(|(&m, row)| {
                std::iter::once(m as f64)
                    .chain(row.iter().map(|c| c.unwrap_or(f64::NAN)))
                    .collect()
            }),
        )
    }
}

/// Evaluates the network with inputs encoded at each `(m, n)`; the gradient
/// channel may look forward (`n > m`). Traces shorter than the largest
/// requested iteration are skipped.
pub fn iteration_grid(
    traces: &[IterationTrace],
    net: &Network,
    m_list: &[usize],
    n_list: &[usize],
    threshold: f64,
    eps: f64,
) -> Result<IterationGrid> {
    let reach = m_list.iter().chain(n_list).copied().max().unwrap_or(0);
    let usable: Vec<&IterationTrace> = traces.iter().filter(|t| t.last_index() >= reach).collect();
    if usable.is_empty() {
        return Err(Error::Invalid(format!("no trace reaches iteration {reach}")));
    }
    let boundaries: Vec<Vec<f32>> = usable.iter().map(|t| problem_boundary(&t.problem)).collect();
    let targets: Vec<Vec<f64>> = usable.iter().map(|t| t.final_density().values().to_vec()).collect();
    let mut binary = vec![vec![None; n_list.len()]; m_list.len()];
    let mut rms = binary.clone();
    for (i, &m) in m_list.iter().enumerate() {
        for (j, &n) in n_list.iter().enumerate() {
            if m == n {
                continue;
            }
            let preds = usable
                .iter()
                .zip(&boundaries)
                .map(|(t, b)| {
                    let grid = t.problem.domain.grid();
                    let input = encode_from_parts(grid, t.density(m).values(), t.density(n).values(), b)?;
                    net.forward(&input.select(&net.config.channels), grid.dims(), eps)
                })
                .collect::<Result<Vec<_>>>()?;
            let r = MetricReport::from_pairs(
                preds.iter().zip(&targets).map(|(p, t)| (p.as_slice(), t.as_slice())),
                threshold,
            )?;
            binary[i][j] = Some(r.binary_accuracy);
            rms[i][j] = Some(r.rms_accuracy);
        }
    }
    Ok(IterationGrid {
        m_list: m_list.to_vec(),
        n_list: n_list.to_vec(),
        binary,
        rms,
        samples: usable.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub report: MetricReport,
    pub telemetry: Telemetry,
}

/// Trains one network per strategy on `build(strategy)` and scores all on `test_set`.
pub fn strategy_comparison(
    strategies: &[Strategy],
    mut build: impl FnMut(Strategy) -> Result<Vec<SampleRecord>>,
    test_set: &[SampleRecord],
    net_config: &NetworkConfig,
    config: &TrainConfig,
) -> Result<Vec<StrategyResult>> {
    strategies
        .iter()
        .map(|&strategy| {
            let data = build(strategy)?;
            let (net, telemetry) = train(&data, net_config, config)?;
            Ok(StrategyResult {
                strategy,
                report: evaluate(&net, test_set, config.threshold, config.epsilon)?,
                telemetry,
            })
        })
        .collect()
}

/// `strategy,binary_accuracy,rms_accuracy,samples`; strategy as its index in [`Strategy::ALL`].
pub fn write_strategy_csv(path: &Path, rows: &[StrategyResult]) -> Result<()> {
    io::write_csv(
        path,
        &["strategy", "binary_accuracy", "rms_accuracy", "samples"],
        rows.iter().map(|r| {
            let idx = Strategy::ALL.iter().position(|s| *s == r.strategy).unwrap();
            vec![idx as f64, r.report.binary_accuracy, r.report.rms_accuracy, r.report.samples as f64]
        }),
    )
}
