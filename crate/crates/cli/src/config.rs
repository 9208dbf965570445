use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topo3d::dataset::{channel_indices, ChannelGroup, Strategy};
use topo3d::domain::DesignDomain;
use topo3d::eval::HybridConfig;
use topo3d::net::{NetworkConfig, TrainConfig};
use topo3d::sampler::SamplerConfig;
use topo3d::simp::SimpConfig;
use topo3d::{Error, Result};

/// Everything a run depends on. Missing keys take defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub domain: DesignDomain,
    pub sampler: SamplerConfig,
    pub simp: SimpConfig,
    pub dataset: DatasetSettings,
    pub train: TrainConfig,
    /// Input groups fed to the network.
    pub channels: Vec<ChannelGroup>,
    pub hybrid: HybridSettings,
    pub evaluation: EvalSettings,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSettings {
    /// Problems solved by `build-dataset` and `sample`.
    pub problems: usize,
    pub records_per_problem: usize,
    pub strategy: Strategy,
    pub split_seed: u64,
    /// Keep the converged traces of test problems for `grid`.
    pub keep_test_traces: bool,
    /// Add rotated copies of part of the training split.
    pub augment: bool,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            problems: 24,
            records_per_problem: 4,
            strategy: Strategy::Poisson30,
            split_seed: 0,
            keep_test_traces: true,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridSettings {
    pub tau: f64,
    pub gap: usize,
    pub threshold: f64,
    pub epsilon: f64,
    /// Problems run by `hybrid`, seeded from the run seed upwards.
    pub problems: usize,
}

impl Default for HybridSettings {
    fn default() -> Self {
        let d = HybridConfig::default();
        Self {
            tau: d.tau,
            gap: d.gap,
            threshold: d.threshold,
            epsilon: d.epsilon,
            problems: 20,
        }
    }
}

impl HybridSettings {
    pub fn run(&self) -> HybridConfig {
        HybridConfig {
            tau: self.tau,
            gap: self.gap,
            threshold: self.threshold,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Test-protocol input iteration and gradient reference.
    pub m: usize,
    pub n: usize,
    pub grid_m: Vec<usize>,
    pub grid_n: Vec<usize>,
    pub subsets: Vec<Vec<ChannelGroup>>,
    /// Extra dataset directories whose training splits `ablate` compares.
    pub compare: Vec<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        use ChannelGroup::*;
        Self {
            m: 20,
            n: 15,
            grid_m: vec![5, 10, 15, 20, 25, 30, 35],
            grid_n: vec![5, 10, 15, 20, 25, 30, 35],
            subsets: vec![
                vec![Density],
                vec![Gradient],
                vec![Boundary],
                vec![Density, Gradient],
                vec![Density, Boundary],
                vec![Gradient, Boundary],
                vec![Density, Gradient, Boundary],
            ],
            compare: Vec::new(),
        }
    }
}

/// Inputs; a flag of the same name overrides each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub problem: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            domain: DesignDomain::reference(),
            sampler: SamplerConfig::default(),
            simp: SimpConfig::default(),
            dataset: DatasetSettings::default(),
            train: TrainConfig::default(),
            channels: vec![ChannelGroup::Density, ChannelGroup::Gradient, ChannelGroup::Boundary],
            hybrid: HybridSettings::default(),
            evaluation: EvalSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        Ok(NetworkConfig::reference(channel_indices(&self.channels)?))
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.simp.validate()?;
        self.train.validate()?;
        self.network()?.validate(self.domain.grid().dims())?;
        let d = &self.dataset;
        if d.problems == 0 || d.records_per_problem == 0 {
            return Err(Error::Invalid("dataset needs at least one problem and one record per problem".into()));
        }
        let h = &self.hybrid;
        if h.gap == 0 || !(h.tau > 0.0) || self.hybrid.problems == 0 {
            return Err(Error::Invalid("hybrid needs gap >= 1, tau > 0 and at least one problem".into()));
        }
        let e = &self.evaluation;
        if e.n >= e.m {
            return Err(Error::Invalid(format!("evaluation pair needs n < m, got m={} n={}", e.m, e.n)));
        }
        if e.grid_m.is_empty() || e.grid_n.is_empty() {
            return Err(Error::Invalid("iteration grid lists must not be empty".into()));
        }
        for s in &e.subsets {
            channel_indices(s)?;
        }
        for t in [self.train.threshold, h.threshold] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Invalid(format!("threshold {t} outside (0, 1)")));
            }
        }
        Ok(())
    }
}
