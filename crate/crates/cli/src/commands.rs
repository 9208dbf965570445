use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use topo3d::dataset::{
    augment_dataset, load_manifest, load_split, pair_rng, read_records, problem_boundary, sample_records,
    save_dataset, solve_and_map, split_by_problem, split_seeds, write_records, ChannelGroup, SampleRecord,
    Strategy, AUGMENT_FRACTION, RECORD_VERSION,
};
use topo3d::domain::ProblemSpec;
use topo3d::eval::{
    ablation_study, evaluate, hybrid_run, iteration_grid, strategy_comparison, write_ablation_csv,
    write_hybrid_csv, write_strategy_csv, MetricReport,
};
use topo3d::filter::FilterKernel;
use topo3d::io::{write_fields, write_vtk};
use topo3d::net::{load_checkpoint, predict, save_checkpoint, train_with, Network, CHECKPOINT_VERSION};
use topo3d::process::{binary_accuracy_curve, cutoff_iteration, gradient_norm_curve, spatial_gradient_curve};
use topo3d::sampler::{rng_from_seed, sample_batch, sample_problem};
use topo3d::simp::{run_simp, IterationTrace};

use crate::config::RunConfig;
use crate::{Cli, Command};

/// Shard holding one record per test problem at the evaluation pair.
pub const PROTOCOL_SHARD: &str = "protocol.records";
pub const TEST_TRACES_DIR: &str = "test_traces";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug)]
pub enum Fail {
    Usage(String),
    Config(String),
    Input(String),
    Runtime(String),
}

impl Fail {
    pub fn code(&self) -> u8 {
        match self {
            Fail::Usage(_) => 2,
            Fail::Config(_) => 3,
            Fail::Input(_) => 4,
            Fail::Runtime(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Fail::Usage(_) => "usage",
            Fail::Config(_) => "config",
            Fail::Input(_) => "input",
            Fail::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Fail::Usage(m) | Fail::Config(m) | Fail::Input(m) | Fail::Runtime(m) => m,
        }
    }
}

impl From<topo3d::Error> for Fail {
    fn from(e: topo3d::Error) -> Self {
        Fail::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Runtime(e.to_string())
    }
}

type Res<T> = std::result::Result<T, Fail>;

/// Any failure reading a user-supplied input counts as a missing or unusable input.
fn input<T, E: Display>(r: std::result::Result<T, E>, what: &Path) -> Res<T> {
    r.map_err(|e| Fail::Input(format!("{}: {e}", what.display())))
}

fn required(flag: Option<&PathBuf>, config: Option<&PathBuf>, name: &str) -> Res<PathBuf> {
    flag.or(config)
        .cloned()
        .ok_or_else(|| Fail::Input(format!("no {name} given (flag --{name} or paths.{name})")))
}

fn config_error(e: impl Display) -> Fail {
    Fail::Config(e.to_string())
}

fn load_config(cli: &Cli) -> Res<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => {
            if !p.exists() {
                return Err(Fail::Input(format!("{}: config file not found", p.display())));
            }
            RunConfig::load(p).map_err(config_error)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    match &cli.command {
        Command::MapProcess { tau, threshold, .. } => {
            set(&mut cfg.hybrid.tau, *tau);
            set(&mut cfg.train.threshold, *threshold);
        }
        Command::BuildDataset {
            count,
            strategy,
            per_problem,
            m,
            n,
        } => {
            set(&mut cfg.dataset.problems, *count);
            set(&mut cfg.dataset.records_per_problem, *per_problem);
            set(&mut cfg.evaluation.m, *m);
            set(&mut cfg.evaluation.n, *n);
            if let Some(s) = strategy {
                cfg.dataset.strategy = Strategy::parse(s).map_err(config_error)?;
            }
        }
        Command::Sample { count } => set(&mut cfg.dataset.problems, *count),
        Command::Train {
            channels,
            epochs,
            augment,
            ..
        } => {
            if let Some(c) = channels {
                cfg.channels = c
                    .split(',')
                    .map(|s| ChannelGroup::parse(s.trim()))
                    .collect::<topo3d::Result<_>>()
                    .map_err(config_error)?;
            }
            set(&mut cfg.train.epochs, *epochs);
            cfg.dataset.augment |= *augment;
        }
        Command::Predict { m, n, threshold, .. } => {
            set(&mut cfg.evaluation.m, *m);
            set(&mut cfg.evaluation.n, *n);
            set(&mut cfg.train.threshold, *threshold);
        }
        Command::Evaluate { threshold, .. } | Command::Grid { threshold, .. } => {
            set(&mut cfg.train.threshold, *threshold)
        }
        Command::Ablate { epochs, .. } => set(&mut cfg.train.epochs, *epochs),
        Command::Hybrid {
            count,
            tau,
            gap,
            threshold,
            ..
        } => {
            set(&mut cfg.hybrid.problems, *count);
            set(&mut cfg.hybrid.tau, *tau);
            set(&mut cfg.hybrid.gap, *gap);
            set(&mut cfg.hybrid.threshold, *threshold);
        }
        Command::Solve { .. } => {}
    }
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Sample { .. } => "sample",
        Command::Solve { .. } => "solve",
        Command::MapProcess { .. } => "map-process",
        Command::BuildDataset { .. } => "build-dataset",
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablate { .. } => "ablate",
        Command::Grid { .. } => "grid",
        Command::Hybrid { .. } => "hybrid",
    }
}

/// Config echo, seeds and format versions; no clocks or host details so
/// reruns compare equal.
fn write_provenance(out: &Path, command: &str, cfg: &RunConfig, seeds: &[u64], inputs: &[&Path]) -> Res<()> {
    let doc = json!({
        "tool": "topo3d",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "problem_seeds": seeds,
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "formats": { "records": RECORD_VERSION, "checkpoint": CHECKPOINT_VERSION },
        "config": cfg,
    });
    write_json(&out.join("provenance.json"), &doc)
}

fn write_json(path: &Path, v: &impl Serialize) -> Res<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Fail::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn run(cli: &Cli) -> Res<()> {
    let cfg = load_config(cli)?;
    let out = &cli.common.out;
    fs::create_dir_all(out).map_err(|e| Fail::Runtime(format!("{}: {e}", out.display())))?;
    let threads = cli.common.threads.max(1);
    let name = command_name(&cli.command);
    let p = &cfg.paths;
    match &cli.command {
        Command::Sample { .. } => sample(&cfg, out, name),
        Command::Solve { problem } => solve(&cfg, out, name, problem.as_ref().or(p.problem.as_ref())),
        Command::MapProcess { trace, .. } => map_process(&cfg, out, name, &required(trace.as_ref(), p.trace.as_ref(), "trace")?),
        Command::BuildDataset { .. } => build_dataset(&cfg, out, name, threads),
        Command::Train { dataset, .. } => train_cmd(&cfg, out, name, &required(dataset.as_ref(), p.dataset.as_ref(), "dataset")?),
        Command::Predict { model, trace, .. } => predict_cmd(
            &cfg,
            out,
            name,
            &required(model.as_ref(), p.model.as_ref(), "model")?,
            &required(trace.as_ref(), p.trace.as_ref(), "trace")?,
        ),
        Command::Evaluate { model, dataset, .. } => evaluate_cmd(
            &cfg,
            out,
            name,
            &required(model.as_ref(), p.model.as_ref(), "model")?,
            &required(dataset.as_ref(), p.dataset.as_ref(), "dataset")?,
        ),
        Command::Ablate { dataset, .. } => ablate(&cfg, out, name, &required(dataset.as_ref(), p.dataset.as_ref(), "dataset")?),
        Command::Grid { model, traces, .. } => grid(
            &cfg,
            out,
            name,
            &required(model.as_ref(), p.model.as_ref(), "model")?,
            &required(traces.as_ref(), p.traces.as_ref(), "traces")?,
        ),
        Command::Hybrid { model, .. } => hybrid(&cfg, out, name, &required(model.as_ref(), p.model.as_ref(), "model")?),
    }
}

fn sample(cfg: &RunConfig, out: &Path, name: &str) -> Res<()> {
    let problems = sample_batch(cfg.seed, cfg.dataset.problems, &cfg.domain, &cfg.sampler);
    for p in &problems {
        fs::write(out.join(format!("problem-{}.json", p.seed)), p.to_json()? + "\n")?;
    }
    let seeds: Vec<u64> = problems.iter().map(|p| p.seed).collect();
    write_provenance(out, name, cfg, &seeds, &[])
}

fn solve(cfg: &RunConfig, out: &Path, name: &str, problem: Option<&PathBuf>) -> Res<()> {
    let spec = match problem {
        Some(path) => input(ProblemSpec::from_json(&input(fs::read_to_string(path), path)?), path)?,
        None => sample_problem(cfg.seed, &cfg.domain, &cfg.sampler),
    };
    let trace = run_simp(&spec, &cfg.simp)?;
    trace.save(out)?;
    let d = spec.domain;
    write_vtk(&out.join("final.vtk"), d.grid(), d.h(), "density", trace.final_density().values())?;
    let inputs: Vec<&Path> = problem.map(|p| p.as_path()).into_iter().collect();
    write_provenance(out, name, cfg, &[spec.seed], &inputs)
}

fn load_trace(dir: &Path) -> Res<IterationTrace> {
    input(IterationTrace::load(dir), dir)
}

fn kernel_for(cfg: &RunConfig, trace: &IterationTrace) -> FilterKernel {
    let d = trace.problem.domain;
    FilterKernel::new(&d, cfg.simp.filter_radius * d.h())
}

fn map_process(cfg: &RunConfig, out: &Path, name: &str, dir: &Path) -> Res<()> {
    let trace = load_trace(dir)?;
    let kernel = kernel_for(cfg, &trace);
    binary_accuracy_curve(&trace, cfg.train.threshold).write_csv(&out.join("binary_accuracy.csv"))?;
    gradient_norm_curve(&trace).write_csv(&out.join("gradient_norm.csv"))?;
    spatial_gradient_curve(&trace, &kernel).write_csv(&out.join("spatial_gradient.csv"))?;
    let c = cutoff_iteration(&trace, &kernel, cfg.hybrid.tau);
    write_json(
        &out.join("cutoff.json"),
        &json!({
            "tau": cfg.hybrid.tau,
            "cutoff_iteration": c.iteration,
            "reached": c.reached,
            "iterations": trace.last_index(),
            "fraction": c.iteration as f64 / trace.last_index().max(1) as f64,
        }),
    )?;
    write_provenance(out, name, cfg, &[trace.problem.seed], &[dir])
}

fn build_dataset(cfg: &RunConfig, out: &Path, name: &str, threads: usize) -> Res<()> {
    let ds = &cfg.dataset;
    let (m, n) = (cfg.evaluation.m, cfg.evaluation.n);
    let problems = sample_batch(cfg.seed, ds.problems, &cfg.domain, &cfg.sampler);
    let seeds: Vec<u64> = problems.iter().map(|p| p.seed).collect();
    let part = split_seeds(&seeds, ds.split_seed)?;
    let trace_dir = out.join(TEST_TRACES_DIR);
    let per_problem = solve_and_map(&problems, &cfg.simp, threads, |trace| {
        let seed = trace.problem.seed;
        let records = sample_records(&trace, ds.strategy, ds.records_per_problem, &mut pair_rng(cfg.seed, seed))?;
        let is_test = part[&seed] == 2;
        if is_test && ds.keep_test_traces {
            trace.save(&trace_dir.join(seed.to_string()))?;
        }
        let protocol = if is_test && trace.last_index() >= m {
            Some(SampleRecord::from_trace(&trace, m, n, &problem_boundary(&trace.problem))?)
        } else {
            None
        };
        eprintln!("solved problem {seed}: {} iterations", trace.last_index());
        Ok((records, protocol))
    })?;
    let mut records = Vec::new();
    let mut protocol = Vec::new();
    for (r, p) in per_problem {
        records.extend(r);
        protocol.extend(p);
    }
    let manifest = split_by_problem(&records, ds.strategy, ds.split_seed)?;
    save_dataset(out, &records, &manifest)?;
    write_records(&out.join(PROTOCOL_SHARD), &protocol)?;
    write_provenance(out, name, cfg, &seeds, &[])
}

fn load_records(dir: &Path, split: &str) -> Res<Vec<SampleRecord>> {
    input(load_manifest(dir), dir)?;
    input(load_split(dir, split), dir)
}

/// Test-protocol records when the dataset has them, else its test split.
fn test_set(dir: &Path) -> Res<Vec<SampleRecord>> {
    let protocol = dir.join(PROTOCOL_SHARD);
    let records = if protocol.exists() {
        input(read_records(&protocol), &protocol)?
    } else {
        load_records(dir, "test")?
    };
    if records.is_empty() {
        return Err(Fail::Input(format!("{}: no test records", dir.display())));
    }
    Ok(records)
}

fn training_set(cfg: &RunConfig, dir: &Path) -> Res<Vec<SampleRecord>> {
    let records = load_records(dir, "train")?;
    if records.is_empty() {
        return Err(Fail::Input(format!("{}: empty training split", dir.display())));
    }
    Ok(if cfg.dataset.augment {
        augment_dataset(&records, AUGMENT_FRACTION, &mut rng_from_seed(cfg.train.seed))?
    } else {
        records
    })
}

fn train_cmd(cfg: &RunConfig, out: &Path, name: &str, dir: &Path) -> Res<()> {
    let records = training_set(cfg, dir)?;
    let net_config = cfg.network()?;
    let (net, telemetry) = train_with(&records, &net_config, &cfg.train, |e, t| {
        eprintln!(
            "epoch {}: loss {:.5} binary {:.4} rms {:.4}",
            e + 1,
            t.epoch_loss[e],
            t.epoch_binary_accuracy[e],
            t.epoch_rms_accuracy[e]
        );
    })?;
    save_checkpoint(&out.join(MODEL_FILE), &net)?;
    telemetry.write_epoch_csv(&out.join("epochs.csv"))?;
    telemetry.write_step_csv(&out.join("steps.csv"))?;
    let first = topo3d::net::Telemetry {
        step_loss: telemetry.step_loss[..records.len()].to_vec(),
        ..Default::default()
    };
    first.write_step_csv(&out.join("first_epoch_steps.csv"))?;
    let validation = load_records(dir, "validation")?;
    if !validation.is_empty() {
        let r = evaluate(&net, &validation, cfg.train.threshold, cfg.train.epsilon)?;
        write_json(&out.join("validation.json"), &r)?;
    }
    let seeds = unique_seeds(&records);
    write_provenance(out, name, cfg, &seeds, &[dir])
}

fn unique_seeds(records: &[SampleRecord]) -> Vec<u64> {
    let mut s: Vec<u64> = records.iter().map(|r| r.seed).collect();
    s.sort_unstable();
    s.dedup();
    s
}

fn load_model(path: &Path, cfg: &RunConfig) -> Res<Network> {
    let net = input(load_checkpoint(path), path)?;
    input(net.config.validate(cfg.domain.grid().dims()), path)?;
    Ok(net)
}

fn predict_cmd(cfg: &RunConfig, out: &Path, name: &str, model: &Path, dir: &Path) -> Res<()> {
    let net = load_model(model, cfg)?;
    let trace = load_trace(dir)?;
    let (m, n) = (cfg.evaluation.m, cfg.evaluation.n);
    if trace.last_index() < m {
        return Err(Fail::Input(format!("{}: trace ends at {} before m={m}", dir.display(), trace.last_index())));
    }
    let record = SampleRecord::from_trace(&trace, m, n, &problem_boundary(&trace.problem))?;
    let p = predict(&net, &record.input, cfg.train.threshold, cfg.train.epsilon)?;
    let truth = trace.final_density();
    let d = trace.problem.domain;
    write_fields(
        &out.join("prediction.fields"),
        d.grid(),
        &[p.density.values(), p.binary.values(), truth.values()],
    )?;
    write_vtk(&out.join("prediction.vtk"), d.grid(), d.h(), "density", p.density.values())?;
    write_vtk(&out.join("binary.vtk"), d.grid(), d.h(), "solid", p.binary.values())?;
    let report = MetricReport::from_pairs([(p.density.values(), truth.values())], cfg.train.threshold)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_provenance(out, name, cfg, &[trace.problem.seed], &[model, dir])
}

fn evaluate_cmd(cfg: &RunConfig, out: &Path, name: &str, model: &Path, dir: &Path) -> Res<()> {
    let net = load_model(model, cfg)?;
    let test = test_set(dir)?;
    let report = evaluate(&net, &test, cfg.train.threshold, cfg.train.epsilon)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_provenance(out, name, cfg, &unique_seeds(&test), &[model, dir])
}

fn ablate(cfg: &RunConfig, out: &Path, name: &str, dir: &Path) -> Res<()> {
    let test = test_set(dir)?;
    let train_set = load_records(dir, "train")?;
    let rows = ablation_study(&train_set, &test, &cfg.evaluation.subsets, &cfg.train, cfg.dataset.augment)?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    let mut dirs = vec![dir.to_path_buf()];
    dirs.extend(cfg.evaluation.compare.iter().cloned());
    let mut strategies = Vec::new();
    for d in &dirs {
        strategies.push(input(load_manifest(d), d)?.strategy);
    }
    let net_config = cfg.network()?;
    let mut next = dirs.iter();
    let results = strategy_comparison(
        &strategies,
        |_| {
            let d = next.next().expect("one directory per strategy");
            load_split(d, "train")
        },
        &test,
        &net_config,
        &cfg.train,
    )?;
    write_strategy_csv(&out.join("strategies.csv"), &results)?;
    let inputs: Vec<&Path> = dirs.iter().map(|d| d.as_path()).collect();
    write_provenance(out, name, cfg, &unique_seeds(&test), &inputs)
}

/// Every subdirectory holding a saved trace, in name order.
fn load_traces(dir: &Path) -> Res<Vec<IterationTrace>> {
    let mut subdirs: Vec<PathBuf> = input(fs::read_dir(dir), dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let traces = subdirs.iter().map(|d| load_trace(d)).collect::<Res<Vec<_>>>()?;
    if traces.is_empty() {
        return Err(Fail::Input(format!("{}: no traces", dir.display())));
    }
    Ok(traces)
}

fn grid(cfg: &RunConfig, out: &Path, name: &str, model: &Path, dir: &Path) -> Res<()> {
    let net = load_model(model, cfg)?;
    let traces = load_traces(dir)?;
    let e = &cfg.evaluation;
    let g = iteration_grid(&traces, &net, &e.grid_m, &e.grid_n, cfg.train.threshold, cfg.train.epsilon)?;
    g.write_csv(&out.join("grid_binary.csv"), false)?;
    g.write_csv(&out.join("grid_rms.csv"), true)?;
    let inversions: Vec<usize> = (0..g.n_list.len()).map(|j| g.inversions(j)).collect();
    write_json(&out.join("grid.json"), &json!({ "samples": g.samples, "inversions": inversions }))?;
    let seeds: Vec<u64> = traces.iter().map(|t| t.problem.seed).collect();
    write_provenance(out, name, cfg, &seeds, &[model, dir])
}

fn hybrid(cfg: &RunConfig, out: &Path, name: &str, model: &Path) -> Res<()> {
    let net = load_model(model, cfg)?;
    let problems = sample_batch(cfg.seed, cfg.hybrid.problems, &cfg.domain, &cfg.sampler);
    let hc = cfg.hybrid.run();
    let mut rows = Vec::new();
    for p in &problems {
        let (r, _) = hybrid_run(p, &cfg.simp, &net, &hc)?;
        eprintln!(
            "problem {}: cutoff {} of {} speedup {:.3} binary {:.4}",
            p.seed, r.cutoff.iteration, r.iterations, r.speedup, r.report.binary_accuracy
        );
        rows.push(r);
    }
    write_hybrid_csv(&out.join("hybrid.csv"), &rows)?;
    let k = rows.len() as f64;
    let mean = |f: &dyn Fn(&topo3d::eval::HybridResult) -> f64| rows.iter().map(f).sum::<f64>() / k;
    write_json(
        &out.join("hybrid_summary.json"),
        &json!({
            "problems": rows.len(),
            "fallbacks": rows.iter().filter(|r| r.fallback).count(),
            "mean_speedup": mean(&|r| r.speedup),
            "mean_binary_accuracy": mean(&|r| r.report.binary_accuracy),
            "mean_rms_accuracy": mean(&|r| r.report.rms_accuracy),
            "mean_cutoff_fraction": mean(&|r| r.cutoff.iteration as f64 / r.iterations.max(1) as f64),
        }),
    )?;
    let seeds: Vec<u64> = problems.iter().map(|p| p.seed).collect();
    write_provenance(out, name, cfg, &seeds, &[model])
}
