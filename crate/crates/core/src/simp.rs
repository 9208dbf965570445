//! SIMP compliance minimisation with a density filter and optimality-criteria
//! updates.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{assemble_forces, fixed_dofs_for_case, ProblemSpec};
use crate::error::{Error, Result};
use crate::fea::{Fea, MaterialModel};
use crate::field::DensityField;
use crate::filter::{density_filter, FilterKernel};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimpConfig {
    pub material: MaterialModel,
    /// Filter radius in element edge lengths.
    pub filter_radius: f64,
    pub move_limit: f64,
    /// OC damping exponent.
    pub damping: f64,
    /// Stop once the largest change of the physical densities falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Relative residual target of each equilibrium solve.
    pub solver_tolerance: f64,
}

impl Default for SimpConfig {
    fn default() -> Self {
        Self {
            material: MaterialModel::default(),
            filter_radius: 1.5,
            move_limit: 0.2,
            damping: 0.5,
            tolerance: 0.006,
            max_iterations: 200,
            solver_tolerance: 1e-4,
        }
    }
}

impl SimpConfig {
    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        if !(self.filter_radius > 0.0) {
            return Err(Error::Invalid("filter radius must be positive".into()));
        }
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            return Err(Error::Invalid("move limit must lie in (0, 1]".into()));
        }
        if !(self.damping > 0.0) || !(self.tolerance > 0.0) || !(self.solver_tolerance > 0.0) {
            return Err(Error::Invalid("damping and tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("iteration cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// One recorded iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Physical (filtered) densities of this iterate.
    pub density: DensityField,
    /// Compliance of this iterate.
    pub compliance: f64,
    /// Largest physical density change from the previous entry, zero for the
    /// initial field.
    pub max_change: f64,
    /// Wall time since the start of the run when the entry was recorded.
    pub wall_ms: f64,
    /// Conjugate-gradient iterations spent on this iterate's solve.
    pub solver_iterations: usize,
}

/// Full optimisation history; entry 0 is the uniform start.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub problem: ProblemSpec,
    pub entries: Vec<TraceEntry>,
    /// Whether the change tolerance was met before the iteration cap.
    pub converged: bool,
}

impl IterationTrace {
    /// Index `T` of the last iterate.
    pub fn last_index(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn final_density(&self) -> &DensityField {
        &self.entries[self.last_index()].density
    }

    pub fn density(&self, t: usize) -> &DensityField {
        &self.entries[t].density
    }

    /// `iteration, compliance, max_change, wall_ms` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_csv(
            path,
            &["iteration", "compliance", "max_change", "wall_ms", "solver_iterations"],
            self.entries.iter().map(|e| {
                vec![
                    e.iteration as f64,
                    e.compliance,
                    e.max_change,
                    e.wall_ms,
                    e.solver_iterations as f64,
                ]
            }),
        )
    }

    /// Writes `problem.json`, `trace.fields` and `compliance.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("problem.json"), self.problem.to_json()?)?;
        let fields: Vec<&[f64]> = self.entries.iter().map(|e| e.density.values()).collect();
        io::write_fields(&dir.join("trace.fields"), self.problem.domain.grid(), &fields)?;
        self.write_csv(&dir.join("compliance.csv"))?;
        std::fs::write(
            dir.join("status.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "converged": self.converged,
                "last_index": self.last_index(),
            }))?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let problem = ProblemSpec::from_json(&std::fs::read_to_string(dir.join("problem.json"))?)?;
        let (grid, fields) = io::read_fields(&dir.join("trace.fields"))?;
        if grid != problem.domain.grid() {
            return Err(Error::Shape {
                expected: problem.domain.grid().to_string(),
                got: grid.to_string(),
            });
        }
        let (_, rows) = io::read_csv(&dir.join("compliance.csv"))?;
        if rows.len() != fields.len() || fields.is_empty() {
            return Err(Error::Truncated(format!(
                "{} density fields but {} compliance rows",
                fields.len(),
                rows.len()
            )));
        }
        let status: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("status.json"))?)?;
        let entries = fields
            .into_iter()
            .zip(rows)
            .enumerate()
            .map(|(t, (values, row))| {
                Ok(TraceEntry {
                    iteration: t,
                    density: DensityField::new(grid, values)?,
                    compliance: row[1],
                    max_change: row[2],
                    wall_ms: row[3],
                    solver_iterations: row.get(4).copied().unwrap_or(0.0) as usize,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            problem,
            entries,
            converged: status["converged"].as_bool().unwrap_or(false),
        })
    }
}

/// Optimality-criteria update.
///
/// `x_new = clamp(x * (-dc / (dv * lambda))^damping)` within the move limit and
/// `[0, 1]`, with `lambda` bisected until the filtered volume fraction matches
/// `volume_fraction` to 1e-4. `dc` and `dv` are sensitivities with respect to
/// the design variables.
pub fn oc_update(
    x: &[f64],
    dc: &[f64],
    dv: &[f64],
    volume_fraction: f64,
    kernel: &FilterKernel,
    move_limit: f64,
    damping: f64,
) -> Result<Vec<f64>> {
    let n = x.len();
    let ratio: Vec<f64> = dc
        .iter()
        .zip(dv)
        .map(|(&c, &v)| (-c).max(0.0) / v)
        .collect();
    let mut candidate = vec![0.0; n];
    let trial = |lambda: f64, out: &mut Vec<f64>| -> f64 {
        for i in 0..n {
            let lo = (x[i] - move_limit).max(0.0);
            let hi = (x[i] + move_limit).min(1.0);
            let step = x[i] * (ratio[i] / lambda).powf(damping);
            out[i] = step.clamp(lo, hi);
        }
        kernel.apply(out).iter().sum::<f64>() / n as f64
    };

    const TOL: f64 = 0.5e-4;
    let (mut lo, mut hi) = (1e-40f64, 1e40f64);
    let v_lo = trial(lo, &mut candidate);
    let v_hi = trial(hi, &mut candidate);
    if v_lo < volume_fraction - TOL || v_hi > volume_fraction + TOL {
        return Err(Error::Bracket {
            lo: v_hi,
            hi: v_lo,
            target: volume_fraction,
        });
    }
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        let vol = trial(mid, &mut candidate);
        if (vol - volume_fraction).abs() <= TOL {
            return Ok(candidate);
        }
        if vol > volume_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    // Volume is a step function of lambda only when elements sit on their
    // bounds; the closest side of the final bracket is the best feasible point.
    let v_l = trial(lo, &mut candidate);
    let mut best = candidate.clone();
    let v_h = trial(hi, &mut candidate);
    if (v_h - volume_fraction).abs() < (v_l - volume_fraction).abs() {
        best = candidate;
    }
    Ok(best)
}

/// Runs SIMP from the uniform field to convergence or the iteration cap.
pub fn run_simp(problem: &ProblemSpec, config: &SimpConfig) -> Result<IterationTrace> {
    run_simp_with(problem, config, |_| {})
}

/// [`run_simp`] with a callback invoked after each recorded entry.
pub fn run_simp_with(
    problem: &ProblemSpec,
    config: &SimpConfig,
    mut on_entry: impl FnMut(&TraceEntry),
) -> Result<IterationTrace> {
    problem.validate()?;
    config.validate()?;
    let start = Instant::now();
    let domain = problem.domain;
    let fea = Fea::new(domain, config.material)?;
    let dofs = fixed_dofs_for_case(problem.bc_case, &domain);
    let forces = assemble_forces(&problem.loads, &domain);
    let kernel = FilterKernel::new(&domain, config.filter_radius * domain.h());
    let n = domain.element_count();
    let dv = kernel.apply_transpose(&vec![1.0; n]);
    let v0 = problem.volume_fraction;

    let mut x = DensityField::uniform(domain.grid(), v0)?;
    let mut previous: Option<DensityField> = None;
    let mut u: Option<Vec<f64>> = None;
    let mut entries = Vec::new();
    let mut converged = false;
    for t in 0.. {
        let wrap = |e: Error| Error::Simp {
            iteration: t,
            source: Box::new(e),
        };
        let x_phys = density_filter(&x, &kernel).map_err(wrap)?;
        let change = previous.as_ref().map_or(0.0, |p| x_phys.max_abs_diff(p));
        let sol = fea
            .solve_equilibrium(&x_phys, &forces, &dofs, config.solver_tolerance, u.as_deref())
            .map_err(wrap)?;
        let (c, dc_phys) = fea.compliance_and_sensitivity(&sol.u, &x_phys);
        entries.push(TraceEntry {
            iteration: t,
            density: x_phys.clone(),
            compliance: c,
            max_change: change,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            solver_iterations: sol.iterations,
        });
        on_entry(entries.last().expect("just pushed"));
        if t > 0 && change < config.tolerance {
            converged = true;
            break;
        }
        if t >= config.max_iterations {
            break;
        }
        let dc = kernel.apply_transpose(&dc_phys);
        let next = oc_update(x.values(), &dc, &dv, v0, &kernel, config.move_limit, config.damping).map_err(wrap)?;
        x = DensityField::new(domain.grid(), next).map_err(wrap)?;
        previous = Some(x_phys);
        u = Some(sol.u);
    }
    Ok(IterationTrace {
        problem: problem.clone(),
        entries,
        converged,
    })
}
