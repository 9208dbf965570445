//! Training records built from optimisation traces.
//!
//! A record pairs an 8-channel input volume with the converged density:
//!
//! | channel | content                                   |
//! |---------|-------------------------------------------|
//! | 0       | density at iteration `m`                  |
//! | 1       | density(m) - density(n)                   |
//! | 2..5    | per-voxel mean nodal force, x/y/z         |
//! | 5..8    | constraint flag x/y/z: 1 fixed, -1 free surface, 0 interior |
//!
//! Record shards are little-endian:
//!
//! ```text
//! magic "TOPO3DDS" | version u32 | nx ny nz u32 | count u64
//! per record: m n T symmetry u32 | seed u64 | reserved u64 | 9 * nx*ny*nz f32
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{assemble_forces, fixed_dofs_for_case, DesignDomain, DofMap, Load, ProblemSpec};
use crate::error::{Error, Result};
use crate::field::{DensityField, Grid3};
use crate::io::{check_magic, read_exact_or, read_u32, read_u64};
use crate::sampler::{rng_from_seed, truncated_poisson};
use crate::simp::{run_simp, IterationTrace, SimpConfig};

pub const CHANNELS: usize = 8;
pub const RECORD_MAGIC: &[u8; 8] = b"TOPO3DDS";
pub const RECORD_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 32;
const META_BYTES: u64 = 32;

/// Share of training records that receive a rotated copy.
pub const AUGMENT_FRACTION: f64 = 0.4;

/// Input groups that can be masked in or out of the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    Density,
    Gradient,
    Boundary,
}

impl ChannelGroup {
    pub fn channels(self) -> &'static [usize] {
        match self {
            ChannelGroup::Density => &[0],
            ChannelGroup::Gradient => &[1],
            ChannelGroup::Boundary => &[2, 3, 4, 5, 6, 7],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(Self::Density),
            "gradient" => Ok(Self::Gradient),
            "boundary" => Ok(Self::Boundary),
            _ => Err(Error::Invalid(format!("unknown channel group `{s}`"))),
        }
    }
}

/// Sorted, deduplicated channel indices for a set of groups.
pub fn channel_indices(groups: &[ChannelGroup]) -> Result<Vec<usize>> {
    if groups.is_empty() {
        return Err(Error::Invalid("channel subset must not be empty".into()));
    }
    let mut idx: Vec<usize> = groups.iter().flat_map(|g| g.channels().iter().copied()).collect();
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

/// Eight stacked voxel fields, channel-major, x-fastest within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTensor {
    grid: Grid3,
    data: Vec<f32>,
}

impl ChannelTensor {
    pub fn new(grid: Grid3, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * grid.len() {
            return Err(Error::Shape {
                expected: format!("{CHANNELS}x{grid}"),
                got: data.len().to_string(),
            });
        }
        let t = Self { grid, data };
        t.validate()?;
        Ok(t)
    }

    pub fn grid(&self) -> Grid3 {
        self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Selected channels widened to f64, in the given order.
    pub fn select(&self, channels: &[usize]) -> Vec<f64> {
        channels
            .iter()
            .flat_map(|&c| self.channel(c).iter().map(|&v| v as f64))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |c: usize, ok: &dyn Fn(f32) -> bool| -> Result<()> {
            match self.channel(c).iter().position(|&v| !ok(v)) {
                Some(i) => Err(Error::Invalid(format!(
                    "channel {c} value {} at voxel {i} out of range",
                    self.channel(c)[i]
                ))),
                None => Ok(()),
            }
        };
        bad(0, &|v| (0.0..=1.0).contains(&v))?;
        bad(1, &|v| (-1.0..=1.0).contains(&v))?;
        for c in 2..5 {
            bad(c, &|v| v.is_finite())?;
        }
        for c in 5..8 {
            bad(c, &|v| v == -1.0 || v == 0.0 || v == 1.0)?;
        }
        Ok(())
    }
}

/// Loads in a canonical order so that force accumulation does not depend on
/// how the problem happened to list them.
fn canonical_loads(loads: &[Load]) -> Vec<Load> {
    let mut sorted = loads.to_vec();
    let key = |l: &Load| {
        let mut k = vec![l.face as u64];
        k.extend(l.anchor.iter().chain(&l.direction).map(|v| v.to_bits()));
        k.push(l.magnitude.to_bits());
        k
    };
    sorted.sort_by_key(key);
    sorted
}

/// Channels 2..8 from nodal data: `forces` has 3 entries per node and
/// `fixed` flags the same DOFs.
pub fn encode_boundary(domain: &DesignDomain, forces: &[f64], fixed: &[bool]) -> Result<Vec<f32>> {
    if forces.len() != domain.dof_count() || fixed.len() != domain.dof_count() {
        return Err(Error::Shape {
            expected: domain.dof_count().to_string(),
            got: format!("{}/{}", forces.len(), fixed.len()),
        });
    }
    let grid = domain.grid();
    let n = grid.len();
    let mut out = vec![0f32; 6 * n];
    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let e = grid.index(i, j, k);
                let nodes = domain.element_nodes(i, j, k);
                let surface = grid.is_surface(i, j, k);
                for a in 0..3 {
                    let mean = nodes.iter().map(|&nd| forces[3 * nd + a]).sum::<f64>() / 8.0;
                    out[a * n + e] = mean as f32;
                    let held = nodes.iter().any(|&nd| fixed[3 * nd + a]);
                    out[(3 + a) * n + e] = if held {
                        1.0
                    } else if surface {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Boundary channels of a problem; shared by every record drawn from it.
pub fn problem_boundary(problem: &ProblemSpec) -> Vec<f32> {
    let d = &problem.domain;
    let forces = assemble_forces(&canonical_loads(&problem.loads), d);
    let dofs: DofMap = fixed_dofs_for_case(problem.bc_case, d);
    encode_boundary(d, &forces, dofs.fixed_mask()).expect("shapes come from the same domain")
}

/// Assembles a tensor from two density fields and precomputed boundary channels.
pub fn encode_from_parts(grid: Grid3, x_m: &[f64], x_n: &[f64], boundary: &[f32]) -> Result<ChannelTensor> {
    let n = grid.len();
    if x_m.len() != n || x_n.len() != n || boundary.len() != 6 * n {
        return Err(Error::Shape {
            expected: format!("{n} voxels"),
            got: format!("{}/{}/{}", x_m.len(), x_n.len(), boundary.len()),
        });
    }
    let mut data = Vec::with_capacity(CHANNELS * n);
    data.extend(x_m.iter().map(|&v| v as f32));
    data.extend(x_m.iter().zip(x_n).map(|(a, b)| (a - b) as f32));
    data.extend_from_slice(boundary);
    ChannelTensor::new(grid, data)
}

fn check_pair(m: usize, n: usize, t: usize) -> Result<()> {
    if n >= m || m > t {
        return Err(Error::Invalid(format!("iteration pair needs n < m <= T, got m={m} n={n} T={t}")));
    }
    Ok(())
}

pub fn encode_channels(trace: &IterationTrace, m: usize, n: usize, problem: &ProblemSpec) -> Result<ChannelTensor> {
    check_pair(m, n, trace.last_index())?;
    encode_from_parts(
        problem.domain.grid(),
        trace.density(m).values(),
        trace.density(n).values(),
        &problem_boundary(problem),
    )
}

/// Signed axis permutation mapping a centred point `p` to `p'_a = sign[a] * p[perm[a]]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Symmetry {
    pub perm: [usize; 3],
    pub sign: [i8; 3],
}

impl Symmetry {
    pub const IDENTITY: Self = Self::new([0, 1, 2], [1, 1, 1]);
    pub const X90: Self = Self::new([0, 2, 1], [1, -1, 1]);
    pub const X180: Self = Self::new([0, 1, 2], [1, -1, -1]);
    pub const X270: Self = Self::new([0, 2, 1], [1, 1, -1]);
    pub const Y180: Self = Self::new([0, 1, 2], [-1, 1, -1]);
    pub const Z180: Self = Self::new([0, 1, 2], [-1, -1, 1]);
    /// The rotations drawn by augmentation.
    pub const AUGMENT: [Self; 5] = [Self::X90, Self::X180, Self::X270, Self::Y180, Self::Z180];

    pub const fn new(perm: [usize; 3], sign: [i8; 3]) -> Self {
        Self { perm, sign }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Self) -> Self {
        let mut perm = [0; 3];
        let mut sign = [0; 3];
        for a in 0..3 {
            perm[a] = other.perm[self.perm[a]];
            sign[a] = self.sign[a] * other.sign[self.perm[a]];
        }
        Self { perm, sign }
    }

    pub fn apply_vector(self, v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.sign[a] as f64 * v[self.perm[a]])
    }

    /// Whether the symmetry maps a box of these counts onto itself.
    pub fn preserves(self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| dims[self.perm[a]] == dims[a])
    }

    /// Image of lattice point `p` in a box with `extent` points per axis minus one
    /// (voxel counts minus one for voxels, element counts for nodes).
    pub fn map_index(self, p: [usize; 3], extent: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let b = self.perm[a];
            if self.sign[a] > 0 {
                p[b]
            } else {
                extent[b] - p[b]
            }
        })
    }

    pub fn code(self) -> u32 {
        let mut c = 0u32;
        for a in 0..3 {
            c |= (self.perm[a] as u32) << (2 * a);
            if self.sign[a] < 0 {
                c |= 1 << (6 + a);
            }
        }
        c
    }

    pub fn from_code(code: u32) -> Result<Self> {
        if code >> 9 != 0 {
            return Err(Error::Invalid(format!("symmetry code {code} out of range")));
        }
        let perm = [0, 1, 2].map(|a| ((code >> (2 * a)) & 3) as usize);
        let sign = [0, 1, 2].map(|a| if code >> (6 + a) & 1 == 1 { -1 } else { 1 });
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::Invalid(format!("symmetry code {code} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(Self { perm, sign })
    }

    /// Moves voxel values of one scalar field.
    pub fn permute_field<T: Copy + Default>(self, grid: Grid3, src: &[T]) -> Vec<T> {
        let ext = grid.dims().map(|d| d - 1);
        let mut dst = vec![T::default(); src.len()];
        for (idx, &v) in src.iter().enumerate() {
            let (i, j, k) = grid.coords(idx);
            let [a, b, c] = self.map_index([i, j, k], ext);
            dst[grid.index(a, b, c)] = v;
        }
        dst
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub input: ChannelTensor,
    /// Converged density, stored at record precision.
    pub target: Vec<f32>,
    pub m: usize,
    pub n: usize,
    pub iterations: usize,
    pub seed: u64,
    pub symmetry: Symmetry,
}

impl SampleRecord {
    pub fn from_trace(trace: &IterationTrace, m: usize, n: usize, boundary: &[f32]) -> Result<Self> {
        check_pair(m, n, trace.last_index())?;
        let grid = trace.problem.domain.grid();
        Ok(Self {
            input: encode_from_parts(grid, trace.density(m).values(), trace.density(n).values(), boundary)?,
            target: trace.final_density().values().iter().map(|&v| v as f32).collect(),
            m,
            n,
            iterations: trace.last_index(),
            seed: trace.problem.seed,
            symmetry: Symmetry::IDENTITY,
        })
    }

    pub fn grid(&self) -> Grid3 {
        self.input.grid()
    }

    pub fn target_values(&self) -> Vec<f64> {
        self.target.iter().map(|&v| v as f64).collect()
    }

    pub fn target_field(&self) -> Result<DensityField> {
        DensityField::new(self.grid(), self.target_values())
    }

    pub fn validate(&self) -> Result<()> {
        check_pair(self.m, self.n, self.iterations)?;
        self.input.validate()?;
        if self.target.len() != self.grid().len() {
            return Err(Error::Shape {
                expected: self.grid().len().to_string(),
                got: self.target.len().to_string(),
            });
        }
        if let Some(v) = self.target.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("target density {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Rotates every channel and the target consistently.
pub fn rotate_record(record: &SampleRecord, sym: Symmetry) -> Result<SampleRecord> {
    let grid = record.grid();
    if !sym.preserves(grid.dims()) {
        return Err(Error::Invalid(format!("symmetry {sym:?} changes the shape of a {grid} grid")));
    }
    let mut data = Vec::with_capacity(record.input.data().len());
    for c in 0..2 {
        data.extend(sym.permute_field(grid, record.input.channel(c)));
    }
    // Vector channels: new component a comes from old component perm[a].
    for a in 0..3 {
        let s = sym.sign[a] as f32;
        data.extend(
            sym.permute_field(grid, record.input.channel(2 + sym.perm[a]))
                .into_iter()
                .map(|v| s * v),
        );
    }
    for a in 0..3 {
        data.extend(sym.permute_field(grid, record.input.channel(5 + sym.perm[a])));
    }
    Ok(SampleRecord {
        input: ChannelTensor::new(grid, data)?,
        target: sym.permute_field(grid, &record.target),
        symmetry: sym.compose(record.symmetry),
        ..record.clone()
    })
}

pub fn augment_rotate(record: &SampleRecord, rng: &mut impl Rng) -> Result<SampleRecord> {
    let sym = Symmetry::AUGMENT[rng.gen_range(0..Symmetry::AUGMENT.len())];
    rotate_record(record, sym)
}

/// Originals followed by rotated copies of a random `fraction` of them.
pub fn augment_dataset(records: &[SampleRecord], fraction: f64, rng: &mut impl Rng) -> Result<Vec<SampleRecord>> {
    let mut out = records.to_vec();
    for r in records {
        if rng.gen::<f64>() < fraction {
            out.push(augment_rotate(r, rng)?);
        }
    }
    Ok(out)
}

/// How the input iteration `m` is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    Poisson5,
    Poisson10,
    Poisson30,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Uniform, Strategy::Poisson5, Strategy::Poisson10, Strategy::Poisson30];

    pub fn lambda(self) -> Option<f64> {
        match self {
            Strategy::Uniform => None,
            Strategy::Poisson5 => Some(5.0),
            Strategy::Poisson10 => Some(10.0),
            Strategy::Poisson30 => Some(30.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Poisson5 => "poisson5",
            Strategy::Poisson10 => "poisson10",
            Strategy::Poisson30 => "poisson30",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown strategy `{s}`")))
    }
}

/// Draws `(m, n)` with `1 <= m <= T-1` and `0 <= n < m`.
pub fn sample_iteration_pair(strategy: Strategy, t: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if t < 2 {
        return Err(Error::Invalid(format!("trace with T={t} has no valid iteration pair")));
    }
    let m = match strategy.lambda() {
        None => rng.gen_range(1..t),
        Some(lambda) => truncated_poisson(rng, lambda, 1, t as u64 - 1) as usize,
    };
    Ok((m, rng.gen_range(0..m)))
}

/// `count` records from one trace with pairs drawn by `strategy`.
pub fn sample_records(
    trace: &IterationTrace,
    strategy: Strategy,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SampleRecord>> {
    let boundary = problem_boundary(&trace.problem);
    (0..count)
        .map(|_| {
            let (m, n) = sample_iteration_pair(strategy, trace.last_index(), rng)?;
            SampleRecord::from_trace(trace, m, n, &boundary)
        })
        .collect()
}

/// Maps `f` over `items` on up to `threads` workers; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().unwrap().push((i, r));
            });
        }
    });
    for (i, r) in done.into_inner().unwrap() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item visited")).collect()
}

/// Solves every problem on up to `threads` workers and maps each trace
/// through `f` before it is dropped; results keep problem order.
pub fn solve_and_map<R: Send>(
    problems: &[ProblemSpec],
    simp: &SimpConfig,
    threads: usize,
    f: impl Fn(IterationTrace) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    parallel_map(problems, threads, |p| f(run_simp(p, simp)?)).into_iter().collect()
}

/// Pair sampler for one problem, independent of thread scheduling.
pub fn pair_rng(seed: u64, problem_seed: u64) -> crate::sampler::SeededRng {
    rng_from_seed(seed ^ problem_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Solves every problem and draws `per_trace` records from each.
pub fn build_records(
    problems: &[ProblemSpec],
    simp: &SimpConfig,
    strategy: Strategy,
    per_trace: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<SampleRecord>> {
    let per_problem = solve_and_map(problems, simp, threads, |trace| {
        sample_records(&trace, strategy, per_trace, &mut pair_rng(seed, trace.problem.seed))
    })?;
    Ok(per_problem.into_iter().flatten().collect())
}

/// Index sets of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 75 / 8.33 / 16.67 split: floor for train and validation, the
/// remainder goes to test.
pub fn split_indices(count: usize, seed: u64) -> Result<Splits> {
    if count < 3 {
        return Err(Error::Invalid(format!("need at least 3 items to split, got {count}")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let n_train = count * 3 / 4;
    let n_val = count / 12;
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Ok(Splits {
        train: idx,
        validation,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub strategy: Strategy,
    pub record_count: usize,
    pub split_seed: u64,
    /// Problem seed of every record, by record index.
    pub seeds: Vec<u64>,
    pub splits: Splits,
}

/// Partition index (0 train, 1 validation, 2 test) of every distinct seed,
/// split as [`split_indices`] over the sorted seeds.
pub fn split_seeds(seeds: &[u64], seed: u64) -> Result<BTreeMap<u64, usize>> {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let groups = split_indices(sorted.len(), seed)?;
    let mut part = BTreeMap::new();
    for (k, idx) in [&groups.train, &groups.validation, &groups.test].into_iter().enumerate() {
        for &i in idx {
            part.insert(sorted[i], k);
        }
    }
    Ok(part)
}

/// Splits whole problems so no problem contributes to two splits; records
/// follow their problem seed.
pub fn split_by_problem(records: &[SampleRecord], strategy: Strategy, seed: u64) -> Result<DatasetManifest> {
    let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    let part = split_seeds(&seeds, seed)?;
    let part_of = |s: u64| part[&s];
    let mut splits = Splits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in records.iter().enumerate() {
        match part_of(r.seed) {
            0 => splits.train.push(i),
            1 => splits.validation.push(i),
            _ => splits.test.push(i),
        }
    }
    Ok(DatasetManifest {
        format_version: RECORD_VERSION,
        strategy,
        record_count: records.len(),
        split_seed: seed,
        seeds: records.iter().map(|r| r.seed).collect(),
        splits,
    })
}

pub fn split_dataset(records: &[SampleRecord], strategy: Strategy, seed: u64) -> Result<DatasetManifest> {
    Ok(DatasetManifest {
        format_version: RECORD_VERSION,
        strategy,
        record_count: records.len(),
        split_seed: seed,
        seeds: records.iter().map(|r| r.seed).collect(),
        splits: split_indices(records.len(), seed)?,
    })
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.record_count];
        for &i in self.splits.train.iter().chain(&self.splits.validation).chain(&self.splits.test) {
            if i >= self.record_count || seen[i] {
                return Err(Error::Invalid(format!("split index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || self.seeds.len() != self.record_count {
            return Err(Error::Invalid("splits must cover every record exactly once".into()));
        }
        Ok(())
    }
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let grid = records.first().map(|r| r.grid()).unwrap_or(Grid3::new(0, 0, 0));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&RECORD_VERSION.to_le_bytes())?;
    for d in grid.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        if r.grid() != grid {
            return Err(Error::Shape {
                expected: grid.to_string(),
                got: r.grid().to_string(),
            });
        }
        for v in [r.m, r.n, r.iterations] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&r.symmetry.code().to_le_bytes())?;
        w.write_all(&r.seed.to_le_bytes())?;
        w.write_all(&0u64.to_le_bytes())?;
        for v in r.input.data().iter().chain(&r.target) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Size in bytes of a shard holding `count` records on `grid`.
pub fn records_file_size(grid: Grid3, count: usize) -> u64 {
    HEADER_BYTES + count as u64 * (META_BYTES + ((CHANNELS + 1) * grid.len() * 4) as u64)
}

fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; 4 * n];
    read_exact_or(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, RECORD_MAGIC)?;
    let version = read_u32(&mut r, "version")?;
    if version != RECORD_VERSION {
        return Err(Error::Version {
            expected: RECORD_VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = read_u32(&mut r, "dimensions")? as usize;
    }
    let grid = Grid3::new(dims[0], dims[1], dims[2]);
    let count = read_u64(&mut r, "record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let what = format!("record {index}");
        let m = read_u32(&mut r, &what)? as usize;
        let n = read_u32(&mut r, &what)? as usize;
        let iterations = read_u32(&mut r, &what)? as usize;
        let symmetry = Symmetry::from_code(read_u32(&mut r, &what)?).map_err(|e| Error::Record {
            index,
            reason: e.to_string(),
        })?;
        let seed = read_u64(&mut r, &what)?;
        read_u64(&mut r, &what)?;
        let data = read_f32s(&mut r, CHANNELS * grid.len(), &what)?;
        let target = read_f32s(&mut r, grid.len(), &what)?;
        let record = ChannelTensor::new(grid, data)
            .map(|input| SampleRecord {
                input,
                target,
                m,
                n,
                iterations,
                seed,
                symmetry,
            })
            .and_then(|rec| rec.validate().map(|_| rec))
            .map_err(|e| Error::Record {
                index,
                reason: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn shard_name(split: &str) -> String {
    format!("{split}.records")
}

/// Writes `manifest.json` plus one shard per split.
pub fn save_dataset(dir: &Path, records: &[SampleRecord], manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    if manifest.record_count != records.len() {
        return Err(Error::Invalid("manifest does not describe these records".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    for (name, idx) in manifest.split_parts() {
        let part: Vec<SampleRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        write_records(&dir.join(shard_name(name)), &part)?;
    }
    Ok(())
}

impl DatasetManifest {
    pub fn split_parts(&self) -> [(&'static str, &[usize]); 3] {
        [
            ("train", &self.splits.train),
            ("validation", &self.splits.validation),
            ("test", &self.splits.test),
        ]
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    m.validate()?;
    Ok(m)
}

/// Records of one split (`train`, `validation` or `test`).
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SampleRecord>> {
    read_records(&dir.join(shard_name(split)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, BcCase, Face};
    use crate::field::DensityField;
    use crate::simp::TraceEntry;

    fn small_problem() -> ProblemSpec {
        ProblemSpec {
            domain: build_domain(4, 2, 2, 2.0, 1.0, 1.0).unwrap(),
            volume_fraction: 0.3,
            loads: vec![
                Load {
                    face: Face::XMax,
                    anchor: [0.5, 0.5],
                    direction: [0.0, 0.6, 0.8],
                    magnitude: -1.0,
                },
                Load {
                    face: Face::ZMax,
                    anchor: [0.25, 0.0],
                    direction: [1.0, 0.0, 0.0],
                    magnitude: 1.0,
                },
            ],
            bc_case: BcCase::new(1).unwrap(),
            seed: 7,
        }
    }

    fn ramp_trace(problem: &ProblemSpec, steps: usize) -> IterationTrace {
        let grid = problem.domain.grid();
        let entries = (0..=steps)
            .map(|t| {
                let v = (0..grid.len())
                    .map(|i| ((i * 7 + t * 3) % 11) as f64 / 10.0)
                    .collect();
                TraceEntry {
                    iteration: t,
                    density: DensityField::new(grid, v).unwrap(),
                    compliance: 1.0,
                    max_change: 0.0,
                    wall_ms: 0.0,
                    solver_iterations: 0,
                }
            })
            .collect();
        IterationTrace {
            problem: problem.clone(),
            entries,
            converged: true,
        }
    }

    #[test]
    fn channels_follow_the_table() {
        let p = small_problem();
        let tr = ramp_trace(&p, 5);
        let c = encode_channels(&tr, 3, 1, &p).unwrap();
        let grid = p.domain.grid();
        for i in 0..grid.len() {
            assert_eq!(c.channel(0)[i], tr.density(3).values()[i] as f32);
            assert_eq!(c.channel(1)[i], (tr.density(3).values()[i] - tr.density(1).values()[i]) as f32);
        }
        // x = 0 face is clamped in every axis: voxels at i = 0 are flagged.
        for a in 0..3 {
            assert_eq!(c.channel(5 + a)[grid.index(0, 1, 1)], 1.0);
            assert_eq!(c.channel(5 + a)[grid.index(3, 1, 1)], -1.0);
        }
        assert!(encode_channels(&tr, 2, 2, &p).is_err());
        assert!(encode_channels(&tr, 6, 1, &p).is_err());
    }

    #[test]
    fn interior_voxels_are_zero() {
        let d = build_domain(4, 4, 4, 1.0, 1.0, 1.0).unwrap();
        let fixed = vec![false; d.dof_count()];
        let b = encode_boundary(&d, &vec![0.0; d.dof_count()], &fixed).unwrap();
        let g = d.grid();
        let n = g.len();
        assert_eq!(b[3 * n + g.index(1, 2, 1)], 0.0);
        assert_eq!(b[3 * n + g.index(0, 2, 1)], -1.0);
    }

    #[test]
    fn force_channels_average_nodal_loads() {
        let p = small_problem();
        let b = problem_boundary(&p);
        let n = p.domain.grid().len();
        let total: f64 = (0..3)
            .map(|a| b[a * n..(a + 1) * n].iter().map(|&v| v as f64).sum::<f64>())
            .sum();
        // Each nodal force lands in between 1 and 8 voxels with weight 1/8.
        assert!(total.is_finite());
        let mut reversed = p.clone();
        reversed.loads.reverse();
        assert_eq!(problem_boundary(&reversed), b);
    }

    #[test]
    fn pairs_respect_bounds() {
        let mut rng = rng_from_seed(3);
        for s in Strategy::ALL {
            for _ in 0..2000 {
                let (m, n) = sample_iteration_pair(s, 40, &mut rng).unwrap();
                assert!(n < m && (1..40).contains(&m));
            }
        }
        assert!(sample_iteration_pair(Strategy::Uniform, 1, &mut rng).is_err());
        assert_eq!(Strategy::Poisson30.lambda(), Some(30.0));
    }

    #[test]
    fn poisson5_mean_with_truncation() {
        let lambda: f64 = 5.0;
        // m is redrawn from {1..T-1}; with T = 100 only zero is excluded in practice.
        let expected = lambda / (1.0 - (-lambda).exp());
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let sum: usize = (0..n)
            .map(|_| sample_iteration_pair(Strategy::Poisson5, 100, &mut rng).unwrap().0)
            .sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - expected).abs() < 0.03, "{mean} vs {expected}");
        assert!((mean - 5.0).abs() < 0.1);
    }

    #[test]
    fn split_counts() {
        let s = split_indices(60, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (45, 5, 10));
        let s = split_indices(6000, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (4500, 500, 1000));
        assert!(split_indices(2, 1).is_err());
        assert_eq!(split_indices(60, 9).unwrap(), split_indices(60, 9).unwrap());
    }

    #[test]
    fn grouped_split_keeps_problems_together() {
        let p = small_problem();
        let mut recs = Vec::new();
        for seed in 0..12u64 {
            let mut q = p.clone();
            q.seed = seed;
            let tr = ramp_trace(&q, 5);
            recs.extend(sample_records(&tr, Strategy::Uniform, 3, &mut rng_from_seed(seed)).unwrap());
        }
        let man = split_by_problem(&recs, Strategy::Uniform, 1).unwrap();
        man.validate().unwrap();
        let seeds_of = |idx: &[usize]| idx.iter().map(|&i| recs[i].seed).collect::<std::collections::BTreeSet<_>>();
        let (a, b, c) = (seeds_of(&man.splits.train), seeds_of(&man.splits.validation), seeds_of(&man.splits.test));
        assert_eq!((a.len(), b.len(), c.len()), (9, 1, 2));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn symmetry_algebra() {
        assert_eq!(Symmetry::X90.apply_vector([0.0, 1.0, 0.0]), [0.0, 0.0, 1.0]);
        assert_eq!(Symmetry::Y180.compose(Symmetry::Y180), Symmetry::IDENTITY);
        assert_eq!(Symmetry::X90.compose(Symmetry::X90), Symmetry::X180);
        assert_eq!(Symmetry::X90.compose(Symmetry::X270), Symmetry::IDENTITY);
        for s in Symmetry::AUGMENT {
            assert_eq!(Symmetry::from_code(s.code()).unwrap(), s);
            assert!(s.preserves([24, 12, 12]));
        }
        assert!(!Symmetry::new([1, 0, 2], [1, 1, -1]).preserves([24, 12, 12]));
        assert!(Symmetry::from_code(0b010101).is_err());
    }

    #[test]
    fn shape_changing_rotation_is_rejected() {
        let p = small_problem();
        let tr = ramp_trace(&p, 4);
        let r = SampleRecord::from_trace(&tr, 3, 0, &problem_boundary(&p)).unwrap();
        assert!(rotate_record(&r, Symmetry::new([1, 0, 2], [1, -1, 1])).is_err());
    }

    #[test]
    fn augment_fraction() {
        let p = small_problem();
        let tr = ramp_trace(&p, 4);
        let r = SampleRecord::from_trace(&tr, 3, 0, &problem_boundary(&p)).unwrap();
        let batch = vec![r; 5000];
        let out = augment_dataset(&batch, AUGMENT_FRACTION, &mut rng_from_seed(5)).unwrap();
        let frac = (out.len() - batch.len()) as f64 / batch.len() as f64;
        assert!((frac - 0.4).abs() < 0.02, "{frac}");
    }

    #[test]
    fn records_round_trip_and_reject_damage() {
        let dir = tempfile::tempdir().unwrap();
        let p = small_problem();
        let tr = ramp_trace(&p, 6);
        let recs = sample_records(&tr, Strategy::Uniform, 5, &mut rng_from_seed(1)).unwrap();
        let path = dir.path().join("a.records");
        write_records(&path, &recs).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), records_file_size(p.domain.grid(), 5));
        assert_eq!(read_records(&path).unwrap(), recs);

        let mut bytes = fs::read(&path).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_records(&path), Err(Error::BadMagic { .. })));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Truncated(_))));

        let mut v = good.clone();
        v[8] = 9;
        fs::write(&path, &v).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Version { found: 9, .. })));

        // m <= n in the first record's metadata
        let mut bad = good.clone();
        bad[32..36].copy_from_slice(&0u32.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Record { index: 0, .. })));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = small_problem();
        let tr = ramp_trace(&p, 6);
        let recs = sample_records(&tr, Strategy::Poisson5, 12, &mut rng_from_seed(2)).unwrap();
        let man = split_dataset(&recs, Strategy::Poisson5, 4).unwrap();
        save_dataset(dir.path(), &recs, &man).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), man);
        let test = load_split(dir.path(), "test").unwrap();
        assert_eq!(test.len(), man.splits.test.len());
        assert_eq!(test[0], recs[man.splits.test[0]]);
    }
}
