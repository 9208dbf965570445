//! The hexahedral design domain: node/DOF numbering, support cases and load
//! distribution.
//!
//! Nodes are numbered x-fastest over an `(nx+1) x (ny+1) x (nz+1)` lattice and
//! carry three DOFs each, `3 * node + axis`. The z axis points "up"; "bottom"
//! edges lie on the `z = 0` plane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Grid3;

/// A rectangular block discretised into cubic voxels of edge `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainDoc", into = "DomainDoc")]
pub struct DesignDomain {
    grid: Grid3,
    extent: [f64; 3],
    h: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainDoc {
    nx: usize,
    ny: usize,
    nz: usize,
    lx: f64,
    ly: f64,
    lz: f64,
}

impl TryFrom<DomainDoc> for DesignDomain {
    type Error = Error;
    fn try_from(d: DomainDoc) -> Result<Self> {
        build_domain(d.nx, d.ny, d.nz, d.lx, d.ly, d.lz)
    }
}

impl From<DesignDomain> for DomainDoc {
    fn from(d: DesignDomain) -> Self {
        DomainDoc {
            nx: d.grid.nx,
            ny: d.grid.ny,
            nz: d.grid.nz,
            lx: d.extent[0],
            ly: d.extent[1],
            lz: d.extent[2],
        }
    }
}

/// Builds a domain, rejecting non-cubic elements.
pub fn build_domain(nx: usize, ny: usize, nz: usize, lx: f64, ly: f64, lz: f64) -> Result<DesignDomain> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Domain(format!("element counts must be >= 1, got {nx}x{ny}x{nz}")));
    }
    if !(lx > 0.0 && ly > 0.0 && lz > 0.0) || !(lx.is_finite() && ly.is_finite() && lz.is_finite()) {
        return Err(Error::Domain(format!("extents must be positive, got {lx} x {ly} x {lz}")));
    }
    let hx = lx / nx as f64;
    let hy = ly / ny as f64;
    let hz = lz / nz as f64;
    if (hx - hy).abs() > 1e-9 || (hx - hz).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "elements must be cubic: edge lengths {hx} / {hy} / {hz} differ"
        )));
    }
    Ok(DesignDomain {
        grid: Grid3::new(nx, ny, nz),
        extent: [lx, ly, lz],
        h: hx,
    })
}

impl DesignDomain {
    /// The 24 x 12 x 12 beam of 2 m x 1 m x 1 m.
    pub fn reference() -> Self {
        build_domain(24, 12, 12, 2.0, 1.0, 1.0).expect("reference domain is valid")
    }

    pub fn grid(&self) -> Grid3 {
        self.grid
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn extent(&self) -> [f64; 3] {
        self.extent
    }

    pub fn element_count(&self) -> usize {
        self.grid.len()
    }

    pub fn node_grid(&self) -> Grid3 {
        Grid3::new(self.grid.nx + 1, self.grid.ny + 1, self.grid.nz + 1)
    }

    pub fn node_count(&self) -> usize {
        self.node_grid().len()
    }

    pub fn dof_count(&self) -> usize {
        3 * self.node_count()
    }

    pub fn element_volume(&self) -> f64 {
        self.h * self.h * self.h
    }

    pub fn volume(&self) -> f64 {
        self.extent.iter().product()
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        self.node_grid().index(i, j, k)
    }

    /// The 8 node indices of element `(i, j, k)` in local order
    /// `(0,0,0) (1,0,0) (1,1,0) (0,1,0) (0,0,1) (1,0,1) (1,1,1) (0,1,1)`.
    #[inline]
    pub fn element_nodes(&self, i: usize, j: usize, k: usize) -> [usize; 8] {
        let sx = self.grid.nx + 1;
        let sxy = sx * (self.grid.ny + 1);
        let n0 = i + sx * j + sxy * k;
        [
            n0,
            n0 + 1,
            n0 + 1 + sx,
            n0 + sx,
            n0 + sxy,
            n0 + 1 + sxy,
            n0 + 1 + sx + sxy,
            n0 + sx + sxy,
        ]
    }

    /// Physical position of node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [i as f64 * self.h, j as f64 * self.h, k as f64 * self.h]
    }
}

/// Local node offsets matching [`DesignDomain::element_nodes`].
pub const HEX_NODE_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// One of the six boundary planes of the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::XMin, Face::XMax, Face::YMin, Face::YMax, Face::ZMin, Face::ZMax];

    /// Axis normal to the face.
    pub fn normal_axis(self) -> usize {
        match self {
            Face::XMin | Face::XMax => 0,
            Face::YMin | Face::YMax => 1,
            Face::ZMin | Face::ZMax => 2,
        }
    }

    /// The two in-plane axes, in increasing order.
    pub fn in_plane_axes(self) -> [usize; 2] {
        match self.normal_axis() {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    pub fn is_max(self) -> bool {
        matches!(self, Face::XMax | Face::YMax | Face::ZMax)
    }
}

/// A point load applied around an anchor node on a boundary face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub face: Face,
    /// Fractional coordinates in `[0, 1]` along the face's two in-plane axes.
    pub anchor: [f64; 2],
    /// Unit direction.
    pub direction: [f64; 3],
    /// Signed magnitude, +1 or -1.
    pub magnitude: f64,
}

impl Load {
    pub fn validate(&self) -> Result<()> {
        let norm = self.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("load direction has norm {norm}, expected 1")));
        }
        if self.anchor.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Invalid(format!("load anchor {:?} is off the face", self.anchor)));
        }
        if !self.magnitude.is_finite() {
            return Err(Error::Invalid("load magnitude is not finite".into()));
        }
        Ok(())
    }

    /// Node lattice coordinates of the anchor, snapped to the nearest face node.
    pub fn anchor_node(&self, domain: &DesignDomain) -> [usize; 3] {
        let counts = domain.grid().dims();
        let mut node = [0usize; 3];
        let normal = self.face.normal_axis();
        node[normal] = if self.face.is_max() { counts[normal] } else { 0 };
        for (frac, axis) in self.anchor.iter().zip(self.face.in_plane_axes()) {
            node[axis] = (frac * counts[axis] as f64).round() as usize;
        }
        node
    }

    /// The force vector `magnitude * direction`.
    pub fn force(&self) -> [f64; 3] {
        self.direction.map(|d| d * self.magnitude)
    }
}

/// Support configuration, one of the four beam cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BcCase(u8);

impl BcCase {
    pub const ALL: [BcCase; 4] = [BcCase(1), BcCase(2), BcCase(3), BcCase(4)];

    pub fn new(case: u8) -> Result<Self> {
        if (1..=4).contains(&case) {
            Ok(Self(case))
        } else {
            Err(Error::BcCase(case))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for BcCase {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BcCase> for u8 {
    fn from(c: BcCase) -> u8 {
        c.0
    }
}

pub const VOLUME_FRACTION_RANGE: (f64, f64) = (0.07, 0.5);
pub const MAX_LOADS: usize = 10;

/// One sampled optimization problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub domain: DesignDomain,
    pub volume_fraction: f64,
    pub loads: Vec<Load>,
    pub bc_case: BcCase,
    pub seed: u64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = VOLUME_FRACTION_RANGE;
        if !(lo..=hi).contains(&self.volume_fraction) {
            return Err(Error::Invalid(format!(
                "volume fraction {} outside [{lo}, {hi}]",
                self.volume_fraction
            )));
        }
        if self.loads.is_empty() || self.loads.len() > MAX_LOADS {
            return Err(Error::Invalid(format!("{} loads, expected 1..={MAX_LOADS}", self.loads.len())));
        }
        self.loads.iter().try_for_each(Load::validate)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ProblemSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Constrained DOFs for one support case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DofMap {
    fixed: Vec<usize>,
    mask: Vec<bool>,
}

impl DofMap {
    pub fn from_fixed(dof_count: usize, mut fixed: Vec<usize>) -> Self {
        fixed.sort_unstable();
        fixed.dedup();
        let mut mask = vec![false; dof_count];
        for &d in &fixed {
            mask[d] = true;
        }
        Self { fixed, mask }
    }

    pub fn fixed_dofs(&self) -> &[usize] {
        &self.fixed
    }

    /// `true` at every constrained DOF.
    pub fn fixed_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_fixed(&self, dof: usize) -> bool {
        self.mask[dof]
    }

    pub fn dof_count(&self) -> usize {
        self.mask.len()
    }

    pub fn free_dof_count(&self) -> usize {
        self.mask.len() - self.fixed.len()
    }
}

/// Fixed DOFs for a support case.
///
/// 1. cantilever: the `x = 0` face fixed in x, y, z.
/// 2. simply supported: bottom edge at `x = 0` fixed in x, y, z; bottom edge at
///    `x = lx` fixed in y, z.
/// 3. modified simple support: bottom edges at the node planes nearest
///    `x = lx/4` and `x = 3lx/4` fixed in y, z, and node `(0,0,0)` fixed in x.
/// 4. constrained cantilever: `x = 0` face fixed in x, y, z and `x = lx` face
///    fixed in y, z.
pub fn fixed_dofs_for_case(case: BcCase, domain: &DesignDomain) -> DofMap {
    let Grid3 { nx, ny, nz } = domain.grid();
    let mut fixed = Vec::new();
    let mut fix = |i: usize, j: usize, k: usize, axes: &[usize]| {
        let node = domain.node_index(i, j, k);
        fixed.extend(axes.iter().map(|a| 3 * node + a));
    };
    const XYZ: &[usize] = &[0, 1, 2];
    const YZ: &[usize] = &[1, 2];
    match case.get() {
        1 | 4 => {
            for k in 0..=nz {
                for j in 0..=ny {
                    fix(0, j, k, XYZ);
                    if case.get() == 4 {
                        fix(nx, j, k, YZ);
                    }
                }
            }
        }
        2 => {
            for j in 0..=ny {
                fix(0, j, 0, XYZ);
                fix(nx, j, 0, YZ);
            }
        }
        3 => {
            let quarter = (nx as f64 / 4.0).round() as usize;
            let three_quarter = (3.0 * nx as f64 / 4.0).round() as usize;
            for j in 0..=ny {
                fix(quarter, j, 0, YZ);
                fix(three_quarter, j, 0, YZ);
            }
            fix(0, 0, 0, &[0]);
        }
        _ => unreachable!("BcCase is validated on construction"),
    }
    DofMap::from_fixed(domain.dof_count(), fixed)
}

/// Equal-share nodal forces of one load: `(node, force)` pairs.
pub type NodalForces = Vec<(usize, [f64; 3])>;

/// Spreads a load over every node within distance `h` of its anchor node.
///
/// Only nodes of the domain lattice qualify, so the recipient set is the
/// half-ball on the inward side of the face.
pub fn distribute_load(load: &Load, domain: &DesignDomain) -> NodalForces {
    let anchor = load.anchor_node(domain);
    let dims = domain.grid().dims();
    let mut recipients = Vec::with_capacity(7);
    // Radius h on a lattice of spacing h reaches only the 6 axis neighbours.
    for k in anchor[2].saturating_sub(1)..=(anchor[2] + 1).min(dims[2]) {
        for j in anchor[1].saturating_sub(1)..=(anchor[1] + 1).min(dims[1]) {
            for i in anchor[0].saturating_sub(1)..=(anchor[0] + 1).min(dims[0]) {
                let d2 = [i.abs_diff(anchor[0]), j.abs_diff(anchor[1]), k.abs_diff(anchor[2])]
                    .iter()
                    .map(|d| d * d)
                    .sum::<usize>();
                if d2 <= 1 {
                    recipients.push(domain.node_index(i, j, k));
                }
            }
        }
    }
    let total = load.force();
    let n = recipients.len() as f64;
    let share = total.map(|f| f / n);
    recipients.into_iter().map(|node| (node, share)).collect()
}

/// Dense nodal force vector (3 entries per node) for a set of loads.
pub fn assemble_forces(loads: &[Load], domain: &DesignDomain) -> Vec<f64> {
    let mut f = vec![0.0; domain.dof_count()];
    for load in loads {
        for (node, force) in distribute_load(load, domain) {
            for a in 0..3 {
                f[3 * node + a] += force[a];
            }
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(face: Face, anchor: [f64; 2]) -> Load {
        let d = [1.0, 2.0, 2.0].map(|v: f64| v / 3.0);
        Load {
            face,
            anchor,
            direction: d,
            magnitude: -1.0,
        }
    }

    #[test]
    fn reference_domain_counts() {
        let d = build_domain(24, 12, 12, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(d.element_count(), 3456);
        assert!((d.h() - 1.0 / 12.0).abs() < 1e-12);
        assert!((d.h() - 0.0833).abs() < 1e-3);
        for (n, l) in d.grid().dims().iter().zip(d.extent()) {
            assert!((*n as f64 * d.h() - l).abs() < 1e-12);
        }
        assert_eq!(d.node_count(), 25 * 13 * 13);
    }

    #[test]
    fn small_domain_counts() {
        let d = build_domain(1, 1, 1, 1.0, 1.0, 1.0).unwrap();
        assert_eq!((d.element_count(), d.node_count()), (1, 8));
        let d = build_domain(2, 1, 1, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(d.node_count(), 12);
    }

    #[test]
    fn rejects_non_cubic_and_empty() {
        assert!(matches!(build_domain(2, 1, 1, 1.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(build_domain(0, 1, 1, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn case_one_fixes_the_root_face() {
        let d = DesignDomain::reference();
        let map = fixed_dofs_for_case(BcCase::new(1).unwrap(), &d);
        assert_eq!(map.fixed_dofs().len(), 507);
        assert_eq!(map.free_dof_count(), 3 * d.node_count() - 507);
        let unit = build_domain(1, 1, 1, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(fixed_dofs_for_case(BcCase::new(1).unwrap(), &unit).fixed_dofs().len(), 12);
    }

    #[test]
    fn case_counts_by_enumeration() {
        let d = DesignDomain::reference();
        let count = |c| fixed_dofs_for_case(BcCase::new(c).unwrap(), &d).fixed_dofs().len();
        assert_eq!(count(2), 13 * 3 + 13 * 2);
        assert_eq!(count(3), 13 * 2 * 2 + 1);
        assert_eq!(count(4), 169 * 3 + 169 * 2);
    }

    #[test]
    fn invalid_case() {
        assert!(matches!(BcCase::new(5), Err(Error::BcCase(5))));
        assert!(BcCase::new(0).is_err());
    }

    #[test]
    fn fixed_set_is_pure() {
        let d = DesignDomain::reference();
        for c in BcCase::ALL {
            assert_eq!(fixed_dofs_for_case(c, &d), fixed_dofs_for_case(c, &d));
        }
    }

    fn brute_force_recipients(load: &Load, d: &DesignDomain) -> Vec<usize> {
        let a = load.anchor_node(d);
        let pa = d.node_position(a[0], a[1], a[2]);
        let ng = d.node_grid();
        let mut out = Vec::new();
        for n in 0..ng.len() {
            let (i, j, k) = ng.coords(n);
            let p = d.node_position(i, j, k);
            let dist = ((p[0] - pa[0]).powi(2) + (p[1] - pa[1]).powi(2) + (p[2] - pa[2]).powi(2)).sqrt();
            if dist <= d.h() * (1.0 + 1e-9) {
                out.push(n);
            }
        }
        out
    }

    fn force_sum(f: &NodalForces) -> [f64; 3] {
        f.iter().fold([0.0; 3], |acc, (_, v)| [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]])
    }

    #[test]
    fn face_centre_matches_brute_force() {
        let d = DesignDomain::reference();
        for face in Face::ALL {
            let l = load(face, [0.5, 0.5]);
            let mut got: Vec<usize> = distribute_load(&l, &d).iter().map(|p| p.0).collect();
            got.sort_unstable();
            assert_eq!(got, brute_force_recipients(&l, &d));
            assert_eq!(got.len(), 6);
            let s = force_sum(&distribute_load(&l, &d));
            for a in 0..3 {
                assert!((s[a] - l.force()[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_anchor_has_fewer_recipients() {
        let d = DesignDomain::reference();
        let l = load(Face::XMin, [0.0, 0.0]);
        let f = distribute_load(&l, &d);
        assert_eq!(f.len(), 4);
        assert_eq!(f.len(), brute_force_recipients(&l, &d).len());
        let s = force_sum(&f);
        for a in 0..3 {
            assert!((s[a] - l.force()[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_along_face_shifts_recipients() {
        let d = DesignDomain::reference();
        let a = load(Face::ZMax, [0.5, 0.5]);
        let mut b = a.clone();
        // one element along x on a 24-element axis
        b.anchor[0] += 1.0 / 24.0;
        let mut ra: Vec<usize> = distribute_load(&a, &d).iter().map(|p| p.0).collect();
        let mut rb: Vec<usize> = distribute_load(&b, &d).iter().map(|p| p.0).collect();
        ra.sort_unstable();
        rb.sort_unstable();
        let shifted: Vec<usize> = ra.iter().map(|n| n + 1).collect();
        assert_eq!(shifted, rb);
    }

    #[test]
    fn problem_json_round_trip() {
        let spec = ProblemSpec {
            domain: DesignDomain::reference(),
            volume_fraction: 0.3,
            loads: vec![load(Face::YMax, [0.25, 0.5])],
            bc_case: BcCase::new(2).unwrap(),
            seed: 7,
        };
        let text = spec.to_json().unwrap();
        assert_eq!(ProblemSpec::from_json(&text).unwrap(), spec);
        let bad = text.replace("\"bc_case\": 2", "\"bc_case\": 9");
        assert!(ProblemSpec::from_json(&bad).is_err());
    }
}
