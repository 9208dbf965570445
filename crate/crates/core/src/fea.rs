//! Linear-elastic voxel finite elements.
//!
//! Every element shares one 24x24 stiffness matrix at unit modulus; the global
//! operator is applied element by element and never assembled.

use serde::{Deserialize, Serialize};

use crate::domain::{DesignDomain, DofMap, HEX_NODE_OFFSETS};
use crate::error::{Error, Result};
use crate::field::DensityField;

/// SIMP material constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialModel {
    pub e0: f64,
    pub e_min: f64,
    pub penal: f64,
    pub nu: f64,
}

impl Default for MaterialModel {
    fn default() -> Self {
        Self {
            e0: 1.0,
            e_min: 1e-9,
            penal: 3.0,
            nu: 0.3,
        }
    }
}

impl MaterialModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_min > 0.0 && self.e_min < self.e0) {
            return Err(Error::Invalid(format!(
                "need 0 < e_min < e0, got e_min={} e0={}",
                self.e_min, self.e0
            )));
        }
        if !(self.penal >= 1.0) {
            return Err(Error::Invalid(format!("penalization {} must be >= 1", self.penal)));
        }
        if !(0.0..0.5).contains(&self.nu) {
            return Err(Error::Invalid(format!("Poisson ratio {} outside [0, 0.5)", self.nu)));
        }
        Ok(())
    }
}

/// Modified SIMP interpolation `e_min + (e0 - e_min) * x^p`.
pub fn simp_modulus(x: f64, material: &MaterialModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::DensityRange { index: 0, value: x });
    }
    Ok(modulus_unchecked(x, material))
}

#[inline]
fn modulus_unchecked(x: f64, m: &MaterialModel) -> f64 {
    m.e_min + (m.e0 - m.e_min) * x.powf(m.penal)
}

/// Stiffness of an 8-node trilinear hexahedron at unit Young's modulus.
///
/// Local DOF `3 * a + axis` for node `a` of [`HEX_NODE_OFFSETS`].
#[derive(Clone, Debug, PartialEq)]
pub struct ElementStiffness(pub Box<[[f64; 24]; 24]>);

impl ElementStiffness {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[r][c]
    }

    pub fn quadratic_form(&self, ue: &[f64; 24]) -> f64 {
        let mut acc = 0.0;
        for (row, &ur) in self.0.iter().zip(ue) {
            let mut s = 0.0;
            for (k, u) in row.iter().zip(ue) {
                s += k * u;
            }
            acc += ur * s;
        }
        acc
    }
}

/// 2x2x2 Gauss integration of `B^T D B` over a cube of edge `h`.
pub fn element_stiffness(material: &MaterialModel, h: f64) -> ElementStiffness {
    let nu = material.nu;
    let lambda = nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = 1.0 / (2.0 * (1.0 + nu));
    let mut d = [[0.0f64; 6]; 6];
    for r in 0..3 {
        for c in 0..3 {
            d[r][c] = lambda;
        }
        d[r][r] = lambda + 2.0 * mu;
        d[r + 3][r + 3] = mu;
    }

    let g = 1.0 / 3f64.sqrt();
    let signs = HEX_NODE_OFFSETS.map(|o| o.map(|v| if v == 0 { -1.0 } else { 1.0 }));
    let jac = h / 2.0;
    let det = jac * jac * jac;
    let mut ke = Box::new([[0.0f64; 24]; 24]);

    for gp in 0..8 {
        let xi = [
            if gp & 1 == 0 { -g } else { g },
            if gp & 2 == 0 { -g } else { g },
            if gp & 4 == 0 { -g } else { g },
        ];
        // dN_a/dx, dN_a/dy, dN_a/dz
        let mut grad = [[0.0f64; 3]; 8];
        for (a, s) in signs.iter().enumerate() {
            let f = [1.0 + s[0] * xi[0], 1.0 + s[1] * xi[1], 1.0 + s[2] * xi[2]];
            grad[a] = [
                s[0] * f[1] * f[2] / 8.0 / jac,
                f[0] * s[1] * f[2] / 8.0 / jac,
                f[0] * f[1] * s[2] / 8.0 / jac,
            ];
        }
        // Voigt order xx, yy, zz, xy, yz, zx with engineering shear.
        let mut b = [[0.0f64; 24]; 6];
        for (a, gr) in grad.iter().enumerate() {
            let c = 3 * a;
            b[0][c] = gr[0];
            b[1][c + 1] = gr[1];
            b[2][c + 2] = gr[2];
            b[3][c] = gr[1];
            b[3][c + 1] = gr[0];
            b[4][c + 1] = gr[2];
            b[4][c + 2] = gr[1];
            b[5][c] = gr[2];
            b[5][c + 2] = gr[0];
        }
        let mut db = [[0.0f64; 24]; 6];
        for r in 0..6 {
            for c in 0..24 {
                db[r][c] = (0..6).map(|k| d[r][k] * b[k][c]).sum();
            }
        }
        for r in 0..24 {
            for c in 0..24 {
                ke[r][c] += det * (0..6).map(|k| b[k][r] * db[k][c]).sum::<f64>();
            }
        }
    }
    // exact symmetry
    for r in 0..24 {
        for c in r + 1..24 {
            let avg = 0.5 * (ke[r][c] + ke[c][r]);
            ke[r][c] = avg;
            ke[c][r] = avg;
        }
    }
    ElementStiffness(ke)
}

/// Result of an equilibrium solve.
#[derive(Clone, Debug)]
pub struct Solution {
    /// Nodal displacements, 3 per node; exactly zero at fixed DOFs.
    pub u: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Matrix-free `K(x)` restricted to free DOFs (fixed rows and columns act as zero).
pub struct StiffnessOperator<'a> {
    domain: &'a DesignDomain,
    ke: &'a ElementStiffness,
    moduli: Vec<f64>,
    fixed: &'a [bool],
}

impl<'a> StiffnessOperator<'a> {
    pub fn new(domain: &'a DesignDomain, ke: &'a ElementStiffness, moduli: Vec<f64>, dofs: &'a DofMap) -> Self {
        Self {
            domain,
            ke,
            moduli,
            fixed: dofs.fixed_mask(),
        }
    }

    pub fn moduli(&self) -> &[f64] {
        &self.moduli
    }

    /// `out = K u` on free DOFs, zero on fixed DOFs.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let grid = self.domain.grid();
        let ke = &self.ke.0;
        let mut e = 0;
        let mut nodes_dof = [0usize; 8];
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let nodes = self.domain.element_nodes(i, j, k);
                    let em = self.moduli[e];
                    let mut acc = [0.0f64; 24];
                    for (a, n) in nodes.iter().enumerate() {
                        let base = 3 * n;
                        nodes_dof[a] = base;
                        for c in 0..3 {
                            let uc = em * u[base + c];
                            // KE is symmetric: column 3a+c equals row 3a+c
                            let col = &ke[3 * a + c];
                            for r in 0..24 {
                                acc[r] += col[r] * uc;
                            }
                        }
                    }
                    for (a, &base) in nodes_dof.iter().enumerate() {
                        out[base] += acc[3 * a];
                        out[base + 1] += acc[3 * a + 1];
                        out[base + 2] += acc[3 * a + 2];
                    }
                    e += 1;
                }
            }
        }
        for (o, &f) in out.iter_mut().zip(self.fixed) {
            if f {
                *o = 0.0;
            }
        }
    }

    /// Diagonal of `K`; fixed DOFs get 1.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.domain.dof_count()];
        let grid = self.domain.grid();
        let mut e = 0;
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    for (a, n) in self.domain.element_nodes(i, j, k).iter().enumerate() {
                        for c in 0..3 {
                            diag[3 * n + c] += self.moduli[e] * self.ke.0[3 * a + c][3 * a + c];
                        }
                    }
                    e += 1;
                }
            }
        }
        for (d, &f) in diag.iter_mut().zip(self.fixed) {
            if f {
                *d = 1.0;
            }
        }
        diag
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Finite-element model of one domain and material.
#[derive(Clone, Debug)]
pub struct Fea {
    domain: DesignDomain,
    material: MaterialModel,
    ke: ElementStiffness,
}

impl Fea {
    pub fn new(domain: DesignDomain, material: MaterialModel) -> Result<Self> {
        material.validate()?;
        let ke = element_stiffness(&material, domain.h());
        Ok(Self { domain, material, ke })
    }

    pub fn domain(&self) -> &DesignDomain {
        &self.domain
    }

    pub fn material(&self) -> &MaterialModel {
        &self.material
    }

    pub fn element_stiffness(&self) -> &ElementStiffness {
        &self.ke
    }

    pub fn moduli(&self, x_phys: &DensityField) -> Vec<f64> {
        x_phys.values().iter().map(|&x| modulus_unchecked(x, &self.material)).collect()
    }

    pub fn operator<'a>(&'a self, x_phys: &DensityField, dofs: &'a DofMap) -> StiffnessOperator<'a> {
        StiffnessOperator::new(&self.domain, &self.ke, self.moduli(x_phys), dofs)
    }

    /// Solves `K(x) u = f` on the free DOFs with Jacobi-preconditioned CG.
    ///
    /// Stops once `||f - K u|| <= tol * ||f||` over free DOFs. `warm_start`
    /// seeds the iteration; its fixed entries are ignored.
    pub fn solve_equilibrium(
        &self,
        x_phys: &DensityField,
        f: &[f64],
        dofs: &DofMap,
        tol: f64,
        warm_start: Option<&[f64]>,
    ) -> Result<Solution> {
        let n = self.domain.dof_count();
        if f.len() != n || x_phys.len() != self.domain.element_count() {
            return Err(Error::Shape {
                expected: format!("{n} DOFs and {} elements", self.domain.element_count()),
                got: format!("{} DOFs and {} elements", f.len(), x_phys.len()),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("force vector has non-finite entries".into()));
        }
        let fixed = dofs.fixed_mask();
        let b: Vec<f64> = f.iter().zip(fixed).map(|(&v, &fx)| if fx { 0.0 } else { v }).collect();
        let b_norm = dot(&b, &b).sqrt();
        if b_norm == 0.0 {
            return Ok(Solution {
                u: vec![0.0; n],
                iterations: 0,
                relative_residual: 0.0,
            });
        }

        let op = self.operator(x_phys, dofs);
        let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
        let mut u = match warm_start {
            Some(w) if w.len() == n => w.iter().zip(fixed).map(|(&v, &fx)| if fx { 0.0 } else { v }).collect(),
            _ => vec![0.0; n],
        };
        let mut r = vec![0.0; n];
        op.apply(&u, &mut r);
        for (ri, bi) in r.iter_mut().zip(&b) {
            *ri = bi - *ri;
        }
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
        let mut p = z.clone();
        let mut q = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let cap = 10 * dofs.free_dof_count().max(1);
        let mut history = Vec::new();
        let mut rel = dot(&r, &r).sqrt() / b_norm;
        history.push(rel);
        let mut iterations = 0;
        while rel > tol {
            if iterations >= cap {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: rel,
                    history,
                });
            }
            op.apply(&p, &mut q);
            let pq = dot(&p, &q);
            if !(pq > 0.0) {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: rel,
                    history,
                });
            }
            let alpha = rz / pq;
            for i in 0..n {
                u[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            iterations += 1;
            rel = dot(&r, &r).sqrt() / b_norm;
            history.push(rel);
        }
        Ok(Solution {
            u,
            iterations,
            relative_residual: rel,
        })
    }

    /// Compliance `u^T K(x) u` and its derivative with respect to each `x_i`.
    pub fn compliance_and_sensitivity(&self, u: &[f64], x_phys: &DensityField) -> (f64, Vec<f64>) {
        let m = &self.material;
        let grid = self.domain.grid();
        let mut c = 0.0;
        let mut dc = Vec::with_capacity(grid.len());
        let xs = x_phys.values();
        let mut ue = [0.0f64; 24];
        let mut e = 0;
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    for (a, n) in self.domain.element_nodes(i, j, k).iter().enumerate() {
                        ue[3 * a..3 * a + 3].copy_from_slice(&u[3 * n..3 * n + 3]);
                    }
                    let energy = self.ke.quadratic_form(&ue);
                    let x = xs[e];
                    c += modulus_unchecked(x, m) * energy;
                    dc.push(-m.penal * x.powf(m.penal - 1.0) * (m.e0 - m.e_min) * energy);
                    e += 1;
                }
            }
        }
        (c, dc)
    }
}
