use nalgebra::{DMatrix, DVector, Matrix6, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topo3d::domain::{build_domain, fixed_dofs_for_case, BcCase, DesignDomain, DofMap};
use topo3d::fea::{element_stiffness, Fea, MaterialModel};
use topo3d::field::DensityField;

fn isotropic(nu: f64) -> Matrix6<f64> {
    let l = nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let g = 1.0 / (2.0 * (1.0 + nu));
    let mut d = Matrix6::zeros();
    for r in 0..3 {
        for c in 0..3 {
            d[(r, c)] = l;
        }
        d[(r, r)] += 2.0 * g;
        d[(r + 3, r + 3)] = g;
    }
    d
}

/// Hexahedron stiffness by 3-point Gauss quadrature over physical node
/// coordinates, with the Jacobian formed explicitly.
fn stiffness_3pt(nu: f64, h: f64) -> SMatrix<f64, 24, 24> {
    let corners = [[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.], [0., 0., 1.], [1., 0., 1.], [1., 1., 1.], [0., 1., 1.]];
    let pts = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let wts = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let d = isotropic(nu);
    let mut ke = SMatrix::<f64, 24, 24>::zeros();
    for (a, &xa) in pts.iter().enumerate() {
        for (b, &xb) in pts.iter().enumerate() {
            for (c, &xc) in pts.iter().enumerate() {
                let xi = [xa, xb, xc];
                let mut dn = SMatrix::<f64, 3, 8>::zeros();
                for (n, cn) in corners.iter().enumerate() {
                    let s: Vec<f64> = cn.iter().map(|&v| 2.0 * v - 1.0).collect();
                    let f: Vec<f64> = (0..3).map(|q| 0.5 * (1.0 + s[q] * xi[q])).collect();
                    dn[(0, n)] = 0.5 * s[0] * f[1] * f[2];
                    dn[(1, n)] = f[0] * 0.5 * s[1] * f[2];
                    dn[(2, n)] = f[0] * f[1] * 0.5 * s[2];
                }
                let mut x = SMatrix::<f64, 8, 3>::zeros();
                for (n, cn) in corners.iter().enumerate() {
                    for q in 0..3 {
                        x[(n, q)] = cn[q] * h;
                    }
                }
                let jac = dn * x;
                let grad = jac.try_inverse().unwrap() * dn;
                let mut bm = SMatrix::<f64, 6, 24>::zeros();
                for n in 0..8 {
                    let (gx, gy, gz) = (grad[(0, n)], grad[(1, n)], grad[(2, n)]);
                    bm[(0, 3 * n)] = gx;
                    bm[(1, 3 * n + 1)] = gy;
                    bm[(2, 3 * n + 2)] = gz;
                    bm[(3, 3 * n)] = gy;
                    bm[(3, 3 * n + 1)] = gx;
                    bm[(4, 3 * n + 1)] = gz;
                    bm[(4, 3 * n + 2)] = gy;
                    bm[(5, 3 * n)] = gz;
                    bm[(5, 3 * n + 2)] = gx;
                }
                ke += bm.transpose() * d * bm * (jac.determinant() * wts[a] * wts[b] * wts[c]);
            }
        }
    }
    ke
}

#[test]
fn element_stiffness_matches_independent_quadrature() {
    for (nu, h) in [(0.3, 1.0), (0.3, 1.0 / 12.0), (0.2, 0.5)] {
        let ke = element_stiffness(&MaterialModel { nu, ..Default::default() }, h);
        let oracle = stiffness_3pt(nu, h);
        let scale = oracle.amax();
        for r in 0..24 {
            for c in 0..24 {
                assert!((ke.get(r, c) - oracle[(r, c)]).abs() < 1e-12 * scale, "nu {nu} h {h} ({r},{c})");
            }
        }
    }
}

#[test]
fn constant_strain_energy_is_exact() {
    let h = 0.5;
    let ke = element_stiffness(&MaterialModel::default(), h);
    let d = isotropic(0.3);
    let corners = [[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.], [0., 0., 1.], [1., 0., 1.], [1., 1., 1.], [0., 1., 1.]];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let a: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        let mut ue = [0.0; 24];
        for (n, cn) in corners.iter().enumerate() {
            for r in 0..3 {
                ue[3 * n + r] = (0..3).map(|c| a[r][c] * cn[c] * h).sum();
            }
        }
        let eps = nalgebra::Vector6::new(a[0][0], a[1][1], a[2][2], a[0][1] + a[1][0], a[1][2] + a[2][1], a[2][0] + a[0][2]);
        let expected = (eps.transpose() * d * eps)[0] * h * h * h;
        assert!((ke.quadratic_form(&ue) - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }
}

/// Direct assembly of the global stiffness, reduced to the free DOFs.
fn dense_solution(domain: &DesignDomain, x: &DensityField, f: &[f64], dofs: &DofMap, material: &MaterialModel) -> Vec<f64> {
    let ke = element_stiffness(material, domain.h());
    let n = domain.dof_count();
    let mut k = DMatrix::<f64>::zeros(n, n);
    let g = domain.grid();
    let mut e = 0;
    for kk in 0..g.nz {
        for j in 0..g.ny {
            for i in 0..g.nx {
                let modulus = material.e_min + (material.e0 - material.e_min) * x.values()[e].powf(material.penal);
                let nodes = domain.element_nodes(i, j, kk);
                for r in 0..24 {
                    for c in 0..24 {
                        k[(3 * nodes[r / 3] + r % 3, 3 * nodes[c / 3] + c % 3)] += modulus * ke.get(r, c);
                    }
                }
                e += 1;
            }
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| !dofs.is_fixed(i)).collect();
    let kf = DMatrix::from_fn(free.len(), free.len(), |r, c| k[(free[r], free[c])]);
    let ff = DVector::from_iterator(free.len(), free.iter().map(|&i| f[i]));
    let uf = kf.cholesky().expect("reduced stiffness is positive definite").solve(&ff);
    let mut u = vec![0.0; n];
    for (slot, &i) in free.iter().enumerate() {
        u[i] = uf[slot];
    }
    u
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn matrix_free_pcg_matches_dense_solve() {
    let material = MaterialModel::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [1 + (seed % 3) as usize, 1 + (seed / 3 % 3) as usize, 1 + (seed / 9 % 3) as usize];
        let domain = build_domain(dims[0], dims[1], dims[2], dims[0] as f64, dims[1] as f64, dims[2] as f64).unwrap();
        let dofs = fixed_dofs_for_case(BcCase::new(1).unwrap(), &domain);
        let x: Vec<f64> = (0..domain.element_count()).map(|_| rng.gen_range(0.05..1.0)).collect();
        let x = DensityField::new(domain.grid(), x).unwrap();
        let f: Vec<f64> = (0..domain.dof_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fea = Fea::new(domain, material).unwrap();
        let pcg = fea.solve_equilibrium(&x, &f, &dofs, 1e-13, None).unwrap();
        let dense = dense_solution(&domain, &x, &f, &dofs, &material);
        let err = rel_l2(&pcg.u, &dense);
        assert!(err < 1e-8, "seed {seed} grid {dims:?}: relative error {err:e}");
    }
}

#[test]
fn sensitivity_matches_central_differences() {
    let domain = build_domain(2, 2, 2, 2.0, 2.0, 2.0).unwrap();
    let dofs = fixed_dofs_for_case(BcCase::new(1).unwrap(), &domain);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base: Vec<f64> = (0..8).map(|_| rng.gen_range(0.3..0.9)).collect();
    let f: Vec<f64> = (0..domain.dof_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fea = Fea::new(domain, MaterialModel::default()).unwrap();
    let compliance = |x: &[f64]| {
        let field = DensityField::new(domain.grid(), x.to_vec()).unwrap();
        let s = fea.solve_equilibrium(&field, &f, &dofs, 1e-14, None).unwrap();
        fea.compliance_and_sensitivity(&s.u, &field)
    };
    let (_, dc) = compliance(&base);
    let step = 1e-5;
    for e in 0..8 {
        let mut xp = base.clone();
        let mut xm = base.clone();
        xp[e] += step;
        xm[e] -= step;
        let fd = (compliance(&xp).0 - compliance(&xm).0) / (2.0 * step);
        let rel = (fd - dc[e]).abs() / dc[e].abs();
        assert!(rel < 1e-4, "element {e}: analytic {} fd {fd} rel {rel:e}", dc[e]);
    }
}

#[test]
fn compliance_equals_work_of_loads() {
    let domain = build_domain(3, 2, 2, 3.0, 2.0, 2.0).unwrap();
    let dofs = fixed_dofs_for_case(BcCase::new(2).unwrap(), &domain);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = DensityField::new(domain.grid(), (0..12).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
    let f: Vec<f64> = (0..domain.dof_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fea = Fea::new(domain, MaterialModel::default()).unwrap();
    let s = fea.solve_equilibrium(&x, &f, &dofs, 1e-13, None).unwrap();
    let (c, _) = fea.compliance_and_sensitivity(&s.u, &x);
    let work: f64 = f.iter().zip(&s.u).enumerate().filter(|(i, _)| !dofs.is_fixed(*i)).map(|(_, (a, b))| a * b).sum();
    assert!((c - work).abs() < 1e-9 * work.abs());
}
