//! Nesterov-Todd scalings and Jordan-algebra operations per cone block.
//!
//! Vectors over the cone part are handled blockwise. Every operation keeps
//! the scaled svec convention of the parent module, under which the adjoint
//! identities `W'(svec u) = svec(R mat(u) R')` etc. hold exactly.

use nalgebra::DMatrix;

use super::{svec_to_mat, Cone, SQRT2};

/// One cone block's NT scaling at the current iterate.
pub enum BlockScaling {
    Nonneg {
        /// `w_j = sqrt(x_j / z_j)`.
        w: Vec<f64>,
        /// `lambda_j = sqrt(x_j z_j)`.
        lambda: Vec<f64>,
    },
    Soc {
        eta: f64,
        /// Normalized scaling point, `v' J v = 1`; `H = eta^2 (2vv' - J)`.
        v: Vec<f64>,
        /// Jordan square root of `v`, so `W = eta (2ss' - J)` satisfies
        /// `W^2 = H` and `W z = W^{-1} x = lambda`.
        s: Vec<f64>,
        lambda: Vec<f64>,
    },
    Psd {
        /// `R` with `W u = svec(R' mat(u) R)`.
        r: DMatrix<f64>,
        r_inv: DMatrix<f64>,
        /// `W W'` as a matrix factor: `H u = svec(wm mat(u) wm)`.
        wm: DMatrix<f64>,
        /// Scaled point is diagonal: `mat(lambda) = diag`.
        lambda: Vec<f64>,
    },
}

pub struct Scaling {
    pub blocks: Vec<BlockScaling>,
    /// Scaled point in full-length coordinates, zero on free positions;
    /// `lambda'lambda = x'z`.
    pub lambda: Vec<f64>,
}

/// Fails (returns None) only when a block is numerically outside its cone,
/// which the solver reports as a numerical problem.
pub fn compute(cones: &[Cone], x: &[f64], z: &[f64]) -> Option<Scaling> {
    let mut blocks = Vec::new();
    let mut lambda = vec![0.0; x.len()];
    let mut off = 0;
    for cone in cones {
        let d = cone.dim();
        let (xs, zs) = (&x[off..off + d], &z[off..off + d]);
        match cone {
            Cone::Free(_) => {}
            Cone::Nonneg(_) => {
                let mut w = Vec::with_capacity(d);
                let mut lam = Vec::with_capacity(d);
                for k in 0..d {
                    if xs[k] <= 0.0 || zs[k] <= 0.0 {
                        return None;
                    }
                    w.push((xs[k] / zs[k]).sqrt());
                    lam.push((xs[k] * zs[k]).sqrt());
                }
                lambda[off..off + d].copy_from_slice(&lam);
                blocks.push(BlockScaling::Nonneg { w, lambda: lam });
            }
            Cone::Soc(_) => {
                let rx = jdet_soc(xs);
                let rz = jdet_soc(zs);
                if rx <= 0.0 || rz <= 0.0 || xs[0] <= 0.0 || zs[0] <= 0.0 {
                    return None;
                }
                let (rx, rz) = (rx.sqrt(), rz.sqrt());
                let xb: Vec<f64> = xs.iter().map(|v| v / rx).collect();
                let zb: Vec<f64> = zs.iter().map(|v| v / rz).collect();
                let dot: f64 = xb.iter().zip(&zb).map(|(a, b)| a * b).sum();
                let gamma = ((1.0 + dot) / 2.0).sqrt();
                // v = (xb + J zb) / (2 gamma), so v'Jv = 1.
                let mut v = vec![0.0; d];
                v[0] = (xb[0] + zb[0]) / (2.0 * gamma);
                for k in 1..d {
                    v[k] = (xb[k] - zb[k]) / (2.0 * gamma);
                }
                let eta = (rx / rz).sqrt();
                // Jordan square root of v; det v = 1 gives det s = 1.
                let mut s = vec![0.0; d];
                s[0] = ((v[0] + 1.0) / 2.0).sqrt();
                for k in 1..d {
                    s[k] = v[k] / (2.0 * s[0]);
                }
                let lam = apply_soc_w(eta, &s, zs);
                lambda[off..off + d].copy_from_slice(&lam);
                blocks.push(BlockScaling::Soc {
                    eta,
                    v,
                    s,
                    lambda: lam,
                });
            }
            Cone::Psd(side) => {
                let side = *side;
                let xm = svec_to_mat(xs, side);
                let zm = svec_to_mat(zs, side);
                let lx = factor_spd(&xm)?;
                let lz = factor_spd(&zm)?;
                // SVD of Lz' Lx gives R = Lx V S^{-1/2}, Rinv = S^{-1/2} U' Lz'.
                let prod = lz.transpose() * &lx;
                let svd = prod.svd(true, true);
                let u = svd.u.as_ref()?;
                let vt = svd.v_t.as_ref()?;
                let mut s = svd.singular_values.clone();
                for v in s.iter_mut() {
                    if *v <= 0.0 {
                        return None;
                    }
                }
                let s_inv_sqrt = DMatrix::from_diagonal(&s.map(|v| 1.0 / v.sqrt()));
                let r = &lx * vt.transpose() * &s_inv_sqrt;
                let r_inv = &s_inv_sqrt * u.transpose() * lz.transpose();
                let wm = &r * r.transpose();
                let lam: Vec<f64> = s.iter().copied().collect();
                // svec of diag(lam).
                let mut k = 0;
                for q in 0..side {
                    for p in q..side {
                        if p == q {
                            lambda[off + k] = lam[q];
                        }
                        k += 1;
                    }
                }
                blocks.push(BlockScaling::Psd {
                    r,
                    r_inv,
                    wm,
                    lambda: lam,
                });
            }
        }
        off += d;
    }
    Some(Scaling { blocks, lambda })
}

/// Cholesky with a symmetric-eigendecomposition fallback for nearly singular
/// iterates; only the factor property `L L' = A` is used downstream.
fn factor_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.l());
    }
    let eig = a.clone().symmetric_eigen();
    let floor = 1e-14 * (1.0 + eig.eigenvalues.amax());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&vals.map(|v| v.sqrt())))
}

fn jdet_soc(x: &[f64]) -> f64 {
    x[0] * x[0] - x[1..].iter().map(|v| v * v).sum::<f64>()
}

/// `W u = eta (2 s (s'u) - J u)` with `J = diag(1, -I)`, for unit-det `s`.
fn apply_soc_w(eta: f64, s: &[f64], u: &[f64]) -> Vec<f64> {
    let su: f64 = s.iter().zip(u).map(|(a, b)| a * b).sum();
    let mut out = Vec::with_capacity(u.len());
    out.push(eta * (2.0 * s[0] * su - u[0]));
    for k in 1..u.len() {
        out.push(eta * (2.0 * s[k] * su + u[k]));
    }
    out
}

/// `W^{-1} u = (1/eta) (2 (Js)(s'Ju) - J u)`; W is symmetric per block.
fn apply_soc_w_inv(eta: f64, s: &[f64], u: &[f64]) -> Vec<f64> {
    let mut sju = s[0] * u[0];
    for k in 1..u.len() {
        sju -= s[k] * u[k];
    }
    let mut out = Vec::with_capacity(u.len());
    out.push((2.0 * s[0] * sju - u[0]) / eta);
    for k in 1..u.len() {
        out.push((-2.0 * s[k] * sju + u[k]) / eta);
    }
    out
}

/// `H u = eta^2 (2 v (v'u) - J u)`, the squared scaling in one pass.
fn apply_soc_h(eta: f64, v: &[f64], u: &[f64]) -> Vec<f64> {
    let vu: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    let e2 = eta * eta;
    let mut out = Vec::with_capacity(u.len());
    out.push(e2 * (2.0 * v[0] * vu - u[0]));
    for k in 1..u.len() {
        out.push(e2 * (2.0 * v[k] * vu + u[k]));
    }
    out
}

impl Scaling {
    fn for_each_block(
        &self,
        cones: &[Cone],
        mut f: impl FnMut(&BlockScaling, usize, usize),
    ) {
        let mut off = 0;
        let mut b = 0;
        for cone in cones {
            let d = cone.dim();
            if !matches!(cone, Cone::Free(_)) {
                f(&self.blocks[b], off, d);
                b += 1;
            }
            off += d;
        }
    }

    /// `out = W' u` (blockwise; free positions copied unchanged are not
    /// expected here, inputs are cone-only full-length vectors with zeros on
    /// free positions by construction).
    pub fn apply_wt(&self, cones: &[Cone], u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        self.for_each_block(cones, |blk, off, d| {
            let us = &u[off..off + d];
            let res = match blk {
                BlockScaling::Nonneg { w, .. } => w.iter().zip(us).map(|(w, u)| w * u).collect(),
                BlockScaling::Soc { eta, s, .. } => apply_soc_w(*eta, s, us),
                BlockScaling::Psd { r, .. } => {
                    let side = r.nrows();
                    let m = svec_to_mat(us, side);
                    sym_svec(&(r * m * r.transpose()))
                }
            };
            out[off..off + d].copy_from_slice(&res);
        });
        out
    }

    /// `out = W u`.
    pub fn apply_w(&self, cones: &[Cone], u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        self.for_each_block(cones, |blk, off, d| {
            let us = &u[off..off + d];
            let res = match blk {
                BlockScaling::Nonneg { w, .. } => w.iter().zip(us).map(|(w, u)| w * u).collect(),
                BlockScaling::Soc { eta, s, .. } => apply_soc_w(*eta, s, us),
                BlockScaling::Psd { r, .. } => {
                    let side = r.nrows();
                    let m = svec_to_mat(us, side);
                    sym_svec(&(r.transpose() * m * r))
                }
            };
            out[off..off + d].copy_from_slice(&res);
        });
        out
    }

    /// `out = W^{-T} u`.
    pub fn apply_w_inv_t(&self, cones: &[Cone], u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        self.for_each_block(cones, |blk, off, d| {
            let us = &u[off..off + d];
            let res = match blk {
                BlockScaling::Nonneg { w, .. } => w.iter().zip(us).map(|(w, u)| u / w).collect(),
                BlockScaling::Soc { eta, s, .. } => apply_soc_w_inv(*eta, s, us),
                BlockScaling::Psd { r_inv, .. } => {
                    let side = r_inv.nrows();
                    let m = svec_to_mat(us, side);
                    sym_svec(&(r_inv * m * r_inv.transpose()))
                }
            };
            out[off..off + d].copy_from_slice(&res);
        });
        out
    }

    /// `out = H u = W W' u`.
    pub fn apply_h(&self, cones: &[Cone], u: &[f64]) -> Vec<f64> {
        let mut out = u.to_vec();
        self.for_each_block(cones, |blk, off, d| {
            let us = &u[off..off + d];
            let res: Vec<f64> = match blk {
                BlockScaling::Nonneg { w, .. } => {
                    w.iter().zip(us).map(|(w, u)| w * w * u).collect()
                }
                BlockScaling::Soc { eta, v, .. } => apply_soc_h(*eta, v, us),
                BlockScaling::Psd { wm, .. } => {
                    let side = wm.nrows();
                    let m = svec_to_mat(us, side);
                    sym_svec(&(wm * m * wm))
                }
            };
            out[off..off + d].copy_from_slice(&res);
        });
        out
    }

    /// Jordan product `lambda o lambda`, blockwise against the scaled point.
    pub fn lambda_sq(&self, cones: &[Cone], out: &mut [f64]) {
        self.for_each_block(cones, |blk, off, d| match blk {
            BlockScaling::Nonneg { lambda, .. } => {
                for k in 0..d {
                    out[off + k] = lambda[k] * lambda[k];
                }
            }
            BlockScaling::Soc { lambda, .. } => {
                let dot: f64 = lambda.iter().map(|v| v * v).sum();
                out[off] = dot;
                for k in 1..d {
                    out[off + k] = 2.0 * lambda[0] * lambda[k];
                }
            }
            BlockScaling::Psd { lambda, .. } => {
                let side = lambda.len();
                let mut k = 0;
                for q in 0..side {
                    for p in q..side {
                        out[off + k] = if p == q { lambda[q] * lambda[q] } else { 0.0 };
                        k += 1;
                    }
                }
            }
        });
    }

    /// Identity element scaled by `mu`, written into cone positions.
    pub fn mu_e(cones: &[Cone], mu: f64, out: &mut [f64]) {
        let mut off = 0;
        for cone in cones {
            let d = cone.dim();
            match cone {
                Cone::Free(_) => {}
                Cone::Nonneg(_) => {
                    for k in 0..d {
                        out[off + k] += mu;
                    }
                }
                Cone::Soc(_) => out[off] += mu,
                Cone::Psd(side) => {
                    let mut k = 0;
                    for q in 0..*side {
                        for p in q..*side {
                            if p == q {
                                out[off + k] += mu;
                            }
                            k += 1;
                        }
                    }
                }
            }
            off += d;
        }
    }

    /// Jordan product `a o b` of two vectors in scaled coordinates.
    pub fn jordan_product(&self, cones: &[Cone], a: &[f64], b: &[f64], out: &mut [f64]) {
        self.for_each_block(cones, |blk, off, d| {
            let (av, bv) = (&a[off..off + d], &b[off..off + d]);
            match blk {
                BlockScaling::Nonneg { .. } => {
                    for k in 0..d {
                        out[off + k] = av[k] * bv[k];
                    }
                }
                BlockScaling::Soc { .. } => {
                    let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                    out[off] = dot;
                    for k in 1..d {
                        out[off + k] = av[0] * bv[k] + bv[0] * av[k];
                    }
                }
                BlockScaling::Psd { r, .. } => {
                    let side = r.nrows();
                    let am = svec_to_mat(av, side);
                    let bm = svec_to_mat(bv, side);
                    let sym = (&am * &bm + &bm * &am) * 0.5;
                    let packed = sym_svec(&sym);
                    out[off..off + d].copy_from_slice(&packed);
                }
            }
        });
    }

    /// Solves `lambda o u = d` blockwise (lambda is the scaled point, which
    /// is diagonal for PSD blocks).
    pub fn lambda_solve(&self, cones: &[Cone], d_in: &[f64], out: &mut [f64]) {
        self.for_each_block(cones, |blk, off, dim| {
            let ds = &d_in[off..off + dim];
            match blk {
                BlockScaling::Nonneg { lambda, .. } => {
                    for k in 0..dim {
                        out[off + k] = ds[k] / lambda[k];
                    }
                }
                BlockScaling::Soc { lambda, .. } => {
                    let l0 = lambda[0];
                    let det = l0 * l0 - lambda[1..].iter().map(|v| v * v).sum::<f64>();
                    let l1d: f64 = lambda[1..].iter().zip(&ds[1..]).map(|(a, b)| a * b).sum();
                    let u0 = (l0 * ds[0] - l1d) / det;
                    out[off] = u0;
                    for k in 1..dim {
                        out[off + k] = (ds[k] - u0 * lambda[k]) / l0;
                    }
                }
                BlockScaling::Psd { lambda, .. } => {
                    let side = lambda.len();
                    let mut k = 0;
                    for q in 0..side {
                        for p in q..side {
                            out[off + k] = 2.0 * ds[k] / (lambda[p] + lambda[q]);
                            k += 1;
                        }
                    }
                }
            }
        });
    }

    /// Largest `t` with `lambda + t d` still in the cone, blockwise minimum.
    pub fn max_step(&self, cones: &[Cone], d: &[f64]) -> f64 {
        let mut t = f64::INFINITY;
        self.for_each_block(cones, |blk, off, dim| {
            let ds = &d[off..off + dim];
            let blk_t = match blk {
                BlockScaling::Nonneg { lambda, .. } => {
                    let mut t = f64::INFINITY;
                    for k in 0..dim {
                        if ds[k] < 0.0 {
                            t = t.min(-lambda[k] / ds[k]);
                        }
                    }
                    t
                }
                BlockScaling::Soc { lambda, .. } => soc_max_step(lambda, ds),
                BlockScaling::Psd { lambda, .. } => {
                    let side = lambda.len();
                    // min eigenvalue of Lam^{-1/2} D Lam^{-1/2}.
                    let dm = svec_to_mat(ds, side);
                    let mut scaled = DMatrix::zeros(side, side);
                    for p in 0..side {
                        for q in 0..side {
                            scaled[(p, q)] = dm[(p, q)] / (lambda[p] * lambda[q]).sqrt();
                        }
                    }
                    let min_eig = scaled.symmetric_eigen().eigenvalues.min();
                    if min_eig < 0.0 {
                        -1.0 / min_eig
                    } else {
                        f64::INFINITY
                    }
                }
            };
            t = t.min(blk_t);
        });
        t
    }
}

/// Largest step keeping `lambda + t d` in the second-order cone.
fn soc_max_step(lambda: &[f64], d: &[f64]) -> f64 {
    // Roots of det(lambda + t d) = 0 with positivity of the first component.
    let a = jdet_soc(d);
    let b = 2.0 * (lambda[0] * d[0] - lambda[1..].iter().zip(&d[1..]).map(|(x, y)| x * y).sum::<f64>());
    let c = jdet_soc(lambda);
    debug_assert!(c > 0.0);
    let mut t = if d[0] < 0.0 { -lambda[0] / d[0] } else { f64::INFINITY };
    let roots: Vec<f64> = if a.abs() < 1e-300 {
        if b.abs() < 1e-300 {
            vec![]
        } else {
            vec![-c / b]
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            vec![]
        } else {
            let sq = disc.sqrt();
            // Numerically stable pair.
            let q = -0.5 * (b + b.signum() * sq);
            let mut r = vec![q / a];
            if q != 0.0 {
                r.push(c / q);
            }
            r
        }
    };
    for root in roots {
        if root > 0.0 {
            t = t.min(root);
        }
    }
    t
}

/// svec of a (numerically) symmetric matrix, symmetrizing first.
pub fn sym_svec(m: &DMatrix<f64>) -> Vec<f64> {
    let side = m.nrows();
    let mut out = Vec::with_capacity(side * (side + 1) / 2);
    for q in 0..side {
        for p in q..side {
            let v = 0.5 * (m[(p, q)] + m[(q, p)]);
            out.push(if p == q { v } else { SQRT2 * v });
        }
    }
    out
}
