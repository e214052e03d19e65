//! Uncertainty set descriptions and exact moment computation.
//!
//! Three shapes appear in robust counterparts: ellipsoids (S-lemma), bounded
//! polyhedra (LP duality) and general basic closed semialgebraic sets
//! (sum-of-squares certificates). Moments of monomials over ellipsoids are
//! computed in closed form for the infeasibility test objective.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::poly::{Block, Monomial, Polynomial, PolynomialVector, Var};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("sigma must be symmetric positive definite")]
    NotPositiveDefinite,
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("load scatter needs at least one positive load")]
    NoPositiveLoads,
    #[error("correlation {0} makes the correlation matrix indefinite")]
    BadCorrelation(f64),
    #[error("moment exponent has odd entry times symmetric domain only under expansion")]
    Internal,
}

/// Ellipsoid `{ z : (z - center)' Sigma (z - center) <= radius }`.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    center: DVector<f64>,
    sigma: DMatrix<f64>,
    radius: f64,
    // Cached factor T with T T' = radius * Sigma^{-1}; maps the unit ball onto
    // the centered ellipsoid.
    factor: DMatrix<f64>,
    log_det_factor: f64,
}

impl Ellipsoid {
    pub fn new(
        center: DVector<f64>,
        sigma: DMatrix<f64>,
        radius: f64,
    ) -> Result<Ellipsoid, UncertaintyError> {
        let n = center.len();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(UncertaintyError::DimensionMismatch {
                expected: n,
                got: sigma.nrows(),
            });
        }
        if !(radius > 0.0) {
            return Err(UncertaintyError::BadRadius(radius));
        }
        let sym_err = (&sigma - sigma.transpose()).abs().max();
        if sym_err > 1e-10 * sigma.abs().max().max(1.0) {
            return Err(UncertaintyError::NotPositiveDefinite);
        }
        let eig = sigma.clone().symmetric_eigen();
        let mut log_det_factor = 0.0;
        for i in 0..n {
            let ev = eig.eigenvalues[i];
            if ev <= 0.0 {
                return Err(UncertaintyError::NotPositiveDefinite);
            }
            // ln of the singular value radius^{1/2} * ev^{-1/2} of T.
            log_det_factor += 0.5 * (radius.ln() - ev.ln());
        }
        // T = sqrt(radius) * Q ev^{-1/2} Q'.
        let mut scaled = eig.eigenvectors.clone();
        for j in 0..n {
            let s = radius.sqrt() / eig.eigenvalues[j].sqrt();
            scaled.column_mut(j).scale_mut(s);
        }
        let factor = &scaled * eig.eigenvectors.transpose();
        Ok(Ellipsoid {
            center,
            sigma,
            radius,
            factor,
            log_det_factor,
        })
    }

    /// Unit ball in `n` dimensions.
    pub fn unit_ball(n: usize) -> Ellipsoid {
        Ellipsoid::new(DVector::zeros(n), DMatrix::identity(n, n), 1.0).unwrap()
    }

    /// Load-scatter ellipsoid: one coordinate per positive load, with
    /// `sigma_k = 1 / (w * load_k)^2` on the diagonal. When `correlation` is
    /// nonzero, `Sigma = D^{1/2} R D^{1/2}` with `R` carrying the given
    /// off-diagonal value.
    pub fn load_scatter(
        loads: &[f64],
        w: f64,
        correlation: f64,
    ) -> Result<Ellipsoid, UncertaintyError> {
        let active: Vec<f64> = loads.iter().copied().filter(|&p| p > 0.0).collect();
        let n = active.len();
        if n == 0 {
            return Err(UncertaintyError::NoPositiveLoads);
        }
        if !(w > 0.0) {
            return Err(UncertaintyError::BadRadius(w));
        }
        if correlation >= 1.0 || (n > 1 && correlation <= -1.0 / (n as f64 - 1.0)) {
            return Err(UncertaintyError::BadCorrelation(correlation));
        }
        let sd: Vec<f64> = active.iter().map(|&p| 1.0 / (w * p)).collect();
        let mut sigma = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let r = if i == j { 1.0 } else { correlation };
                sigma[(i, j)] = sd[i] * sd[j] * r;
            }
        }
        Ellipsoid::new(DVector::zeros(n), sigma, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Affine factor mapping the unit ball onto the ellipsoid:
    /// `z = center + factor * u`, `||u|| <= 1`.
    pub fn ball_factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        let d = z - &self.center;
        let q = (&self.sigma * &d).dot(&d);
        q <= self.radius + tol
    }

    /// The defining inequality `radius - (z-c)' Sigma (z-c) >= 0` as a
    /// polynomial over the given block.
    pub fn membership_polynomial(&self, block: Block) -> Polynomial {
        let n = self.dim();
        let mut p = Polynomial::constant(self.radius);
        for i in 0..n {
            for j in 0..n {
                let s = self.sigma[(i, j)];
                if s == 0.0 {
                    continue;
                }
                let vi = Polynomial::var(Var::new(block, i))
                    .add(&Polynomial::constant(-self.center[i]));
                let vj = Polynomial::var(Var::new(block, j))
                    .add(&Polynomial::constant(-self.center[j]));
                p = p.sub(&vi.mul(&vj).scale(s));
            }
        }
        p
    }

    /// Lebesgue volume.
    pub fn volume(&self) -> f64 {
        (self.log_det_factor + log_ball_volume(self.dim())).exp()
    }

    /// Exact moment `int_E z^alpha dz` of a monomial over the ellipsoid.
    ///
    /// Change of variables to the unit ball plus the classical Gamma-function
    /// formula for ball moments; everything that can overflow runs in
    /// log space.
    pub fn moment(&self, alpha: &[u32]) -> Result<f64, UncertaintyError> {
        let n = self.dim();
        if alpha.len() != n {
            return Err(UncertaintyError::DimensionMismatch {
                expected: n,
                got: alpha.len(),
            });
        }
        let centered = self.center.amax() == 0.0;
        let diagonal = {
            let mut off = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off = off.max(self.factor[(i, j)].abs());
                    }
                }
            }
            off <= 1e-14 * self.factor.abs().max().max(1.0)
        };
        if centered && diagonal {
            // z_k = T_kk u_k: a single ball monomial.
            if alpha.iter().any(|&a| a % 2 == 1) {
                return Ok(0.0);
            }
            let mut log_coef = self.log_det_factor;
            for k in 0..n {
                log_coef += alpha[k] as f64 * self.factor[(k, k)].abs().ln();
            }
            let sign: f64 = (0..n)
                .map(|k| self.factor[(k, k)].signum().powi(alpha[k] as i32))
                .product();
            return Ok(sign * log_ball_moment(alpha).map_or(0.0, |lm| (log_coef + lm).exp()));
        }
        // General case: expand prod_k (c_k + (T u)_k)^{alpha_k} symbolically.
        let block = Block::Uncertainty;
        let mut expanded = Polynomial::constant(1.0);
        for k in 0..n {
            if alpha[k] == 0 {
                continue;
            }
            let mut coord = Polynomial::constant(self.center[k]);
            for j in 0..n {
                let t = self.factor[(k, j)];
                if t != 0.0 {
                    coord = coord.add(&Polynomial::var(Var::new(block, j)).scale(t));
                }
            }
            expanded = expanded.mul(&coord.pow(alpha[k]));
        }
        let mut acc = 0.0;
        for (m, c) in expanded.terms() {
            let mut beta = vec![0u32; n];
            for &(v, p) in m.factors() {
                beta[v.index] = p;
            }
            if let Some(lm) = log_ball_moment(&beta) {
                acc += c * (self.log_det_factor + lm).exp();
            }
        }
        Ok(acc)
    }
}

/// `ln Gamma(half / 2)` for positive integer `half`, exact recurrences only.
fn ln_gamma_half(half: u64) -> f64 {
    assert!(half >= 1);
    if half % 2 == 0 {
        // Gamma(m) = (m-1)!
        let m = half / 2;
        (1..m).map(|k| (k as f64).ln()).sum()
    } else {
        // Gamma(m + 1/2) = Gamma(1/2) * prod_{k=1..m} (k - 1/2)
        let m = (half - 1) / 2;
        let ln_sqrt_pi = 0.5 * std::f64::consts::PI.ln();
        ln_sqrt_pi + (1..=m).map(|k| (k as f64 - 0.5).ln()).sum::<f64>()
    }
}

/// `ln int_{B_n} u^beta du`; `None` when the moment vanishes by symmetry.
fn log_ball_moment(beta: &[u32]) -> Option<f64> {
    if beta.iter().any(|&b| b % 2 == 1) {
        return None;
    }
    let n = beta.len() as u64;
    let total: u64 = beta.iter().map(|&b| b as u64).sum();
    let mut ln = (2.0 / (total + n) as f64).ln();
    for &b in beta {
        ln += ln_gamma_half(b as u64 + 1);
    }
    ln -= ln_gamma_half(total + n);
    Some(ln)
}

fn log_ball_volume(n: usize) -> f64 {
    log_ball_moment(&vec![0u32; n]).unwrap()
}

/// Polyhedron `{ z : A z <= b }`.
#[derive(Debug, Clone)]
pub struct Polyhedron {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polyhedron {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Polyhedron, UncertaintyError> {
        if a.nrows() != b.len() {
            return Err(UncertaintyError::DimensionMismatch {
                expected: a.nrows(),
                got: b.len(),
            });
        }
        Ok(Polyhedron { a, b })
    }

    /// Axis-aligned box `lo <= z <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Polyhedron, UncertaintyError> {
        if lo.len() != hi.len() {
            return Err(UncertaintyError::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        let n = lo.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = hi[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo[i];
        }
        Ok(Polyhedron { a, b })
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        let r = &self.a * z - &self.b;
        r.iter().all(|&v| v <= tol)
    }
}

/// Basic closed semialgebraic set `{ v : g_i(v) >= 0, h_j(v) = 0 }`.
#[derive(Debug, Clone, Default)]
pub struct SemialgebraicSet {
    pub inequalities: Vec<Polynomial>,
    pub equalities: Vec<Polynomial>,
}

impl SemialgebraicSet {
    pub fn new(inequalities: Vec<Polynomial>, equalities: Vec<Polynomial>) -> SemialgebraicSet {
        SemialgebraicSet {
            inequalities,
            equalities,
        }
    }

    pub fn contains(&self, at: &crate::poly::Assignment, tol: f64) -> bool {
        self.inequalities
            .iter()
            .all(|g| g.eval(at).map_or(false, |v| v >= -tol))
            && self
                .equalities
                .iter()
                .all(|h| h.eval(at).map_or(false, |v| v.abs() <= tol))
    }

    /// Compactness witness used as the Putinar precondition: every listed
    /// variable must carry negative curvature in some inequality (a ball or
    /// window generator that bounds it).
    pub fn has_ball_or_box(&self, vars: &[Var]) -> bool {
        vars.iter().all(|&v| {
            self.inequalities.iter().any(|g| {
                let sq = Monomial::from_factors(vec![(v, 2)]);
                g.coefficient(&sq) < 0.0
            })
        })
    }
}

/// The shapes a robust counterpart can consume.
#[derive(Debug, Clone)]
pub enum UncertaintySet {
    Ellipsoid(Ellipsoid),
    Polyhedron(Polyhedron),
    Semialgebraic(SemialgebraicSet),
}

impl UncertaintySet {
    /// Generators `g_i >= 0` describing the set over the given block.
    pub fn generators(&self, block: Block) -> PolynomialVector {
        match self {
            UncertaintySet::Ellipsoid(e) => {
                PolynomialVector::new(vec![e.membership_polynomial(block)])
            }
            UncertaintySet::Polyhedron(p) => {
                let mut entries = Vec::with_capacity(p.num_rows());
                for i in 0..p.num_rows() {
                    let mut row = Polynomial::constant(p.b[i]);
                    for j in 0..p.dim() {
                        let c = p.a[(i, j)];
                        if c != 0.0 {
                            row = row.sub(&Polynomial::var(Var::new(block, j)).scale(c));
                        }
                    }
                    entries.push(row);
                }
                PolynomialVector::new(entries)
            }
            UncertaintySet::Semialgebraic(s) => PolynomialVector::new(s.inequalities.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interval_moments() {
        // n = 1, Sigma = 1, r = 1 is the interval [-1, 1].
        let e = Ellipsoid::unit_ball(1);
        assert_relative_eq!(e.moment(&[0]).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(e.moment(&[1]).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(e.moment(&[2]).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(e.moment(&[4]).unwrap(), 2.0 / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn disk_moments() {
        let e = Ellipsoid::unit_ball(2);
        assert_relative_eq!(e.moment(&[0, 0]).unwrap(), std::f64::consts::PI, epsilon = 1e-12);
        assert_relative_eq!(
            e.moment(&[2, 0]).unwrap(),
            std::f64::consts::PI / 4.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            e.moment(&[2, 2]).unwrap(),
            std::f64::consts::PI / 24.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn scaled_ellipse_moment_vs_analytic() {
        // Sigma = diag(1/4, 1/9): semi-axes 2 and 3; area = 6 pi.
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0 / 9.0]));
        let e = Ellipsoid::new(DVector::zeros(2), sigma, 1.0).unwrap();
        assert_relative_eq!(e.volume(), 6.0 * std::f64::consts::PI, epsilon = 1e-10);
        // int z1^2 over the ellipse = a^3 b pi / 4 with a=2, b=3.
        assert_relative_eq!(
            e.moment(&[2, 0]).unwrap(),
            8.0 * 3.0 * std::f64::consts::PI / 4.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn shifted_ellipsoid_moment_matches_monte_carlo() {
        let mut sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5, 1.0]));
        sigma[(0, 1)] = 0.3;
        sigma[(1, 0)] = 0.3;
        let center = DVector::from_vec(vec![0.5, -1.0, 0.25]);
        let e = Ellipsoid::new(center.clone(), sigma, 2.0).unwrap();
        let alphas: [&[u32]; 4] = [&[1, 0, 0], &[2, 0, 0], &[1, 1, 0], &[2, 1, 1]];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_samples = 2_000_000usize;
        let t = e.ball_factor().clone();
        let vol = e.volume();
        let mut sums = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n_samples {
            // Uniform in the unit ball via normalized Gaussian and radius.
            let g: Vec<f64> = (0..3)
                .map(|_| {
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let norm = (g.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
            let r = rng.random::<f64>().powf(1.0 / 3.0);
            let u = DVector::from_vec(g) * (r / norm);
            let z = e.center() + &t * u;
            for (k, alpha) in alphas.iter().enumerate() {
                let v: f64 = (0..3).map(|i| z[i].powi(alpha[i] as i32)).product();
                sums[k] += v;
                sq[k] += v * v;
            }
        }
        for (k, alpha) in alphas.iter().enumerate() {
            let mean = sums[k] / n_samples as f64;
            let var = (sq[k] / n_samples as f64 - mean * mean).max(0.0);
            let est = vol * mean;
            let sd = vol * (var / n_samples as f64).sqrt();
            let exact = e.moment(alpha).unwrap();
            assert!(
                (est - exact).abs() <= 3.0 * sd + 1e-9,
                "alpha {alpha:?}: exact {exact}, MC {est} +- {sd}"
            );
        }
    }

    #[test]
    fn load_scatter_matches_definition() {
        let loads = [0.0, 90.0, 0.0, 100.0, 125.0];
        let e = Ellipsoid::load_scatter(&loads, 0.1, 0.0).unwrap();
        assert_eq!(e.dim(), 3);
        assert_relative_eq!(e.sigma()[(0, 0)], 1.0 / 81.0, epsilon = 1e-12);
        assert_relative_eq!(e.sigma()[(1, 1)], 1.0 / 100.0, epsilon = 1e-12);
        assert_relative_eq!(e.sigma()[(2, 2)], 1.0 / 156.25, epsilon = 1e-12);
        // The axis extreme +-w*load lies on the boundary.
        let z = DVector::from_vec(vec![9.0, 0.0, 0.0]);
        assert!(e.contains(&z, 1e-9));
        assert!(!e.contains(&(z * 1.01), 1e-9));
    }

    #[test]
    fn correlated_scatter_is_positive_definite() {
        let loads = [90.0, 100.0, 125.0];
        let e = Ellipsoid::load_scatter(&loads, 0.1, 1.0 / 9.0).unwrap();
        assert_relative_eq!(
            e.sigma()[(0, 1)],
            (1.0 / 9.0) / (9.0 * 10.0),
            epsilon = 1e-12
        );
        // Rejected when the off-diagonal breaks positive definiteness.
        assert!(Ellipsoid::load_scatter(&loads, 0.1, 1.0).is_err());
    }

    #[test]
    fn polyhedron_box_contains() {
        let p = Polyhedron::from_box(&[-1.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!(p.contains(&DVector::from_vec(vec![0.5, 1.0]), 0.0));
        assert!(!p.contains(&DVector::from_vec(vec![1.5, 1.0]), 1e-9));
    }

    #[test]
    fn semialgebraic_ball_witness() {
        let e = Ellipsoid::unit_ball(2);
        let set = SemialgebraicSet::new(
            vec![e.membership_polynomial(Block::Uncertainty)],
            vec![],
        );
        let vars = [
            Var::new(Block::Uncertainty, 0),
            Var::new(Block::Uncertainty, 1),
        ];
        assert!(set.has_ball_or_box(&vars));
        // A state variable without any bound has no witness.
        assert!(!set.has_ball_or_box(&[Var::new(Block::State, 0)]));
    }

    #[test]
    fn membership_polynomial_matches_contains() {
        let mut sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        sigma[(0, 1)] = 0.25;
        sigma[(1, 0)] = 0.25;
        let e = Ellipsoid::new(DVector::from_vec(vec![0.1, -0.2]), sigma, 1.5).unwrap();
        let g = e.membership_polynomial(Block::Uncertainty);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z = DVector::from_vec(vec![
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
            ]);
            let at = crate::poly::Assignment {
                uncertainty: z.as_slice(),
                ..Default::default()
            };
            let inside = e.contains(&z, 0.0);
            let val = g.eval(&at).unwrap();
            assert_eq!(inside, val >= 0.0, "z = {z:?}, g = {val}");
        }
    }
}
