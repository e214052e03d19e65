//! Two-stage adjustable robust problem model and its reduction pipeline:
//! linearize the equality system in the state, eliminate the state through
//! the resulting affine decision rule, and emit tractable robust counterparts
//! of the remaining constraints under one of three certificates (LP duality
//! for polyhedral sets, the S-lemma for ellipsoids, sum-of-squares weights
//! for general semialgebraic sets).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::conic::{ProgramBuilder, PsdIds, VarIds};
use crate::poly::{
    taylor1, AffineVectorMap, Block, Monomial, PolyError, Polynomial, PolynomialVector, Space, Var,
};
use crate::uncertainty::{Ellipsoid, Polyhedron, SemialgebraicSet, UncertaintySet};

/// Conditioning limit beyond which a linearization Jacobian is treated as
/// rank deficient; conic solves downstream lose meaning past this point.
pub const COND_LIMIT: f64 = 1e10;

/// Eigenvalue tolerance for flagging a quadratic-form matrix as positive
/// semidefinite despite symmetric floating-point noise.
pub const PSD_EIG_TOL: f64 = -1e-9;

#[derive(Debug, Error)]
pub enum AroError {
    #[error("expected {expected} equality constraints (one per state), got {got}")]
    WrongEqualityCount { expected: usize, got: usize },
    #[error("equality {0} mixes control and state variables in one term")]
    SplitViolated(usize),
    #[error("polynomial mentions block {0:?} where it is not allowed")]
    ForeignBlock(Block),
    #[error("control box has {got} bounds for {expected} variables")]
    BadControlBox { expected: usize, got: usize },
    #[error("linearization Jacobian is rank deficient (condition {0:.3e})")]
    RankDeficient(f64),
    #[error("constraint {index} is not quadratic in (y, zeta) after elimination (degree {degree})")]
    DegreeOverflow { index: usize, degree: u32 },
    #[error("uncertainty dimension mismatch: constraint has {expected}, set has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("constraint is not affine in the uncertainty")]
    NotAffineInUncertainty,
    #[error("constraint coefficients are not affine in the controls")]
    NotAffineInControls,
    #[error("certificate level {level} is too small for a degree-{degree} constraint")]
    LevelTooSmall { level: usize, degree: u32 },
    #[error("uncertainty set lacks a ball or box generator for some variable")]
    NotCompact,
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// The two-stage model: minimize `f(y)` over controls `y` in a box (plus
/// optional polynomial cuts), subject to the equality system `L(y, zeta, x)
/// = 0` defining the state response, inequalities `G(y, zeta, x) >= 0`, state
/// membership `x` in the (relaxed) state set, for every `zeta` in the
/// uncertainty set.
#[derive(Debug, Clone)]
pub struct AroProblem {
    pub space: Space,
    pub objective: Polynomial,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
    pub control_ineqs: Vec<Polynomial>,
    /// Equality system with the declared split `L = L1(x, zeta) + L2(y,
    /// zeta)`: no single term mixes state and control variables.
    pub equalities: PolynomialVector,
    pub inequalities: PolynomialVector,
    /// State set described by inequalities `p(x) >= 0`.
    pub state_set: Vec<Polynomial>,
    /// Relaxed per-coordinate state bounds used when generating robust
    /// counterparts; a superset of the state set.
    pub relaxed_state_set: Vec<Polynomial>,
    pub uncertainty: UncertaintySet,
}

impl AroProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: Space,
        objective: Polynomial,
        control_lower: Vec<f64>,
        control_upper: Vec<f64>,
        control_ineqs: Vec<Polynomial>,
        equalities: PolynomialVector,
        inequalities: PolynomialVector,
        state_set: Vec<Polynomial>,
        relaxed_state_set: Vec<Polynomial>,
        uncertainty: UncertaintySet,
    ) -> Result<AroProblem, AroError> {
        let n_x = space.dim(Block::State);
        let n_y = space.dim(Block::Control);
        if equalities.len() != n_x {
            return Err(AroError::WrongEqualityCount {
                expected: n_x,
                got: equalities.len(),
            });
        }
        if control_lower.len() != n_y || control_upper.len() != n_y {
            return Err(AroError::BadControlBox {
                expected: n_y,
                got: control_lower.len().min(control_upper.len()),
            });
        }
        for (i, l) in equalities.entries.iter().enumerate() {
            for (m, _) in l.terms() {
                if m.degree_in(Block::State) > 0 && m.degree_in(Block::Control) > 0 {
                    return Err(AroError::SplitViolated(i));
                }
            }
        }
        for p in state_set.iter().chain(&relaxed_state_set) {
            for v in p.variables() {
                if v.block != Block::State {
                    return Err(AroError::ForeignBlock(v.block));
                }
            }
        }
        for p in control_ineqs.iter().chain(std::iter::once(&objective)) {
            for v in p.variables() {
                if v.block == Block::State || v.block == Block::Uncertainty {
                    return Err(AroError::ForeignBlock(v.block));
                }
            }
        }
        Ok(AroProblem {
            space,
            objective,
            control_lower,
            control_upper,
            control_ineqs,
            equalities,
            inequalities,
            state_set,
            relaxed_state_set,
            uncertainty,
        })
    }

    pub fn n_y(&self) -> usize {
        self.space.dim(Block::Control)
    }

    pub fn n_x(&self) -> usize {
        self.space.dim(Block::State)
    }

    pub fn n_zeta(&self) -> usize {
        self.space.dim(Block::Uncertainty)
    }
}

/// Norm defining the trust-region neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrustNorm {
    /// One ball constraint `radius^2 - |x - center|^2 >= 0`.
    #[default]
    Euclidean,
    /// Per-coordinate bounds `|x_i - center_i| <= radius`.
    Max,
}

/// Neighborhood `|x - center| <= radius` restricting one linearization
/// subset of the state domain.
#[derive(Debug, Clone)]
pub struct TrustRegion {
    pub center: DVector<f64>,
    pub radius: f64,
    pub norm: TrustNorm,
}

/// First-order model of the equality system around an anchor: `A x +
/// l2_hat(y, zeta) = 0`, with `A` invertible, so the state responds as `x =
/// -A_inv l2_hat(y, zeta)`.
#[derive(Debug, Clone)]
pub struct LinearizedStage {
    pub anchor: DVector<f64>,
    pub a: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
    /// Offset of the linear system; affine in `zeta`, polynomial in `y` with
    /// the same degree the source system has in the controls.
    pub l2_hat: PolynomialVector,
    /// Condition number of `A` in the spectral norm.
    pub cond: f64,
    pub trust_region: Option<TrustRegion>,
}

impl LinearizedStage {
    pub fn with_trust_region(
        mut self,
        center: DVector<f64>,
        radius: f64,
        norm: TrustNorm,
    ) -> LinearizedStage {
        self.trust_region = Some(TrustRegion {
            center,
            radius,
            norm,
        });
        self
    }

    /// Substitution map realizing the decision rule `x := -A_inv l2_hat(y,
    /// zeta)`.
    pub fn recover_map(&self) -> Result<AffineVectorMap, AroError> {
        let n = self.anchor.len();
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = Polynomial::zero();
            for j in 0..n {
                let w = -self.a_inv[(i, j)];
                if w != 0.0 {
                    p = p.add(&self.l2_hat.entries[j].scale(w));
                }
            }
            entries.push(p);
        }
        Ok(AffineVectorMap::from_offset(
            Block::State,
            n,
            PolynomialVector::new(entries),
        )?)
    }
}

/// Linearizes the equality system around `(zeta = 0, x = anchor)`. The part
/// of each equality touching the state is replaced by its joint first-order
/// expansion in `(x, zeta)`; the control part is kept verbatim.
pub fn linearize_equalities(
    prob: &AroProblem,
    anchor: &[f64],
) -> Result<LinearizedStage, AroError> {
    let n_x = prob.n_x();
    let n_z = prob.n_zeta();
    if anchor.len() != n_x {
        return Err(AroError::Poly(PolyError::DimensionMismatch {
            expected: n_x,
            got: anchor.len(),
        }));
    }
    // Split every equality into the state-touching part (expanded) and the
    // remainder (kept exact).
    let mut part_state = Vec::with_capacity(n_x);
    let mut part_rest = Vec::with_capacity(n_x);
    for l in &prob.equalities.entries {
        let touching = Polynomial::from_terms(
            l.terms()
                .filter(|(m, _)| m.degree_in(Block::State) > 0)
                .map(|(m, c)| (m.clone(), c)),
        );
        part_rest.push(l.sub(&touching));
        part_state.push(touching);
    }
    let f1 = PolynomialVector::new(part_state);
    let (map_x, a) = taylor1(&f1, Block::State, anchor)?;
    // Second pass: expand the frozen offset in the uncertainty around zero,
    // completing the joint expansion of the state-touching part.
    let zeros = vec![0.0; n_z];
    let (map_z, az) = taylor1(&map_x.offset, Block::Uncertainty, &zeros)?;
    let mut l2_entries = Vec::with_capacity(n_x);
    for i in 0..n_x {
        let mut p = map_z.offset.entries[i].clone();
        for k in 0..n_z {
            let w = az[(i, k)];
            if w != 0.0 {
                p = p.add(&Polynomial::var(Var::new(Block::Uncertainty, k)).scale(w));
            }
        }
        l2_entries.push(p.add(&part_rest[i]));
    }

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(AroError::RankDeficient(cond));
    }
    let u = svd.u.as_ref().expect("svd with vectors");
    let vt = svd.v_t.as_ref().expect("svd with vectors");
    let sinv = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    let a_inv = vt.transpose() * sinv * u.transpose();

    Ok(LinearizedStage {
        anchor: DVector::from_column_slice(anchor),
        a,
        a_inv,
        l2_hat: PolynomialVector::new(l2_entries),
        cond,
        trust_region: None,
    })
}

/// One eliminated constraint, quadratic in `(y, zeta)`:
/// `zeta'A zeta + (y'B + b_lin')zeta + y'C y + c_lin'y + d >= 0`.
#[derive(Debug, Clone)]
pub struct QuadraticRobustConstraint {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_lin: DVector<f64>,
    pub c: DMatrix<f64>,
    pub c_lin: DVector<f64>,
    pub d: f64,
    /// Whether `C` is positive semidefinite (eigenvalue test); such
    /// constraints admit a convex coupling of their lifted scalar.
    pub psd_flag: bool,
}

impl QuadraticRobustConstraint {
    /// Extracts the coefficient bundle from a polynomial over controls and
    /// uncertainty. Fails on any term of total degree above two, or above
    /// one in each of the two blocks separately for mixed terms.
    pub fn from_polynomial(
        p: &Polynomial,
        n_y: usize,
        n_z: usize,
        index: usize,
    ) -> Result<QuadraticRobustConstraint, AroError> {
        let mut a = DMatrix::zeros(n_z, n_z);
        let mut b = DMatrix::zeros(n_y, n_z);
        let mut b_lin = DVector::zeros(n_z);
        let mut c = DMatrix::zeros(n_y, n_y);
        let mut c_lin = DVector::zeros(n_y);
        let mut d = 0.0;
        let overflow = |_deg: u32| AroError::DegreeOverflow {
            index,
            degree: p.total_degree(),
        };
        for (m, coef) in p.terms() {
            let fs = m.factors();
            if let Some(&(v, _)) = fs
                .iter()
                .find(|&&(v, _)| v.block != Block::Control && v.block != Block::Uncertainty)
            {
                return Err(AroError::ForeignBlock(v.block));
            }
            match (m.degree(), fs) {
                (0, _) => d += coef,
                (1, [(v, 1)]) => match v.block {
                    Block::Control => c_lin[v.index] += coef,
                    _ => b_lin[v.index] += coef,
                },
                (2, [(v, 2)]) => match v.block {
                    Block::Control => c[(v.index, v.index)] += coef,
                    _ => a[(v.index, v.index)] += coef,
                },
                (2, [(u, 1), (v, 1)]) => match (u.block, v.block) {
                    (Block::Control, Block::Control) => {
                        c[(u.index, v.index)] += coef / 2.0;
                        c[(v.index, u.index)] += coef / 2.0;
                    }
                    (Block::Uncertainty, Block::Uncertainty) => {
                        a[(u.index, v.index)] += coef / 2.0;
                        a[(v.index, u.index)] += coef / 2.0;
                    }
                    (Block::Control, Block::Uncertainty) => b[(u.index, v.index)] += coef,
                    _ => b[(v.index, u.index)] += coef,
                },
                _ => return Err(overflow(m.degree())),
            }
        }
        let psd_flag = c.nrows() == 0
            || c.clone().symmetric_eigen().eigenvalues.min() >= PSD_EIG_TOL;
        Ok(QuadraticRobustConstraint {
            a,
            b,
            b_lin,
            c,
            c_lin,
            d,
            psd_flag,
        })
    }

    pub fn eval(&self, y: &DVector<f64>, zeta: &DVector<f64>) -> f64 {
        (zeta.transpose() * &self.a * zeta)[(0, 0)]
            + (y.transpose() * &self.b * zeta)[(0, 0)]
            + self.b_lin.dot(zeta)
            + (y.transpose() * &self.c * y)[(0, 0)]
            + self.c_lin.dot(y)
            + self.d
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_zeta(&self) -> usize {
        self.a.nrows()
    }
}

/// Substitutes the decision rule into every inequality, every state-set
/// bound, and the trust-region constraints, returning the quadratic
/// coefficient bundles together with the substitution map itself.
pub fn eliminate_state(
    prob: &AroProblem,
    stage: &LinearizedStage,
) -> Result<(Vec<QuadraticRobustConstraint>, AffineVectorMap), AroError> {
    let recover = stage.recover_map()?;
    let n_y = prob.n_y();
    let n_z = prob.n_zeta();
    let mut sources: Vec<Polynomial> = Vec::new();
    sources.extend(prob.inequalities.entries.iter().cloned());
    sources.extend(prob.state_set.iter().cloned());
    if let Some(tr) = &stage.trust_region {
        match tr.norm {
            TrustNorm::Euclidean => {
                let mut ball = Polynomial::constant(tr.radius * tr.radius);
                for i in 0..stage.anchor.len() {
                    let xi = Polynomial::var(Var::new(Block::State, i));
                    let diff = xi.sub(&Polynomial::constant(tr.center[i]));
                    ball = ball.sub(&diff.mul(&diff));
                }
                sources.push(ball);
            }
            TrustNorm::Max => {
                for i in 0..stage.anchor.len() {
                    let xi = Polynomial::var(Var::new(Block::State, i));
                    let hi = Polynomial::constant(tr.center[i] + tr.radius).sub(&xi);
                    let lo = xi.sub(&Polynomial::constant(tr.center[i] - tr.radius));
                    sources.push(hi);
                    sources.push(lo);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let sub = src.substitute_affine(&recover)?;
        out.push(QuadraticRobustConstraint::from_polynomial(
            &sub, n_y, n_z, i,
        )?);
    }
    Ok((out, recover))
}

/// Handles into the conic program for one S-lemma counterpart block.
#[derive(Debug, Clone, Copy)]
pub struct SlemmaHandles {
    /// Column of the nonnegative multiplier.
    pub lambda: usize,
    /// The `(1 + n_zeta)`-sided certificate block.
    pub psd: PsdIds,
}

/// Emits the exact robust counterpart of one quadratic constraint over an
/// ellipsoid: a PSD block
///
/// ```text
/// [ gamma + c'y + d - lambda (r - z*' S z*)   (y'B + b' - 2 lambda z*'S)/2 ]
/// [                  (sym)                          lambda S + A           ]
/// ```
///
/// plus `lambda >= 0`. The caller owns the control columns `y` and the
/// lifted scalar `gamma` whose coupling `gamma = y'C y` closes the
/// reformulation.
pub fn slemma_counterpart(
    builder: &mut ProgramBuilder,
    qc: &QuadraticRobustConstraint,
    omega: &Ellipsoid,
    y: VarIds,
    gamma: usize,
) -> Result<SlemmaHandles, AroError> {
    let n_z = qc.n_zeta();
    if omega.dim() != n_z {
        return Err(AroError::DimensionMismatch {
            expected: n_z,
            got: omega.dim(),
        });
    }
    let sigma = omega.sigma();
    let zs = omega.center();
    let sig_zs = sigma * zs;
    let zs_sig_zs = zs.dot(&sig_zs);
    let lambda = builder.nonneg(1).at(0);
    let psd = builder.psd(1 + n_z);

    // Top-left entry.
    let mut row = psd.entry_terms(&[(0, 0, 1.0)]);
    row.push((gamma, -1.0));
    for j in 0..qc.n_y() {
        let w = qc.c_lin[j];
        if w != 0.0 {
            row.push((y.at(j), -w));
        }
    }
    row.push((lambda, omega.radius() - zs_sig_zs));
    builder.eq(row, qc.d);

    // First column: entry (k+1, 0) = (y'B + b' - 2 lambda z*'Sigma)_k / 2.
    for k in 0..n_z {
        let mut row = psd.entry_terms(&[(k + 1, 0, 1.0)]);
        for j in 0..qc.n_y() {
            let w = qc.b[(j, k)];
            if w != 0.0 {
                row.push((y.at(j), -0.5 * w));
            }
        }
        row.push((lambda, sig_zs[k]));
        builder.eq(row, 0.5 * qc.b_lin[k]);
    }

    // Trailing block: entry (p+1, q+1) = lambda Sigma_pq + A_pq.
    for q in 0..n_z {
        for p in q..n_z {
            let mut row = psd.entry_terms(&[(p + 1, q + 1, 1.0)]);
            row.push((lambda, -sigma[(p, q)]));
            builder.eq(row, qc.a[(p, q)]);
        }
    }
    Ok(SlemmaHandles { lambda, psd })
}

/// Emits the LP-duality counterpart of a constraint affine in the
/// uncertainty, `h1(y) + zeta'h2(y) >= 0` over the polyhedron `A zeta <= b`:
/// dual variables `z >= 0` with `A'z + h2(y) = 0` and `b'z <= h1(y)`.
/// Returns the dual columns.
pub fn robust_lp_counterpart(
    builder: &mut ProgramBuilder,
    h: &Polynomial,
    omega: &Polyhedron,
    y: VarIds,
) -> Result<VarIds, AroError> {
    if h.degree_in(Block::Uncertainty) > 1 {
        return Err(AroError::NotAffineInUncertainty);
    }
    let n_z = omega.dim();
    let m = omega.num_rows();
    let h1 = h.substitute_constants(Block::Uncertainty, &vec![0.0; n_z])?;
    let affine_in_y = |p: &Polynomial| -> Result<(f64, Vec<(usize, f64)>), AroError> {
        let mut cst = 0.0;
        let mut lin = Vec::new();
        for (mono, coef) in p.terms() {
            match (mono.degree(), mono.factors()) {
                (0, _) => cst += coef,
                (1, [(v, 1)]) if v.block == Block::Control => lin.push((v.index, coef)),
                _ => return Err(AroError::NotAffineInControls),
            }
        }
        Ok((cst, lin))
    };
    let z = builder.nonneg(m);
    let slack = builder.nonneg(1).at(0);
    for k in 0..n_z {
        let hk = h.derivative(Var::new(Block::Uncertainty, k));
        if hk.degree_in(Block::Uncertainty) > 0 {
            return Err(AroError::NotAffineInUncertainty);
        }
        let (cst, lin) = affine_in_y(&hk)?;
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(m + lin.len());
        for i in 0..m {
            let w = omega.a[(i, k)];
            if w != 0.0 {
                row.push((z.at(i), w));
            }
        }
        for (j, w) in lin {
            row.push((y.at(j), w));
        }
        builder.eq(row, -cst);
    }
    let (h1_cst, h1_lin) = affine_in_y(&h1)?;
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(m + h1_lin.len() + 1);
    for i in 0..m {
        let w = omega.b[i];
        if w != 0.0 {
            row.push((z.at(i), w));
        }
    }
    for (j, w) in h1_lin {
        row.push((y.at(j), -w));
    }
    row.push((slack, 1.0));
    builder.eq(row, h1_cst);
    Ok(z)
}

/// Handles into the conic program for one sum-of-squares counterpart.
#[derive(Debug, Clone)]
pub struct PutinarHandles {
    /// Gram blocks, one per generator with the unit generator first; block
    /// `k` certifies the weight multiplying `g_k`.
    pub blocks: Vec<PsdIds>,
    /// Monomial bases matching `blocks`, in graded-lexicographic order.
    pub bases: Vec<Vec<Monomial>>,
}

/// All monomials over the uncertainty block with total degree at most `deg`,
/// in graded-lexicographic order.
pub fn monomial_basis(n_z: usize, deg: usize) -> Vec<Monomial> {
    let mut out = vec![Monomial::one()];
    let mut layer = vec![vec![0u32; n_z]];
    for _ in 1..=deg {
        let mut next: Vec<Vec<u32>> = Vec::new();
        for expo in &layer {
            // Extend only at or after the last nonzero slot so every
            // exponent vector is generated exactly once.
            let start = expo
                .iter()
                .rposition(|&e| e > 0)
                .unwrap_or(0);
            for k in start..n_z {
                let mut e = expo.clone();
                e[k] += 1;
                next.push(e);
            }
        }
        for e in &next {
            out.push(Monomial::from_factors(
                e.iter()
                    .enumerate()
                    .filter(|&(_, &p)| p > 0)
                    .map(|(k, &p)| (Var::new(Block::Uncertainty, k), p))
                    .collect(),
            ));
        }
        layer = next;
    }
    out.sort();
    out
}

/// Emits the Putinar-style counterpart of `h(y, zeta) >= 0` on a compact
/// semialgebraic set: coefficient-matching equalities tying `h` to a sum
/// `sigma_0 + sum_k sigma_k g_k` with sum-of-squares weights represented by
/// Gram blocks over monomial bases truncated at the given level.
pub fn putinar_counterpart(
    builder: &mut ProgramBuilder,
    h: &Polynomial,
    omega: &SemialgebraicSet,
    n_z: usize,
    level: usize,
    y: VarIds,
) -> Result<PutinarHandles, AroError> {
    let zeta_vars: Vec<Var> = (0..n_z).map(|k| Var::new(Block::Uncertainty, k)).collect();
    if !omega.has_ball_or_box(&zeta_vars) {
        return Err(AroError::NotCompact);
    }
    if h.degree_in(Block::Uncertainty) as usize > 2 * level {
        return Err(AroError::LevelTooSmall {
            level,
            degree: h.degree_in(Block::Uncertainty),
        });
    }
    // Generators with the constant 1 in front; weight degrees shrink so each
    // product stays within 2 * level.
    let mut gens = vec![Polynomial::constant(1.0)];
    gens.extend(omega.inequalities.iter().cloned());
    let mut blocks = Vec::with_capacity(gens.len());
    let mut bases = Vec::with_capacity(gens.len());
    // Row accumulator: target monomial -> per-block lower-triangle entries.
    use std::collections::BTreeMap;
    type GramEntries = Vec<(usize, usize, f64)>;
    let mut rows: BTreeMap<Monomial, Vec<GramEntries>> = BTreeMap::new();
    for (k, g) in gens.iter().enumerate() {
        let gdeg = g.degree_in(Block::Uncertainty) as usize;
        let half = level.saturating_sub(gdeg.div_ceil(2));
        let basis = monomial_basis(n_z, half);
        let ids = builder.psd(basis.len());
        for i in 0..basis.len() {
            for j in 0..=i {
                let pair = basis[i].mul(&basis[j]);
                for (mg, cg) in g.terms() {
                    let target = pair.mul(mg);
                    let slot = rows
                        .entry(target)
                        .or_insert_with(|| vec![Vec::new(); gens.len()]);
                    slot[k].push((i, j, cg));
                }
            }
        }
        blocks.push(ids);
        bases.push(basis);
    }
    // Group h by uncertainty monomial; coefficients must be affine in y.
    let mut h_coef: BTreeMap<Monomial, (f64, Vec<(usize, f64)>)> = BTreeMap::new();
    for (m, coef) in h.terms() {
        type Factors = Vec<(Var, u32)>;
        let (z_part, y_part): (Factors, Factors) = m
            .factors()
            .iter()
            .copied()
            .partition(|&(v, _)| v.block == Block::Uncertainty);
        let key = Monomial::from_factors(z_part);
        let entry = h_coef.entry(key).or_insert((0.0, Vec::new()));
        match y_part.as_slice() {
            [] => entry.0 += coef,
            [(v, 1)] if v.block == Block::Control => entry.1.push((v.index, coef)),
            _ => return Err(AroError::NotAffineInControls),
        }
    }
    for mono in h_coef.keys() {
        rows.entry(mono.clone())
            .or_insert_with(|| vec![Vec::new(); gens.len()]);
    }
    for (mono, per_block) in rows {
        let mut terms: Vec<(usize, f64)> = Vec::new();
        for (k, entries) in per_block.iter().enumerate() {
            if !entries.is_empty() {
                terms.extend(blocks[k].tr_terms(entries));
            }
        }
        let (cst, lin) = h_coef
            .get(&mono)
            .cloned()
            .unwrap_or((0.0, Vec::new()));
        for (j, w) in lin {
            terms.push((y.at(j), -w));
        }
        builder.eq(terms, cst);
    }
    Ok(PutinarHandles { blocks, bases })
}
