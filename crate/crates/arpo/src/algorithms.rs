//! Solution machinery for the quadratic/ellipsoidal pipeline: the lifted SDP
//! lower bound, alternating projections with line search to recover a
//! feasible control from the relaxation, and the dynamic outer loop that
//! walks trust regions through the state space, re-linearizing the equality
//! system at each accepted iterate.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::aro::{
    eliminate_state, linearize_equalities, slemma_counterpart, AroError, AroProblem,
    LinearizedStage, QuadraticRobustConstraint, TrustNorm,
};
use crate::conic::{ProgramBuilder, Status, VarIds};
use crate::poly::{Assignment, Block, PolyError, Polynomial, PolynomialVector};
use crate::uncertainty::{Ellipsoid, UncertaintySet};

/// Consecutive alternating-projection iterations with a relative displacement
/// decrease below [`FLAT_DECREASE`] before the run is declared stalled.
pub const FLAT_WINDOW: usize = 10;

/// Relative per-iteration displacement decrease under which an iteration
/// counts as flat.
pub const FLAT_DECREASE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("the quadratic pipeline requires an ellipsoidal uncertainty set")]
    UnsupportedUncertainty,
    #[error("{0} must be affine in the controls")]
    NotAffineInControls(&'static str),
    #[error("objective must be affine in the controls plus nonnegative squares")]
    ObjectiveNotSeparable,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    BadParams(&'static str),
    #[error("Jacobian at the starting state is rank deficient (condition {0:.3e})")]
    RankDeficientStart(f64),
    #[error("starting point violates the equality system (residual {0:.3e})")]
    StartNotNominal(f64),
    #[error("Newton solve did not converge (residual {residual:.3e})")]
    NewtonFailed { residual: f64 },
    #[error("Newton Jacobian is singular")]
    NewtonSingular,
    #[error("projection target set is empty")]
    ProjectionInfeasible,
    #[error("conic solve failed: {0}")]
    Numerical(String),
    #[error(transparent)]
    Aro(#[from] AroError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// One trust-region subproblem in decision-rule form: minimize `f(y) =
/// y'diag(obj_quad)y + obj_lin'y + obj_offset` over the control box and
/// cuts, subject to every eliminated quadratic constraint holding for all
/// uncertainty realizations in the ellipsoid.
#[derive(Debug, Clone)]
pub struct ArcSubproblem {
    pub constraints: Vec<QuadraticRobustConstraint>,
    pub omega: Ellipsoid,
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    /// Affine cuts `a'y <= b`.
    pub cuts: Vec<(DVector<f64>, f64)>,
    /// Coefficients of the separable convex quadratic cost, all `>= 0`.
    pub obj_quad: DVector<f64>,
    pub obj_lin: DVector<f64>,
    pub obj_offset: f64,
}

impl ArcSubproblem {
    pub fn new(
        constraints: Vec<QuadraticRobustConstraint>,
        omega: Ellipsoid,
        y_lower: Vec<f64>,
        y_upper: Vec<f64>,
        cuts: Vec<(DVector<f64>, f64)>,
        obj_lin: DVector<f64>,
        obj_offset: f64,
    ) -> Result<ArcSubproblem, AlgoError> {
        let n_y = obj_lin.len();
        if y_lower.len() != n_y || y_upper.len() != n_y {
            return Err(AlgoError::ShapeMismatch {
                expected: n_y,
                got: y_lower.len().min(y_upper.len()),
            });
        }
        for qc in &constraints {
            if qc.n_y() != n_y {
                return Err(AlgoError::ShapeMismatch {
                    expected: n_y,
                    got: qc.n_y(),
                });
            }
            if qc.n_zeta() != omega.dim() {
                return Err(AlgoError::ShapeMismatch {
                    expected: omega.dim(),
                    got: qc.n_zeta(),
                });
            }
        }
        for (a, _) in &cuts {
            if a.len() != n_y {
                return Err(AlgoError::ShapeMismatch {
                    expected: n_y,
                    got: a.len(),
                });
            }
        }
        Ok(ArcSubproblem {
            constraints,
            omega,
            y_lower,
            y_upper,
            cuts,
            obj_quad: DVector::zeros(n_y),
            obj_lin,
            obj_offset,
        })
    }

    /// Adds a separable convex quadratic term to the cost; coefficients must
    /// be nonnegative so the epigraph stays second-order-cone representable.
    pub fn with_quadratic_cost(mut self, quad: DVector<f64>) -> Result<ArcSubproblem, AlgoError> {
        if quad.len() != self.n_y() {
            return Err(AlgoError::ShapeMismatch {
                expected: self.n_y(),
                got: quad.len(),
            });
        }
        if quad.iter().any(|&q| !q.is_finite() || q < 0.0) {
            return Err(AlgoError::ObjectiveNotSeparable);
        }
        self.obj_quad = quad;
        Ok(self)
    }

    /// Eliminates the state of a linearized problem into subproblem form.
    pub fn from_problem(
        prob: &AroProblem,
        stage: &LinearizedStage,
    ) -> Result<ArcSubproblem, AlgoError> {
        let omega = match &prob.uncertainty {
            UncertaintySet::Ellipsoid(e) => e.clone(),
            _ => return Err(AlgoError::UnsupportedUncertainty),
        };
        let (constraints, _) = eliminate_state(prob, stage)?;
        let n_y = prob.n_y();
        let (obj_quad, obj_lin, obj_offset) = separable_in_controls(&prob.objective, n_y)?;
        let mut cuts = Vec::with_capacity(prob.control_ineqs.len());
        for p in &prob.control_ineqs {
            // p(y) >= 0 with p = c + l'y becomes the cut (-l)'y <= c.
            let (l, c) = affine_in_controls(p, n_y, "control inequality")?;
            cuts.push((-l, c));
        }
        ArcSubproblem::new(
            constraints,
            omega,
            prob.control_lower.clone(),
            prob.control_upper.clone(),
            cuts,
            obj_lin,
            obj_offset,
        )?
        .with_quadratic_cost(obj_quad)
    }

    pub fn n_y(&self) -> usize {
        self.obj_lin.len()
    }

    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn f(&self, y: &DVector<f64>) -> f64 {
        let squares: f64 = self
            .obj_quad
            .iter()
            .zip(y.iter())
            .map(|(q, v)| q * v * v)
            .sum();
        squares + self.obj_lin.dot(y) + self.obj_offset
    }

    /// Controls touched by some non-convex coupling; the rest only enter the
    /// couplings that were convexified into inequalities.
    pub fn nonconvex_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_y()];
        for qc in &self.constraints {
            if qc.psd_flag {
                continue;
            }
            for (j, touched) in mask.iter_mut().enumerate() {
                if !*touched && qc.c.row(j).iter().any(|&v| v != 0.0) {
                    *touched = true;
                }
            }
        }
        mask
    }
}

fn affine_in_controls(
    p: &Polynomial,
    n_y: usize,
    what: &'static str,
) -> Result<(DVector<f64>, f64), AlgoError> {
    let mut lin = DVector::zeros(n_y);
    let mut cst = 0.0;
    for (m, c) in p.terms() {
        match (m.degree(), m.factors()) {
            (0, _) => cst += c,
            (1, [(v, 1)]) if v.block == Block::Control => lin[v.index] += c,
            _ => return Err(AlgoError::NotAffineInControls(what)),
        }
    }
    Ok((lin, cst))
}

/// Splits a cost into per-control squares, a linear part, and a constant;
/// cross products or negative squares are rejected.
fn separable_in_controls(
    p: &Polynomial,
    n_y: usize,
) -> Result<(DVector<f64>, DVector<f64>, f64), AlgoError> {
    let mut quad = DVector::zeros(n_y);
    let mut lin = DVector::zeros(n_y);
    let mut cst = 0.0;
    for (m, c) in p.terms() {
        match (m.degree(), m.factors()) {
            (0, _) => cst += c,
            (1, [(v, 1)]) if v.block == Block::Control => lin[v.index] += c,
            (2, [(v, 2)]) if v.block == Block::Control => quad[v.index] += c,
            _ => return Err(AlgoError::ObjectiveNotSeparable),
        }
    }
    if quad.iter().any(|&q| q < 0.0) {
        return Err(AlgoError::ObjectiveNotSeparable);
    }
    Ok((quad, lin, cst))
}

/// One iterate of the alternating projections: controls, lifted scalars, and
/// certificate multipliers.
#[derive(Debug, Clone)]
pub struct ApPoint {
    pub y: DVector<f64>,
    pub gamma: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl ApPoint {
    fn scaled(&self, s: f64) -> ApPoint {
        ApPoint {
            y: &self.y * s,
            gamma: &self.gamma * s,
            lambda: &self.lambda * s,
        }
    }
}

/// Distance over the coordinates the projections act on: the non-convex
/// controls and all lifted scalars.
pub fn nc_gamma_distance(a: &ApPoint, b: &ApPoint, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    for (j, &m) in mask.iter().enumerate() {
        if m {
            s += (a.y[j] - b.y[j]).powi(2);
        }
    }
    for i in 0..a.gamma.len() {
        s += (a.gamma[i] - b.gamma[i]).powi(2);
    }
    s.sqrt()
}

/// Alternating-projection parameters: convergence tolerance, objective cap,
/// iteration cap, and the line-search step sequence (missing entries count
/// as one, which stops at the first feasible solution).
#[derive(Debug, Clone)]
pub struct ApParams {
    pub tol: f64,
    pub f0: f64,
    pub max_iter: usize,
    pub nu: Vec<f64>,
}

impl Default for ApParams {
    fn default() -> ApParams {
        ApParams {
            tol: 1e-5,
            f0: 1e5,
            max_iter: 100,
            nu: Vec::new(),
        }
    }
}

impl ApParams {
    fn validate(&self) -> Result<(), AlgoError> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(AlgoError::BadParams("tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(AlgoError::BadParams("iteration cap must be at least one"));
        }
        if self.nu.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(AlgoError::BadParams("step sizes must lie in (0, 1]"));
        }
        Ok(())
    }

    fn nu_at(&self, i: usize) -> f64 {
        self.nu.get(i.saturating_sub(1)).copied().unwrap_or(1.0)
    }
}

/// Result of the lifted relaxation providing the lower bound and the
/// starting point.
#[derive(Debug, Clone)]
pub enum LowerBound {
    Solved { value: f64, point: ApPoint },
    Infeasible,
    NumericalProblem(String),
}

/// Outcome of the alternating projections.
#[derive(Debug, Clone)]
pub enum ApOutcome {
    Feasible {
        point: ApPoint,
        objective: f64,
        lower_bound: f64,
        iterations: usize,
    },
    Infeasible,
    Inconclusive {
        iterations: usize,
    },
    NumericalProblem {
        message: String,
        iterations: usize,
    },
}

/// Diagnostic trace of one alternating-projections run.
#[derive(Debug, Clone, Default)]
pub struct ApTrace {
    pub distances: Vec<f64>,
    pub accepted_objectives: Vec<f64>,
    pub lower_bound: Option<f64>,
}

/// Columns shared by every program over the feasible set: controls, lifted
/// scalars, and one multiplier per certificate block.
struct MembershipColumns {
    y: VarIds,
    gamma: VarIds,
    lambdas: Vec<usize>,
}

/// Emits membership in the convex part of the feasible set: certificate
/// blocks with multipliers, the control box and cuts, and the convexified
/// couplings `y'C_i y <= gamma_i` for constraints with semidefinite `C_i`.
fn emit_membership(
    builder: &mut ProgramBuilder,
    sub: &ArcSubproblem,
) -> Result<MembershipColumns, AlgoError> {
    let n_y = sub.n_y();
    let y = builder.free(n_y);
    let gamma = builder.free(sub.m());
    let mut lambdas = Vec::with_capacity(sub.m());
    for (i, qc) in sub.constraints.iter().enumerate() {
        let handles = slemma_counterpart(builder, qc, &sub.omega, y, gamma.at(i))?;
        lambdas.push(handles.lambda);
    }
    for j in 0..n_y {
        if sub.y_upper[j].is_finite() {
            let s = builder.nonneg(1).at(0);
            builder.eq([(y.at(j), 1.0), (s, 1.0)], sub.y_upper[j]);
        }
        if sub.y_lower[j].is_finite() {
            let s = builder.nonneg(1).at(0);
            builder.eq([(y.at(j), 1.0), (s, -1.0)], sub.y_lower[j]);
        }
    }
    for (a, b) in &sub.cuts {
        let s = builder.nonneg(1).at(0);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(n_y + 1);
        for j in 0..n_y {
            if a[j] != 0.0 {
                row.push((y.at(j), a[j]));
            }
        }
        row.push((s, 1.0));
        builder.eq(row, *b);
    }
    for (i, qc) in sub.constraints.iter().enumerate() {
        if !qc.psd_flag {
            continue;
        }
        emit_convex_coupling(builder, &qc.c, y, gamma.at(i));
    }
    Ok(MembershipColumns { y, gamma, lambdas })
}

/// Emits `y'C y <= g` for positive semidefinite `C` as the cone constraint
/// `|(2Fy, g - 1)| <= g + 1` with `F'F = C`.
fn emit_convex_coupling(builder: &mut ProgramBuilder, c: &DMatrix<f64>, y: VarIds, g: usize) {
    let eig = c.clone().symmetric_eigen();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for k in 0..eig.eigenvalues.len() {
        let ev = eig.eigenvalues[k];
        if ev > 1e-12 {
            rows.push(DVector::from(eig.eigenvectors.column(k) * ev.sqrt()));
        }
    }
    if rows.is_empty() {
        // C vanishes; the coupling reduces to g >= 0.
        let s = builder.nonneg(1).at(0);
        builder.eq([(g, 1.0), (s, -1.0)], 0.0);
        return;
    }
    let r = rows.len();
    let u = builder.soc(r + 2);
    builder.eq([(u.at(0), 1.0), (g, -1.0)], 1.0);
    for (k, f) in rows.iter().enumerate() {
        let mut row: Vec<(usize, f64)> = vec![(u.at(1 + k), 1.0)];
        for j in 0..f.len() {
            if f[j] != 0.0 {
                row.push((y.at(j), -2.0 * f[j]));
            }
        }
        builder.eq(row, 0.0);
    }
    builder.eq([(u.at(r + 1), 1.0), (g, -1.0)], -1.0);
}

fn extract_point(
    x: &[f64],
    cols: &MembershipColumns,
    n_y: usize,
    m: usize,
) -> ApPoint {
    ApPoint {
        y: DVector::from_fn(n_y, |j, _| x[cols.y.at(j)]),
        gamma: DVector::from_fn(m, |i, _| x[cols.gamma.at(i)]),
        lambda: DVector::from_fn(m, |i, _| x[cols.lambdas[i]]),
    }
}

/// Solves the lifted relaxation: the second-moment matrix `Y` replaces the
/// rank-one outer product of `(1, y)`, turning each coupling into the linear
/// constraint `<Y, C_i> = gamma_i`. Infeasibility here proves the subproblem
/// itself infeasible.
pub fn sdp_lower_bound(sub: &ArcSubproblem) -> Result<LowerBound, AlgoError> {
    let n_y = sub.n_y();
    let mut builder = ProgramBuilder::new();
    let cols = emit_membership(&mut builder, sub)?;
    let lift = builder.psd(1 + n_y);
    builder.eq(lift.entry_terms(&[(0, 0, 1.0)]), 1.0);
    for j in 0..n_y {
        let mut row = lift.entry_terms(&[(j + 1, 0, 1.0)]);
        row.push((cols.y.at(j), -1.0));
        builder.eq(row, 0.0);
    }
    for (i, qc) in sub.constraints.iter().enumerate() {
        let mut lower = Vec::new();
        for p in 0..n_y {
            for q in 0..=p {
                let c = qc.c[(p, q)];
                if c != 0.0 {
                    lower.push((p + 1, q + 1, c));
                }
            }
        }
        let mut row = lift.tr_terms(&lower);
        row.push((cols.gamma.at(i), -1.0));
        builder.eq(row, 0.0);
    }
    let mut obj: Vec<(usize, f64)> = (0..n_y)
        .filter(|&j| sub.obj_lin[j] != 0.0)
        .map(|j| (cols.y.at(j), sub.obj_lin[j]))
        .collect();
    // Squares are charged to the lifted diagonal, which the minimization
    // presses down onto y_j^2; the relaxation stays a valid lower bound.
    let squares: Vec<(usize, usize, f64)> = (0..n_y)
        .filter(|&j| sub.obj_quad[j] != 0.0)
        .map(|j| (j + 1, j + 1, sub.obj_quad[j]))
        .collect();
    obj.extend(lift.tr_terms(&squares));
    builder.objective(obj, sub.obj_offset);
    let program = builder.build().map_err(|e| AlgoError::Numerical(e.to_string()))?;
    let result = program.solve();
    match result.status {
        Status::Optimal => Ok(LowerBound::Solved {
            value: result.primal_objective,
            point: extract_point(&result.x, &cols, n_y, sub.m()),
        }),
        Status::PrimalInfeasible => Ok(LowerBound::Infeasible),
        Status::DualInfeasible => Ok(LowerBound::NumericalProblem(
            "lower bound unbounded below".to_string(),
        )),
        Status::NumericalProblem(msg) => Ok(LowerBound::NumericalProblem(msg)),
    }
}

/// Projects onto the coupling equalities: the lifted scalar of every
/// non-convex constraint is reset to the quadratic it stands for; controls,
/// multipliers, and convexified scalars stay put.
pub fn project_b(point: &ApPoint, sub: &ArcSubproblem) -> ApPoint {
    let mut gamma = point.gamma.clone();
    for (i, qc) in sub.constraints.iter().enumerate() {
        if !qc.psd_flag {
            gamma[i] = (point.y.transpose() * &qc.c * &point.y)[(0, 0)];
        }
    }
    ApPoint {
        y: point.y.clone(),
        gamma,
        lambda: point.lambda.clone(),
    }
}

/// Emits `f(y) <= cap`: a slack row for a linear cost, otherwise the
/// second-order-cone encoding `||(2 sqrt(q_j) y_j, 1 - w)|| <= 1 + w` of the
/// separable quadratic with `w = cap - offset - obj_lin'y`.
fn emit_cost_cap(
    builder: &mut ProgramBuilder,
    sub: &ArcSubproblem,
    cols: &MembershipColumns,
    cap: f64,
) {
    let n_y = sub.n_y();
    let squares: Vec<usize> = (0..n_y).filter(|&j| sub.obj_quad[j] != 0.0).collect();
    if squares.is_empty() {
        let s = builder.nonneg(1).at(0);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(n_y + 1);
        for j in 0..n_y {
            if sub.obj_lin[j] != 0.0 {
                row.push((cols.y.at(j), sub.obj_lin[j]));
            }
        }
        row.push((s, 1.0));
        builder.eq(row, cap - sub.obj_offset);
        return;
    }
    let u = builder.soc(2 + squares.len());
    let w = cap - sub.obj_offset;
    let mut head: Vec<(usize, f64)> = vec![(u.at(0), 1.0)];
    let mut tail: Vec<(usize, f64)> = vec![(u.at(1 + squares.len()), 1.0)];
    for j in 0..n_y {
        if sub.obj_lin[j] != 0.0 {
            head.push((cols.y.at(j), sub.obj_lin[j]));
            tail.push((cols.y.at(j), -sub.obj_lin[j]));
        }
    }
    builder.eq(head, 1.0 + w);
    builder.eq(tail, 1.0 - w);
    for (k, &j) in squares.iter().enumerate() {
        builder.eq(
            [(u.at(1 + k), 1.0), (cols.y.at(j), -2.0 * sub.obj_quad[j].sqrt())],
            0.0,
        );
    }
}

/// Euclidean projection of `(y^{nc}, gamma)` onto the convex feasible set
/// intersected with the objective cap `f(y) <= f_cap`; the remaining
/// coordinates are free to move.
pub fn project_a(
    sub: &ArcSubproblem,
    target: &ApPoint,
    f_cap: f64,
) -> Result<ApPoint, AlgoError> {
    let n_y = sub.n_y();
    let m = sub.m();
    let mask = sub.nonconvex_mask();
    let mut builder = ProgramBuilder::new();
    let cols = emit_membership(&mut builder, sub)?;
    if f_cap.is_finite() {
        emit_cost_cap(&mut builder, sub, &cols, f_cap);
    }
    let nc: Vec<usize> = (0..n_y).filter(|&j| mask[j]).collect();
    let dist = builder.soc(1 + nc.len() + m);
    for (k, &j) in nc.iter().enumerate() {
        builder.eq(
            [(dist.at(1 + k), 1.0), (cols.y.at(j), -1.0)],
            -target.y[j],
        );
    }
    for i in 0..m {
        builder.eq(
            [(dist.at(1 + nc.len() + i), 1.0), (cols.gamma.at(i), -1.0)],
            -target.gamma[i],
        );
    }
    builder.objective([(dist.at(0), 1.0)], 0.0);
    let program = builder.build().map_err(|e| AlgoError::Numerical(e.to_string()))?;
    let result = program.solve();
    match result.status {
        Status::Optimal => Ok(extract_point(&result.x, &cols, n_y, m)),
        Status::PrimalInfeasible => Err(AlgoError::ProjectionInfeasible),
        Status::DualInfeasible => Err(AlgoError::Numerical(
            "projection problem unbounded".to_string(),
        )),
        Status::NumericalProblem(msg) => Err(AlgoError::Numerical(msg)),
    }
}

/// Re-optimizes the convex controls: with `(y^{nc}, gamma)` pinned, finds
/// the cheapest completion inside the convex feasible set.
fn polish(sub: &ArcSubproblem, point: &ApPoint, mask: &[bool]) -> Result<ApPoint, AlgoError> {
    let n_y = sub.n_y();
    let m = sub.m();
    let mut builder = ProgramBuilder::new();
    let cols = emit_membership(&mut builder, sub)?;
    for (j, &pinned) in mask.iter().enumerate() {
        if pinned {
            builder.eq([(cols.y.at(j), 1.0)], point.y[j]);
        }
    }
    for i in 0..m {
        builder.eq([(cols.gamma.at(i), 1.0)], point.gamma[i]);
    }
    let mut obj: Vec<(usize, f64)> = (0..n_y)
        .filter(|&j| sub.obj_lin[j] != 0.0)
        .map(|j| (cols.y.at(j), sub.obj_lin[j]))
        .collect();
    let squares: Vec<usize> = (0..n_y).filter(|&j| sub.obj_quad[j] != 0.0).collect();
    if !squares.is_empty() {
        // Epigraph tau >= sum q_j y_j^2, encoded as in emit_cost_cap.
        let tau = builder.free(1).at(0);
        let u = builder.soc(2 + squares.len());
        builder.eq([(u.at(0), 1.0), (tau, -1.0)], 1.0);
        builder.eq([(u.at(1 + squares.len()), 1.0), (tau, 1.0)], 1.0);
        for (k, &j) in squares.iter().enumerate() {
            builder.eq(
                [(u.at(1 + k), 1.0), (cols.y.at(j), -2.0 * sub.obj_quad[j].sqrt())],
                0.0,
            );
        }
        obj.push((tau, 1.0));
    }
    builder.objective(obj, sub.obj_offset);
    let program = builder.build().map_err(|e| AlgoError::Numerical(e.to_string()))?;
    let result = program.solve();
    match result.status {
        Status::Optimal => Ok(extract_point(&result.x, &cols, n_y, m)),
        Status::PrimalInfeasible => Err(AlgoError::ProjectionInfeasible),
        other => Err(AlgoError::Numerical(other.to_string())),
    }
}

/// Alternating projections with line search: start from the relaxation
/// point, alternate between the coupling equalities and the convex set, and
/// after each convergence re-tighten the objective cap by the step sequence.
pub fn alternating_projections(
    sub: &ArcSubproblem,
    params: &ApParams,
) -> Result<(ApOutcome, ApTrace), AlgoError> {
    params.validate()?;
    let mut trace = ApTrace::default();
    let (beta, mut p0) = match sdp_lower_bound(sub)? {
        LowerBound::Solved { value, point } => (value, point),
        LowerBound::Infeasible => return Ok((ApOutcome::Infeasible, trace)),
        LowerBound::NumericalProblem(message) => {
            return Ok((
                ApOutcome::NumericalProblem {
                    message,
                    iterations: 0,
                },
                trace,
            ))
        }
    };
    trace.lower_bound = Some(beta);
    let mask = sub.nonconvex_mask();
    let mut best: Option<(ApPoint, f64)> = None;
    let mut f_cap = params.f0;
    let mut i = 0usize;
    // The initial iterate is placed artificially far so the loop is entered.
    let mut dist = f64::INFINITY;
    let mut prev_dist = f64::INFINITY;
    let mut flat = 0usize;
    while dist > params.tol && i <= params.max_iter {
        i += 1;
        let p1 = project_b(&p0, sub);
        p0 = match project_a(sub, &p1, f_cap) {
            Ok(p) => p,
            Err(AlgoError::ProjectionInfeasible) => {
                return Ok(match best {
                    Some((point, objective)) => (
                        ApOutcome::Feasible {
                            point,
                            objective,
                            lower_bound: beta,
                            iterations: i,
                        },
                        trace,
                    ),
                    None => (ApOutcome::Inconclusive { iterations: i }, trace),
                })
            }
            Err(AlgoError::Numerical(message)) => {
                return Ok((
                    ApOutcome::NumericalProblem {
                        message,
                        iterations: i,
                    },
                    trace,
                ))
            }
            Err(e) => return Err(e),
        };
        dist = nc_gamma_distance(&p0, &p1, &mask);
        trace.distances.push(dist);
        if best.is_none() {
            // A displacement that stops shrinking signals stalled
            // convergence; give up early instead of burning the cap.
            if prev_dist.is_finite() && dist > (1.0 - FLAT_DECREASE) * prev_dist {
                flat += 1;
            } else {
                flat = 0;
            }
            if flat >= FLAT_WINDOW {
                return Ok((ApOutcome::Inconclusive { iterations: i }, trace));
            }
        }
        prev_dist = dist;
        if dist < params.tol {
            let nu = params.nu_at(i);
            p0 = match polish(sub, &p0, &mask) {
                Ok(p) => p,
                Err(AlgoError::ProjectionInfeasible) | Err(AlgoError::Numerical(_)) => {
                    return Ok((
                        ApOutcome::NumericalProblem {
                            message: "polish step failed on a converged iterate".to_string(),
                            iterations: i,
                        },
                        trace,
                    ))
                }
                Err(e) => return Err(e),
            };
            let value = sub.f(&p0.y);
            trace.accepted_objectives.push(value);
            if best.as_ref().is_none_or(|&(_, b)| value < b) {
                best = Some((p0.clone(), value));
            }
            f_cap = nu * value + (1.0 - nu) * beta;
            let p1_next = p0.scaled(1.0 / nu);
            dist = nc_gamma_distance(&p0, &p1_next, &mask);
        }
    }
    Ok(match best {
        Some((point, objective)) => (
            ApOutcome::Feasible {
                point,
                objective,
                lower_bound: beta,
                iterations: i,
            },
            trace,
        ),
        None => (ApOutcome::Inconclusive { iterations: i }, trace),
    })
}

/// Newton solve of the equality system in the state for fixed controls and
/// uncertainty. The Jacobian is assembled symbolically once and evaluated
/// per iteration.
pub fn newton_solve(
    equalities: &PolynomialVector,
    control: &[f64],
    uncertainty: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>, AlgoError> {
    let n = equalities.len();
    if x0.len() != n {
        return Err(AlgoError::ShapeMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    let mut jac: Vec<Vec<(usize, Polynomial)>> = Vec::with_capacity(n);
    for p in &equalities.entries {
        let mut row = Vec::new();
        for v in p.variables() {
            if v.block == Block::State {
                row.push((v.index, p.derivative(v)));
            }
        }
        jac.push(row);
    }
    let mut x = DVector::from_column_slice(x0);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let state: Vec<f64> = x.iter().copied().collect();
        let at = Assignment {
            control,
            state: &state,
            uncertainty,
            auxiliary: &[],
        };
        let r = equalities.eval(&at)?;
        residual = r.amax();
        if residual <= tol {
            return Ok(x);
        }
        let mut j = DMatrix::zeros(n, n);
        for (i, row) in jac.iter().enumerate() {
            for (col, d) in row {
                if *col >= n {
                    return Err(AlgoError::ShapeMismatch {
                        expected: n,
                        got: *col + 1,
                    });
                }
                j[(i, *col)] = d.eval(&at)?;
            }
        }
        let step = j.lu().solve(&r).ok_or(AlgoError::NewtonSingular)?;
        x -= step;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(AlgoError::NewtonFailed { residual });
        }
    }
    Err(AlgoError::NewtonFailed { residual })
}

/// Rule producing the trust-region radius from the previous anchor.
#[derive(Debug, Clone, Copy)]
pub enum EpsRule {
    /// Radius `|x| / 10` for networks under thirty nodes, `|x| / 30`
    /// otherwise.
    NetworkScaled { size: usize },
    Fixed(f64),
}

impl EpsRule {
    pub fn epsilon(&self, anchor: &DVector<f64>) -> f64 {
        match *self {
            EpsRule::NetworkScaled { size } => {
                let divisor = if size < 30 { 10.0 } else { 30.0 };
                anchor.norm() / divisor
            }
            EpsRule::Fixed(e) => e,
        }
    }
}

/// Outer-loop parameters: improvement tolerance, iteration cap, the
/// trust-region rule and norm, and the inner projection parameters.
#[derive(Debug, Clone)]
pub struct OuterParams {
    pub tol: f64,
    pub max_outer: usize,
    pub eps: EpsRule,
    pub norm: TrustNorm,
    pub ap: ApParams,
}

impl Default for OuterParams {
    fn default() -> OuterParams {
        OuterParams {
            tol: 1e-5,
            max_outer: 1,
            eps: EpsRule::Fixed(0.5),
            norm: TrustNorm::Euclidean,
            ap: ApParams::default(),
        }
    }
}

/// Status of one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterStatus {
    /// The nominal starting point, recorded for reference.
    Start,
    Feasible,
    /// The lower-bound relaxation proved the window infeasible.
    LowerBoundInfeasible,
    /// The projections did not converge within the cap.
    Inconclusive,
    NumericalProblem,
    /// No anchor with a well-conditioned Jacobian was found.
    Degenerate,
}

/// One record of the outer history.
#[derive(Debug, Clone)]
pub struct OuterIteration {
    pub index: usize,
    pub status: OuterStatus,
    pub objective: f64,
    pub lower_bound: Option<f64>,
    pub y: Option<DVector<f64>>,
    pub x: Option<DVector<f64>>,
    pub ap_iterations: usize,
    pub epsilon: f64,
    pub retries: usize,
    pub seconds: f64,
}

/// The dynamic outer loop: linearize at the current anchor, solve the
/// trust-region subproblem by alternating projections, recover the state by
/// a Newton solve, and re-center; stops when the objective stops improving,
/// a window fails, or the iteration cap is reached. A degenerate anchor
/// (singular Jacobian or failed Newton solve) shrinks the window by half and
/// re-solves, a bounded number of times.
pub fn dynamic_outer(
    prob: &AroProblem,
    y0: &[f64],
    x0: &[f64],
    params: &OuterParams,
) -> Result<Vec<OuterIteration>, AlgoError> {
    let zeros = vec![0.0; prob.n_zeta()];
    let n_y = prob.n_y();
    if y0.len() != n_y {
        return Err(AlgoError::ShapeMismatch {
            expected: n_y,
            got: y0.len(),
        });
    }
    let (obj_quad, obj_lin, obj_offset) = separable_in_controls(&prob.objective, n_y)?;
    let start_residual = prob
        .equalities
        .eval(&Assignment {
            control: y0,
            state: x0,
            uncertainty: &zeros,
            auxiliary: &[],
        })?
        .amax();
    if start_residual > 1e-6 {
        return Err(AlgoError::StartNotNominal(start_residual));
    }
    let mut stage = match linearize_equalities(prob, x0) {
        Ok(s) => s,
        Err(AroError::RankDeficient(c)) => return Err(AlgoError::RankDeficientStart(c)),
        Err(e) => return Err(e.into()),
    };
    let y0_vec = DVector::from_column_slice(y0);
    let mut f_prev = obj_quad
        .iter()
        .zip(y0_vec.iter())
        .map(|(q, v)| q * v * v)
        .sum::<f64>()
        + obj_lin.dot(&y0_vec)
        + obj_offset;
    let mut anchor = DVector::from_column_slice(x0);
    let mut history = vec![OuterIteration {
        index: 0,
        status: OuterStatus::Start,
        objective: f_prev,
        lower_bound: None,
        y: Some(y0_vec),
        x: Some(anchor.clone()),
        ap_iterations: 0,
        epsilon: 0.0,
        retries: 0,
        seconds: 0.0,
    }];
    for j in 1..=params.max_outer {
        let clock = Instant::now();
        let mut eps = params.eps.epsilon(&anchor);
        let mut retries = 0usize;
        let accepted = loop {
            let windowed = stage
                .clone()
                .with_trust_region(anchor.clone(), eps, params.norm);
            let sub = ArcSubproblem::from_problem(prob, &windowed)?;
            let (outcome, _) = alternating_projections(&sub, &params.ap)?;
            match outcome {
                ApOutcome::Feasible {
                    point,
                    objective,
                    lower_bound,
                    iterations,
                } => {
                    // Re-anchor at the true state response of the new
                    // control; a degenerate anchor means the window closed
                    // in on a fold of the equality manifold, so shrink it.
                    let recovered = newton_solve(
                        &prob.equalities,
                        point.y.as_slice(),
                        &zeros,
                        anchor.as_slice(),
                        1e-10,
                        60,
                    )
                    .and_then(|x| match linearize_equalities(prob, x.as_slice()) {
                        Ok(s) => Ok((x, s)),
                        Err(e) => Err(e.into()),
                    });
                    match recovered {
                        Ok((x, next_stage)) => {
                            break Some((point, objective, lower_bound, iterations, x, next_stage))
                        }
                        Err(
                            AlgoError::NewtonFailed { .. }
                            | AlgoError::NewtonSingular
                            | AlgoError::Aro(AroError::RankDeficient(_)),
                        ) if retries < 5 => {
                            retries += 1;
                            eps /= 2.0;
                        }
                        Err(
                            AlgoError::NewtonFailed { .. }
                            | AlgoError::NewtonSingular
                            | AlgoError::Aro(AroError::RankDeficient(_)),
                        ) => {
                            history.push(OuterIteration {
                                index: j,
                                status: OuterStatus::Degenerate,
                                objective: f64::INFINITY,
                                lower_bound: Some(lower_bound),
                                y: Some(point.y.clone()),
                                x: None,
                                ap_iterations: iterations,
                                epsilon: eps,
                                retries,
                                seconds: clock.elapsed().as_secs_f64(),
                            });
                            break None;
                        }
                        Err(e) => return Err(e),
                    }
                }
                ApOutcome::Infeasible => {
                    history.push(OuterIteration {
                        index: j,
                        status: OuterStatus::LowerBoundInfeasible,
                        objective: f64::INFINITY,
                        lower_bound: None,
                        y: None,
                        x: None,
                        ap_iterations: 0,
                        epsilon: eps,
                        retries,
                        seconds: clock.elapsed().as_secs_f64(),
                    });
                    break None;
                }
                ApOutcome::Inconclusive { iterations } => {
                    history.push(OuterIteration {
                        index: j,
                        status: OuterStatus::Inconclusive,
                        objective: f64::INFINITY,
                        lower_bound: None,
                        y: None,
                        x: None,
                        ap_iterations: iterations,
                        epsilon: eps,
                        retries,
                        seconds: clock.elapsed().as_secs_f64(),
                    });
                    break None;
                }
                ApOutcome::NumericalProblem { iterations, .. } => {
                    history.push(OuterIteration {
                        index: j,
                        status: OuterStatus::NumericalProblem,
                        objective: f64::INFINITY,
                        lower_bound: None,
                        y: None,
                        x: None,
                        ap_iterations: iterations,
                        epsilon: eps,
                        retries,
                        seconds: clock.elapsed().as_secs_f64(),
                    });
                    break None;
                }
            }
        };
        let Some((point, objective, lower_bound, iterations, x, next_stage)) = accepted else {
            return Ok(history);
        };
        history.push(OuterIteration {
            index: j,
            status: OuterStatus::Feasible,
            objective,
            lower_bound: Some(lower_bound),
            y: Some(point.y.clone()),
            x: Some(x.clone()),
            ap_iterations: iterations,
            epsilon: eps,
            retries,
            seconds: clock.elapsed().as_secs_f64(),
        });
        let improvement = f_prev - objective;
        anchor = x;
        stage = next_stage;
        if j >= 2 && improvement <= params.tol {
            break;
        }
        f_prev = objective;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{Space, Var};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn yv(i: usize) -> Polynomial {
        Polynomial::var(Var::new(Block::Control, i))
    }

    fn xv(i: usize) -> Polynomial {
        Polynomial::var(Var::new(Block::State, i))
    }

    fn zv(i: usize) -> Polynomial {
        Polynomial::var(Var::new(Block::Uncertainty, i))
    }

    fn c(v: f64) -> Polynomial {
        Polynomial::constant(v)
    }

    // Worst case of a univariate quadratic over an interval; the analytic
    // oracle for the toy subproblems below.
    fn worst_case_1d(alpha: f64, beta: f64, gamma0: f64, lo: f64, hi: f64) -> f64 {
        let mut best = f64::INFINITY;
        for z in [lo, hi] {
            best = best.min(alpha * z * z + beta * z + gamma0);
        }
        if alpha > 0.0 {
            let v = -beta / (2.0 * alpha);
            if v > lo && v < hi {
                best = best.min(alpha * v * v + beta * v + gamma0);
            }
        }
        best
    }

    // One robust constraint 1 - (y + zeta)^2 over |zeta| <= sqrt(radius);
    // robust-feasible exactly for |y| <= 1 - sqrt(radius).
    fn interval_subproblem(radius: f64) -> ArcSubproblem {
        let qc = QuadraticRobustConstraint {
            a: DMatrix::from_element(1, 1, -1.0),
            b: DMatrix::from_element(1, 1, -2.0),
            b_lin: DVector::zeros(1),
            c: DMatrix::from_element(1, 1, -1.0),
            c_lin: DVector::zeros(1),
            d: 1.0,
            psd_flag: false,
        };
        ArcSubproblem::new(
            vec![qc],
            Ellipsoid::new(DVector::zeros(1), DMatrix::identity(1, 1), radius).unwrap(),
            vec![-2.0],
            vec![2.0],
            vec![],
            DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap()
    }

    // Convex instance: minimize y over [-1, 1] subject to y^2 + 10 >= 0,
    // whose coupling is semidefinite and therefore lives in the convex set.
    fn convex_subproblem() -> ArcSubproblem {
        let qc = QuadraticRobustConstraint {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::zeros(1, 1),
            b_lin: DVector::zeros(1),
            c: DMatrix::from_element(1, 1, 1.0),
            c_lin: DVector::zeros(1),
            d: 10.0,
            psd_flag: true,
        };
        ArcSubproblem::new(
            vec![qc],
            Ellipsoid::unit_ball(1),
            vec![-1.0],
            vec![1.0],
            vec![],
            DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn lower_bound_matches_analytic_optimum() {
        // Sanity-check the oracle first: with |zeta| <= 0.5 the constraint
        // admits y down to -0.5 and no further.
        assert!(worst_case_1d(-1.0, 2.0 * (-0.5) - 0.0, 1.0 - 0.25, -0.5, 0.5) >= -1e-12);
        assert!(worst_case_1d(-1.0, 2.0 * (-0.6), 1.0 - 0.36, -0.5, 0.5) < 0.0);
        let sub = interval_subproblem(0.25);
        match sdp_lower_bound(&sub).unwrap() {
            LowerBound::Solved { value, point } => {
                assert_relative_eq!(value, -0.5, epsilon = 1e-5);
                assert_relative_eq!(point.y[0], -0.5, epsilon = 1e-4);
            }
            other => panic!("expected a bound, got {other:?}"),
        }
    }

    #[test]
    fn lower_bound_detects_infeasibility() {
        // |zeta| <= 2 leaves no feasible y at all.
        let sub = interval_subproblem(4.0);
        assert!(matches!(
            sdp_lower_bound(&sub).unwrap(),
            LowerBound::Infeasible
        ));
    }

    // The interval subproblem with cost (y - 1)^2: robust feasibility allows
    // |y| <= 0.5, so the optimum sits at y = 0.5 with value 0.25.
    fn quadratic_cost_subproblem() -> ArcSubproblem {
        let mut sub = interval_subproblem(0.25);
        sub.obj_lin = DVector::from_element(1, -2.0);
        sub.obj_offset = 1.0;
        sub.with_quadratic_cost(DVector::from_element(1, 1.0))
            .unwrap()
    }

    #[test]
    fn quadratic_costs_shape_the_lower_bound() {
        let sub = quadratic_cost_subproblem();
        assert_relative_eq!(sub.f(&DVector::from_element(1, 0.5)), 0.25, epsilon = 1e-12);
        match sdp_lower_bound(&sub).unwrap() {
            LowerBound::Solved { value, point } => {
                assert_relative_eq!(value, 0.25, epsilon = 1e-5);
                assert_relative_eq!(point.y[0], 0.5, epsilon = 1e-4);
            }
            other => panic!("expected a bound, got {other:?}"),
        }
    }

    #[test]
    fn alternating_projections_minimize_a_quadratic_cost() {
        let sub = quadratic_cost_subproblem();
        let (outcome, _) = alternating_projections(&sub, &ApParams::default()).unwrap();
        match outcome {
            ApOutcome::Feasible {
                point,
                objective,
                lower_bound,
                ..
            } => {
                assert_relative_eq!(objective, 0.25, epsilon = 1e-3);
                assert_relative_eq!(point.y[0], 0.5, epsilon = 1e-2);
                assert_relative_eq!(lower_bound, 0.25, epsilon = 1e-4);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn cost_caps_bind_quadratic_objectives() {
        // With the cap at 0.25 the sublevel set {(y-1)^2 <= 0.25} meets the
        // robust-feasible interval [-0.5, 0.5] only at y = 0.5.
        let sub = quadratic_cost_subproblem();
        let distant = ApPoint {
            y: DVector::from_element(1, -2.0),
            gamma: DVector::zeros(1),
            lambda: DVector::zeros(1),
        };
        let target = project_b(&distant, &sub);
        let projected = project_a(&sub, &target, 0.25).unwrap();
        assert_relative_eq!(projected.y[0], 0.5, epsilon = 1e-4);
        assert!(sub.f(&projected.y) <= 0.25 + 1e-6);
    }

    #[test]
    fn cost_extraction_rejects_nonseparable_shapes() {
        let cross = yv(0).mul(&yv(1));
        assert!(matches!(
            separable_in_controls(&cross, 2),
            Err(AlgoError::ObjectiveNotSeparable)
        ));
        let concave = yv(0).mul(&yv(0)).scale(-1.0);
        assert!(matches!(
            separable_in_controls(&concave, 1),
            Err(AlgoError::ObjectiveNotSeparable)
        ));
        let ok = yv(0).mul(&yv(0)).scale(2.0).add(&yv(1).scale(3.0)).sub(&c(4.0));
        let (quad, lin, cst) = separable_in_controls(&ok, 2).unwrap();
        assert_relative_eq!(quad[0], 2.0);
        assert_relative_eq!(lin[1], 3.0);
        assert_relative_eq!(cst, -4.0);
        assert!(matches!(
            interval_subproblem(0.25).with_quadratic_cost(DVector::from_element(1, -1.0)),
            Err(AlgoError::ObjectiveNotSeparable)
        ));
    }

    #[test]
    fn project_b_applies_coupling() {
        let mut sub = interval_subproblem(0.25);
        sub.constraints[0].c = DMatrix::from_element(1, 1, 1.0);
        let p = ApPoint {
            y: DVector::from_element(1, 2.0),
            gamma: DVector::zeros(1),
            lambda: DVector::zeros(1),
        };
        let q = project_b(&p, &sub);
        assert_relative_eq!(q.gamma[0], 4.0);
        assert_relative_eq!(q.y[0], 2.0);
        // Idempotence: a point on the coupling stays put.
        let r = project_b(&q, &sub);
        assert_relative_eq!(r.gamma[0], 4.0);
    }

    #[test]
    fn project_b_skips_convexified_couplings() {
        let sub = convex_subproblem();
        let p = ApPoint {
            y: DVector::from_element(1, 2.0),
            gamma: DVector::from_element(1, 7.0),
            lambda: DVector::zeros(1),
        };
        let q = project_b(&p, &sub);
        assert_relative_eq!(q.gamma[0], 7.0);
    }

    // Membership set {gamma >= 1 + lambda, lambda >= 0} via a constraint
    // with no uncertainty terms and d = -1 over the unit ball.
    fn halfspace_subproblem() -> ArcSubproblem {
        let qc = QuadraticRobustConstraint {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::zeros(1, 1),
            b_lin: DVector::zeros(1),
            c: DMatrix::zeros(1, 1),
            c_lin: DVector::zeros(1),
            d: -1.0,
            psd_flag: true,
        };
        ArcSubproblem::new(
            vec![qc],
            Ellipsoid::unit_ball(1),
            vec![-1.0],
            vec![1.0],
            vec![],
            DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn project_a_clamps_to_halfspace() {
        let sub = halfspace_subproblem();
        let target = ApPoint {
            y: DVector::zeros(1),
            gamma: DVector::zeros(1),
            lambda: DVector::zeros(1),
        };
        let p = project_a(&sub, &target, 1e5).unwrap();
        assert_relative_eq!(p.gamma[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn project_a_fixes_interior_targets() {
        let sub = halfspace_subproblem();
        let target = ApPoint {
            y: DVector::from_element(1, 0.5),
            gamma: DVector::from_element(1, 2.0),
            lambda: DVector::zeros(1),
        };
        let p = project_a(&sub, &target, 1e5).unwrap();
        assert_relative_eq!(p.gamma[0], 2.0, epsilon = 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        // Projection onto a separable set (a control box and one halfspace
        // on the lifted scalar) matches the coordinatewise clamp, which is
        // the exact quadratic-programming solution in the separable case.
        #[test]
        fn project_a_matches_clamp_oracle(
            t0 in -2.0f64..2.0,
            t1 in -2.0f64..2.0,
            tg in -13.0f64..-7.0,
        ) {
            // Indefinite coupling matrix so both controls count as
            // non-convex; the block itself only asks gamma >= lambda - 10.
            let qc = QuadraticRobustConstraint {
                a: DMatrix::zeros(1, 1),
                b: DMatrix::zeros(2, 1),
                b_lin: DVector::zeros(1),
                c: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
                c_lin: DVector::zeros(2),
                d: 10.0,
                psd_flag: false,
            };
            let sub = ArcSubproblem::new(
                vec![qc],
                Ellipsoid::unit_ball(1),
                vec![-1.0, -1.0],
                vec![1.0, 1.0],
                vec![],
                DVector::from_vec(vec![1.0, 0.0]),
                0.0,
            ).unwrap();
            let target = ApPoint {
                y: DVector::from_vec(vec![t0, t1]),
                gamma: DVector::from_element(1, tg),
                lambda: DVector::zeros(1),
            };
            let p = project_a(&sub, &target, 1e5).unwrap();
            // The distance value converges at the solver's gap tolerance;
            // the coordinates themselves are quadratically flat around the
            // projection and carry the square root of that accuracy.
            let oracle = ((t0 - t0.clamp(-1.0, 1.0)).powi(2)
                + (t1 - t1.clamp(-1.0, 1.0)).powi(2)
                + (tg - tg.max(-10.0)).powi(2))
            .sqrt();
            let mask = sub.nonconvex_mask();
            let achieved = nc_gamma_distance(&p, &target, &mask);
            prop_assert!((achieved - oracle).abs() <= 1e-6);
            prop_assert!((p.y[0] - t0.clamp(-1.0, 1.0)).abs() <= 1e-3);
            prop_assert!((p.y[1] - t1.clamp(-1.0, 1.0)).abs() <= 1e-3);
            prop_assert!((p.gamma[0] - tg.max(-10.0)).abs() <= 1e-3);
        }
    }

    #[test]
    fn alternating_projections_solves_interval_toy() {
        let sub = interval_subproblem(0.25);
        let params = ApParams::default();
        let (outcome, trace) = alternating_projections(&sub, &params).unwrap();
        let (point, objective, lower_bound) = match outcome {
            ApOutcome::Feasible {
                point,
                objective,
                lower_bound,
                ..
            } => (point, objective, lower_bound),
            other => panic!("expected feasible, got {other:?}"),
        };
        assert_relative_eq!(objective, -0.5, epsilon = 1e-4);
        // Sandwich: the lower bound never exceeds the accepted objective.
        assert!(lower_bound <= objective + 1e-6);
        assert!(trace.accepted_objectives.iter().all(|&v| lower_bound <= v + 1e-6));
        // Fixed point: one further projection round stays within tolerance.
        let mask = sub.nonconvex_mask();
        let p1 = project_b(&point, &sub);
        let p0 = project_a(&sub, &p1, 1e5).unwrap();
        assert!(nc_gamma_distance(&p0, &p1, &mask) <= 2.0 * params.tol);
        // Robustness: sample the uncertainty interval with boundary bias.
        let y = point.y[0];
        for k in 0..10_000 {
            let z = if k % 2 == 0 {
                if k % 4 == 0 {
                    -0.5
                } else {
                    0.5
                }
            } else {
                -0.5 + (k as f64 / 10_000.0)
            };
            let value = 1.0 - (y + z) * (y + z);
            assert!(value >= -1e-6, "violated at zeta = {z}");
        }
    }

    #[test]
    fn alternating_projections_reports_infeasible() {
        let sub = interval_subproblem(4.0);
        let (outcome, _) = alternating_projections(&sub, &ApParams::default()).unwrap();
        assert!(matches!(outcome, ApOutcome::Infeasible));
    }

    #[test]
    fn alternating_projections_converges_immediately_on_convex_instances() {
        let sub = convex_subproblem();
        let (outcome, _) = alternating_projections(&sub, &ApParams::default()).unwrap();
        match outcome {
            ApOutcome::Feasible {
                objective,
                iterations,
                ..
            } => {
                assert_relative_eq!(objective, -1.0, epsilon = 1e-5);
                assert_eq!(iterations, 1);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    // Couplings that cannot meet the convex set: gamma must reach 1, but
    // gamma = 2 y0 y1 tops out at 0.98 over the box.
    fn gap_subproblem() -> ArcSubproblem {
        let qc = QuadraticRobustConstraint {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::zeros(2, 1),
            b_lin: DVector::zeros(1),
            c: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            c_lin: DVector::zeros(2),
            d: -1.0,
            psd_flag: false,
        };
        ArcSubproblem::new(
            vec![qc],
            Ellipsoid::unit_ball(1),
            vec![0.6, 0.6],
            vec![0.7, 0.7],
            vec![],
            DVector::from_vec(vec![1.0, 1.0]),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn alternating_projections_stall_is_inconclusive() {
        let sub = gap_subproblem();
        let (outcome, trace) = alternating_projections(&sub, &ApParams::default()).unwrap();
        match outcome {
            ApOutcome::Inconclusive { iterations } => {
                // The stall detector fires well before the cap.
                assert!(iterations < 40, "took {iterations} iterations");
                assert!(trace.distances.len() >= FLAT_WINDOW);
            }
            other => panic!("expected inconclusive, got {other:?}"),
        }
    }

    #[test]
    fn alternating_projections_cap_counts_one_past_the_limit() {
        let sub = gap_subproblem();
        // A decreasing step sequence keeps the distance shrinking just
        // enough to dodge the stall rule, so the cap itself fires.
        let params = ApParams {
            max_iter: 5,
            nu: vec![1.0; 5],
            ..ApParams::default()
        };
        let (outcome, _) = alternating_projections(&sub, &params).unwrap();
        match outcome {
            ApOutcome::Inconclusive { iterations } => assert_eq!(iterations, 6),
            other => panic!("expected inconclusive, got {other:?}"),
        }
    }

    #[test]
    fn line_search_keeps_accepted_objectives_monotone() {
        let sub = convex_subproblem();
        let params = ApParams {
            nu: vec![0.5; 100],
            ..ApParams::default()
        };
        let (outcome, trace) = alternating_projections(&sub, &params).unwrap();
        match outcome {
            ApOutcome::Feasible {
                objective,
                lower_bound,
                ..
            } => {
                assert_relative_eq!(objective, -1.0, epsilon = 1e-5);
                assert!(lower_bound <= objective + 1e-6);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
        assert!(trace.accepted_objectives.len() > 1);
        for w in trace.accepted_objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-7);
        }
    }

    #[test]
    fn newton_recovers_state() {
        // x^2 = y from x0 = 1 at y = 4.
        let eqs = PolynomialVector::new(vec![xv(0).mul(&xv(0)).sub(&yv(0))]);
        let x = newton_solve(&eqs, &[4.0], &[], &[1.0], 1e-12, 50).unwrap();
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-9);
        // Coupled affine system with uncertainty.
        let eqs = PolynomialVector::new(vec![
            xv(0).sub(&yv(0)).sub(&zv(0)),
            xv(1).scale(2.0).sub(&xv(0)).sub(&c(1.0)),
        ]);
        let x = newton_solve(&eqs, &[1.5], &[0.25], &[0.0, 0.0], 1e-12, 50).unwrap();
        assert_relative_eq!(x[0], 1.75, epsilon = 1e-10);
        assert_relative_eq!(x[1], 1.375, epsilon = 1e-10);
    }

    #[test]
    fn newton_reports_singular_jacobian() {
        let eqs = PolynomialVector::new(vec![xv(0).mul(&xv(0)).sub(&yv(0))]);
        // From x0 = 0 with nonzero residual the Jacobian 2x vanishes.
        match newton_solve(&eqs, &[1.0], &[], &[0.0], 1e-12, 50) {
            Err(AlgoError::NewtonSingular) => {}
            other => panic!("expected singular Jacobian, got {other:?}"),
        }
    }

    fn tiny_ball() -> UncertaintySet {
        UncertaintySet::Ellipsoid(
            Ellipsoid::new(DVector::zeros(1), DMatrix::identity(1, 1), 1e-12).unwrap(),
        )
    }

    // Minimize y over y >= -0.5 with state x = y + zeta and the inactive
    // constraint x + 1 >= 0; with negligible uncertainty the robust optimum
    // coincides with the nominal one at the certain box bound.
    fn chain_problem() -> AroProblem {
        let space = Space::new()
            .with(Block::Control, 1)
            .with(Block::State, 1)
            .with(Block::Uncertainty, 1);
        AroProblem::new(
            space,
            yv(0),
            vec![-0.5],
            vec![2.0],
            vec![],
            PolynomialVector::new(vec![xv(0).sub(&yv(0)).sub(&zv(0))]),
            PolynomialVector::new(vec![xv(0).add(&c(1.0))]),
            vec![],
            vec![],
            tiny_ball(),
        )
        .unwrap()
    }

    #[test]
    fn outer_loop_stops_at_stationary_nominal_optimum() {
        // Starting from the nominal optimum with negligible uncertainty the
        // first window reproduces it and the second detects stagnation.
        let prob = chain_problem();
        let params = OuterParams {
            max_outer: 10,
            eps: EpsRule::Fixed(0.2),
            ..OuterParams::default()
        };
        let history = dynamic_outer(&prob, &[-0.5], &[-0.5], &params).unwrap();
        let robust: Vec<_> = history.iter().filter(|r| r.index > 0).collect();
        assert!(robust.len() <= 2, "ran {} iterations", robust.len());
        let last = robust.last().unwrap();
        assert_eq!(last.status, OuterStatus::Feasible);
        assert_relative_eq!(last.objective, -0.5, epsilon = 1e-5);
    }

    #[test]
    fn outer_loop_walks_windows_toward_the_optimum() {
        // x = y with a distant bound x + 5 >= 0: each window of radius two
        // moves the anchor until the bound binds at y = -5.
        let space = Space::new()
            .with(Block::Control, 1)
            .with(Block::State, 1)
            .with(Block::Uncertainty, 1);
        let prob = AroProblem::new(
            space,
            yv(0),
            vec![-10.0],
            vec![10.0],
            vec![],
            PolynomialVector::new(vec![xv(0).sub(&yv(0))]),
            PolynomialVector::new(vec![xv(0).add(&c(5.0))]),
            vec![],
            vec![],
            tiny_ball(),
        )
        .unwrap();
        let params = OuterParams {
            max_outer: 10,
            eps: EpsRule::Fixed(2.0),
            ..OuterParams::default()
        };
        let history = dynamic_outer(&prob, &[0.0], &[0.0], &params).unwrap();
        let objectives: Vec<f64> = history
            .iter()
            .filter(|r| r.index > 0 && r.status == OuterStatus::Feasible)
            .map(|r| r.objective)
            .collect();
        assert!(objectives.len() >= 3);
        for w in objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-7);
        }
        assert_relative_eq!(*objectives.last().unwrap(), -5.0, epsilon = 1e-3);
        // Finiteness: far fewer iterations than the worst-case budget.
        let budget = ((history[0].objective + 5.0) / params.tol).ceil() as usize;
        assert!(history.len() <= budget);
    }

    #[test]
    fn outer_loop_records_infeasible_windows() {
        // Contradictory bounds on the state response leave no feasible
        // control; the lower bound proves it and the loop stops.
        let space = Space::new()
            .with(Block::Control, 1)
            .with(Block::State, 1)
            .with(Block::Uncertainty, 1);
        let prob = AroProblem::new(
            space,
            yv(0),
            vec![-2.0],
            vec![2.0],
            vec![],
            PolynomialVector::new(vec![xv(0).sub(&yv(0)).sub(&zv(0))]),
            PolynomialVector::new(vec![
                xv(0).sub(&c(0.5)),
                c(0.25).sub(&xv(0)),
            ]),
            vec![],
            vec![],
            tiny_ball(),
        )
        .unwrap();
        // Nominal start satisfying the equality but not the inequalities is
        // fine; the window subproblem is what proves infeasibility.
        let history = dynamic_outer(
            &prob,
            &[0.4],
            &[0.4],
            &OuterParams {
                eps: EpsRule::Fixed(1.0),
                ..OuterParams::default()
            },
        )
        .unwrap();
        let last = history.last().unwrap();
        assert_eq!(last.status, OuterStatus::LowerBoundInfeasible);
        assert!(last.objective.is_infinite());
    }

    #[test]
    fn outer_loop_rejects_rank_deficient_start() {
        // x1 x2 = y^2 with x1 + x2 = 2y collapses to the double root
        // x1 = x2 = y, where the Jacobian is singular for every anchor.
        let space = Space::new()
            .with(Block::Control, 1)
            .with(Block::State, 2)
            .with(Block::Uncertainty, 1);
        let prob = AroProblem::new(
            space,
            yv(0),
            vec![0.5, 0.5][..1].to_vec(),
            vec![2.0],
            vec![],
            PolynomialVector::new(vec![
                xv(0).mul(&xv(1)).sub(&yv(0).mul(&yv(0))),
                xv(0).add(&xv(1)).sub(&yv(0).scale(2.0)),
            ]),
            PolynomialVector::new(vec![]),
            vec![],
            vec![],
            tiny_ball(),
        )
        .unwrap();
        match dynamic_outer(&prob, &[1.0], &[1.0, 1.0], &OuterParams::default()) {
            Err(AlgoError::RankDeficientStart(_)) => {}
            other => panic!("expected rank-deficient start, got {other:?}"),
        }
    }

    #[test]
    fn outer_loop_shrinks_window_on_degenerate_anchor() {
        // x2 = y - 1 and x1 (x2 + 1) = y - x2 - x1... the system below has
        // a fold at y = 0: the first row becomes unsolvable, so the Newton
        // recovery fails (or lands on a wildly ill-conditioned anchor) and
        // the window must shrink until the control stays clear of the fold.
        let space = Space::new()
            .with(Block::Control, 1)
            .with(Block::State, 2)
            .with(Block::Uncertainty, 1);
        let prob = AroProblem::new(
            space,
            yv(0),
            vec![0.0],
            vec![1.0],
            vec![],
            PolynomialVector::new(vec![
                xv(0)
                    .mul(&xv(1))
                    .add(&xv(1))
                    .add(&xv(0))
                    .sub(&yv(0)),
                xv(1).sub(&yv(0)).add(&c(1.0)),
            ]),
            PolynomialVector::new(vec![xv(0).add(&zv(0)).add(&c(100.0))]),
            vec![],
            vec![],
            tiny_ball(),
        )
        .unwrap();
        // Start at y = 0.5: x2 = -0.5, x1 = 2.
        let params = OuterParams {
            max_outer: 1,
            eps: EpsRule::Fixed(5.0),
            ..OuterParams::default()
        };
        let history = dynamic_outer(&prob, &[0.5], &[2.0, -0.5], &params).unwrap();
        let first = &history[1];
        assert_eq!(first.status, OuterStatus::Feasible);
        assert!(first.retries >= 1, "expected window shrinkage");
        let y = first.y.as_ref().unwrap()[0];
        assert!(y > 0.01 && y < 0.5, "fold not avoided: y = {y}");
    }

    #[test]
    fn params_are_validated() {
        let sub = convex_subproblem();
        let bad = ApParams {
            tol: 0.0,
            ..ApParams::default()
        };
        assert!(matches!(
            alternating_projections(&sub, &bad),
            Err(AlgoError::BadParams(_))
        ));
        let bad = ApParams {
            nu: vec![1.5],
            ..ApParams::default()
        };
        assert!(matches!(
            alternating_projections(&sub, &bad),
            Err(AlgoError::BadParams(_))
        ));
    }

    #[test]
    fn eps_rule_scales_with_network_size() {
        let x = DVector::from_element(4, 1.0);
        let small = EpsRule::NetworkScaled { size: 9 };
        let large = EpsRule::NetworkScaled { size: 57 };
        assert_relative_eq!(small.epsilon(&x), 0.2);
        assert_relative_eq!(large.epsilon(&x), 2.0 / 30.0);
        assert_relative_eq!(EpsRule::Fixed(0.7).epsilon(&x), 0.7);
    }
}
