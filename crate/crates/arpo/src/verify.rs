//! Posterior certification of candidate first-stage decisions.
//!
//! Once the solution machinery produces a candidate control, two one-sided
//! tests bound its quality. The feasibility check certifies that every
//! second-stage requirement holds across the whole scenario set by solving,
//! per constraint, a weighted sum-of-squares program over the equality
//! variety: the smallest certified shift `t` with `G + t >= 0` on the
//! admissible set is an upper bound on `-min G`, so a nonpositive shift
//! proves the constraint. The infeasibility check searches for a low-degree
//! polynomial in the scenario variables that is certifiably nonnegative on
//! the admissible set yet integrates to a negative value over the scenario
//! set; such a separator proves that some scenarios admit no valid
//! second stage. Both directions are conservative: a failed search is
//! reported as inconclusive, never as the opposite verdict.
//!
//! Every certificate returned by the solver is re-expanded symbolically and
//! its coefficient residual checked before a verdict is attached.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::aro::AroProblem;
use crate::conic::{ProgramBuilder, PsdIds, SolveResult, Status, VarIds};
use crate::poly::{Assignment, Block, Monomial, PolyError, Polynomial, Var};
use crate::uncertainty::{Ellipsoid, UncertaintyError, UncertaintySet};

/// A certified shift below this margin counts as "the constraint holds".
pub const VERDICT_TOL: f64 = 1e-7;

/// Largest acceptable coefficient error when a certificate is re-expanded
/// against its target identity.
pub const RESIDUAL_TOL: f64 = 1e-7;

/// Tolerance for the candidate-in-control-set precondition.
const CANDIDATE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("expected {expected} control values, got {got}")]
    WrongControlCount { expected: usize, got: usize },
    #[error("candidate violates the control set by {0:.3e}")]
    CandidateOutsideControlSet(f64),
    #[error("infeasibility checks need an ellipsoidal scenario set")]
    UnsupportedUncertainty,
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// Outcome of a one-sided test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Every requirement was certified across the scenario set.
    Feasible,
    /// A verified separator proves some scenarios admit no valid recourse.
    NotFeasible,
    /// Nothing was proved either way at the configured degree.
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Feasible => write!(f, "F"),
            Verdict::NotFeasible => write!(f, "NF"),
            Verdict::Inconclusive => write!(f, "IC"),
        }
    }
}

/// Variable support used by each per-constraint subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportPolicy {
    /// All scenario and state variables, regardless of the target.
    Full,
    /// The variables of the target constraint, expanded `hops` times through
    /// constraints sharing a variable. Certificates over a restricted
    /// support stay valid; only detection power is lost. An ellipsoidal
    /// scenario bound is marginalized onto the retained coordinates instead
    /// of being dropped.
    Local { hops: usize },
}

/// Settings for [`feasibility_check`].
#[derive(Debug, Clone)]
pub struct FeasConfig {
    /// Total degree of every multiplier-generator product.
    pub degree: usize,
    /// Cap on the degree of the unweighted square term; keeping it at two
    /// shrinks the dominant Gram block without hurting the checks in
    /// practice.
    pub sigma0_degree: usize,
    pub support: SupportPolicy,
    /// Append each certified constraint to the generator list of later
    /// subproblems, so knowledge accumulates across the pass.
    pub chain: bool,
    /// Skip the whole check when scenario plus state variables exceed this.
    pub var_cap: usize,
}

impl Default for FeasConfig {
    fn default() -> FeasConfig {
        FeasConfig {
            degree: 4,
            sigma0_degree: 2,
            support: SupportPolicy::Local { hops: 1 },
            chain: true,
            var_cap: 40,
        }
    }
}

/// Settings for the infeasibility checks.
#[derive(Debug, Clone)]
pub struct InfeasConfig {
    /// Degree of the separating polynomial in the scenario variables.
    pub degree: usize,
    /// Degree of the nonnegativity certificate backing the separator.
    pub certificate_degree: usize,
    /// Cap on the degree of the unweighted square term.
    pub sigma0_degree: usize,
    /// Skip the check when the participating variables exceed this count.
    pub var_cap: usize,
}

impl Default for InfeasConfig {
    fn default() -> InfeasConfig {
        InfeasConfig {
            degree: 2,
            certificate_degree: 2,
            sigma0_degree: 2,
            var_cap: 40,
        }
    }
}

/// Result of one per-constraint subproblem.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    /// Certified `target + bound >= 0` on the admissible set; the constraint
    /// holds everywhere iff the bound is nonpositive.
    Bound(f64),
    /// The shift can be driven to minus infinity, which certifies that the
    /// admissible set itself is empty.
    Unbounded,
    /// No certificate at this degree, or a numerical failure.
    Inconclusive(String),
}

#[derive(Debug, Clone)]
pub struct ConstraintCheck {
    pub label: String,
    pub status: CheckStatus,
    /// Worst coefficient error of the re-expanded certificate, when one
    /// exists.
    pub residual: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub checks: Vec<ConstraintCheck>,
    pub verdict: Verdict,
    /// True when the variable cap was hit and nothing was solved.
    pub skipped: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct InfeasibilityReport {
    /// Coefficients of the separator over scenario monomials.
    pub certificate: Vec<(Monomial, f64)>,
    /// Integral of the separator over the scenario set.
    pub objective: Option<f64>,
    pub verdict: Verdict,
    pub residual: Option<f64>,
    pub skipped: bool,
    pub seconds: f64,
}

fn total_degree(p: &Polynomial) -> usize {
    p.terms().map(|(m, _)| m.degree() as usize).max().unwrap_or(0)
}

/// All monomials over `vars` up to total degree `deg`, graded, deterministic.
fn basis_over(vars: &[Var], deg: usize) -> Vec<Monomial> {
    let mut out = vec![Monomial::one()];
    // Extend only by variables at or after the last one used, so every
    // monomial is produced exactly once.
    let mut layer: Vec<(usize, Monomial)> = vec![(0, Monomial::one())];
    for _ in 0..deg {
        let mut next = Vec::with_capacity(layer.len() * vars.len());
        for (start, m) in &layer {
            for (k, v) in vars.iter().enumerate().skip(*start) {
                let grown = m.mul(&Monomial::var(*v));
                out.push(grown.clone());
                next.push((k, grown));
            }
        }
        layer = next;
    }
    out
}

fn poly_vars(p: &Polynomial) -> BTreeSet<Var> {
    p.variables().into_iter().collect()
}

/// Variables of the target, expanded `hops` times through any constraint
/// sharing a variable with the current support.
fn local_support(target: &Polynomial, pool: &[&Polynomial], hops: usize) -> BTreeSet<Var> {
    let mut support = poly_vars(target);
    for _ in 0..hops {
        let mut grown = support.clone();
        for p in pool {
            let vars = poly_vars(p);
            if vars.iter().any(|v| support.contains(v)) {
                grown.extend(vars);
            }
        }
        if grown.len() == support.len() {
            break;
        }
        support = grown;
    }
    support
}

/// Membership polynomial of the projection of `omega` onto the scenario
/// coordinates in `keep` (indices into the scenario block, sorted). The
/// projection of an ellipsoid is the ellipsoid of the Schur complement, so
/// the marginal bound is exact, not merely an outer box.
fn marginal_membership(omega: &Ellipsoid, keep: &[usize]) -> Option<Polynomial> {
    if keep.is_empty() {
        return None;
    }
    let n = omega.dim();
    if keep.len() == n {
        return Some(omega.membership_polynomial(Block::Uncertainty));
    }
    let rest: Vec<usize> = (0..n).filter(|k| !keep.contains(k)).collect();
    let sigma = omega.sigma();
    let s_jj = DMatrix::from_fn(keep.len(), keep.len(), |a, b| sigma[(keep[a], keep[b])]);
    let s_jk = DMatrix::from_fn(keep.len(), rest.len(), |a, b| sigma[(keep[a], rest[b])]);
    let s_kk = DMatrix::from_fn(rest.len(), rest.len(), |a, b| sigma[(rest[a], rest[b])]);
    // S_kk is a principal block of a positive definite matrix.
    let inv_kj = s_kk.lu().solve(&s_jk.transpose())?;
    let schur = &s_jj - &s_jk * &inv_kj;
    let mut p = Polynomial::constant(omega.radius());
    for (a, &ka) in keep.iter().enumerate() {
        for (b, &kb) in keep.iter().enumerate() {
            let s = schur[(a, b)];
            if s == 0.0 {
                continue;
            }
            let va = Polynomial::var(Var::new(Block::Uncertainty, ka))
                .add(&Polynomial::constant(-omega.center()[ka]));
            let vb = Polynomial::var(Var::new(Block::Uncertainty, kb))
                .add(&Polynomial::constant(-omega.center()[kb]));
            p = p.sub(&va.mul(&vb).scale(s));
        }
    }
    Some(p)
}

/// One square block of the certificate: `gen` is `None` for the unweighted
/// term, otherwise an index into the generator list.
struct SosBlock {
    gen: Option<usize>,
    ids: PsdIds,
    basis: Vec<Monomial>,
}

/// Free multiplier of one equality.
struct FreeBlock {
    eq: usize,
    ids: VarIds,
    basis: Vec<Monomial>,
}

struct CertificateHandles {
    sos: Vec<SosBlock>,
    free: Vec<FreeBlock>,
}

type RowMap = BTreeMap<Monomial, Vec<(usize, f64)>>;

/// Emits the cone variables of `sigma_0 + sum_j sigma_j g_j + sum_l phi_l e_l`
/// and returns, per monomial, the columns contributing to its coefficient.
fn emit_certificate(
    builder: &mut ProgramBuilder,
    gens: &[Polynomial],
    eqs: &[Polynomial],
    support: &[Var],
    degree: usize,
    sigma0_degree: usize,
) -> (CertificateHandles, RowMap) {
    let mut rows: RowMap = BTreeMap::new();
    let mut handles = CertificateHandles {
        sos: Vec::new(),
        free: Vec::new(),
    };
    let one = Polynomial::constant(1.0);
    let weighted = std::iter::once((None, &one))
        .chain(gens.iter().enumerate().map(|(k, g)| (Some(k), g)));
    for (gen, g) in weighted {
        let budget = match gen {
            None => sigma0_degree,
            Some(_) => match degree.checked_sub(total_degree(g)) {
                Some(room) => room,
                None => continue,
            },
        };
        let basis = basis_over(support, budget / 2);
        let ids = builder.psd(basis.len());
        for i in 0..basis.len() {
            for j in i..basis.len() {
                let bb = basis[i].mul(&basis[j]);
                for (mg, cg) in g.terms() {
                    let mono = bb.mul(mg);
                    rows.entry(mono)
                        .or_default()
                        .extend(ids.tr_terms(&[(j, i, cg)]));
                }
            }
        }
        handles.sos.push(SosBlock { gen, ids, basis });
    }
    for (eq, e) in eqs.iter().enumerate() {
        let d_e = total_degree(e);
        if d_e > degree {
            continue;
        }
        let basis = basis_over(support, degree - d_e);
        let ids = builder.free(basis.len());
        for (k, b) in basis.iter().enumerate() {
            for (me, ce) in e.terms() {
                rows.entry(b.mul(me)).or_default().push((ids.at(k), ce));
            }
        }
        handles.free.push(FreeBlock { eq, ids, basis });
    }
    (handles, rows)
}

/// Re-expands the certificate from the solver point.
fn reconstruct(
    result: &SolveResult,
    handles: &CertificateHandles,
    gens: &[Polynomial],
    eqs: &[Polynomial],
) -> Polynomial {
    let one = Polynomial::constant(1.0);
    let mut lhs = Polynomial::zero();
    for block in &handles.sos {
        let gram = result.psd_matrix(block.ids);
        let mut terms = Vec::with_capacity(block.basis.len() * block.basis.len());
        for p in 0..block.basis.len() {
            for q in 0..block.basis.len() {
                terms.push((block.basis[p].mul(&block.basis[q]), gram[(p, q)]));
            }
        }
        let sigma = Polynomial::from_terms(terms);
        let g = block.gen.map_or(&one, |k| &gens[k]);
        lhs = lhs.add(&sigma.mul(g));
    }
    for block in &handles.free {
        let terms = block
            .basis
            .iter()
            .enumerate()
            .map(|(k, b)| (b.clone(), result.x[block.ids.at(k)]));
        let phi = Polynomial::from_terms(terms);
        lhs = lhs.add(&phi.mul(&eqs[block.eq]));
    }
    lhs
}

fn max_coef_diff(a: &Polynomial, b: &Polynomial) -> f64 {
    a.sub(b).terms().map(|(_, c)| c.abs()).fold(0.0, f64::max)
}

enum ShiftOutcome {
    Bound { value: f64, residual: f64 },
    Unbounded,
    NoCertificate(String),
}

/// Smallest `t` with a certified identity `target + t = sigma_0 + sum sigma_j
/// g_j + sum phi_l e_l`, an upper bound on `-min target` over the set the
/// generators and equalities describe.
fn min_certified_shift(
    target: &Polynomial,
    gens: &[Polynomial],
    eqs: &[Polynomial],
    support: &[Var],
    degree: usize,
    sigma0_degree: usize,
) -> ShiftOutcome {
    let mut builder = ProgramBuilder::default();
    let t = builder.free(1);
    let (handles, mut rows) = emit_certificate(&mut builder, gens, eqs, support, degree, sigma0_degree);
    for (m, _) in target.terms() {
        rows.entry(m.clone()).or_default();
    }
    rows.entry(Monomial::one()).or_default().push((t.at(0), -1.0));
    for (mono, cols) in &rows {
        let rhs = target.coefficient(mono);
        if cols.is_empty() {
            if rhs != 0.0 {
                return ShiftOutcome::NoCertificate(format!(
                    "coefficient of {mono} is outside the certificate span"
                ));
            }
            continue;
        }
        builder.eq(cols.iter().copied(), rhs);
    }
    builder.objective([(t.at(0), 1.0)], 0.0);
    let program = match builder.build() {
        Ok(p) => p,
        Err(e) => return ShiftOutcome::NoCertificate(e.to_string()),
    };
    let result = program.solve();
    match result.status {
        Status::Optimal => {
            let value = result.primal_objective;
            let lhs = reconstruct(&result, &handles, gens, eqs);
            let shifted = target.add(&Polynomial::constant(value));
            ShiftOutcome::Bound {
                value,
                residual: max_coef_diff(&lhs, &shifted),
            }
        }
        Status::DualInfeasible => ShiftOutcome::Unbounded,
        Status::PrimalInfeasible => {
            ShiftOutcome::NoCertificate("no certificate at this degree".into())
        }
        Status::NumericalProblem(why) => ShiftOutcome::NoCertificate(why),
    }
}

fn check_candidate(prob: &AroProblem, y: &[f64]) -> Result<(), VerifyError> {
    let n_y = prob.n_y();
    if y.len() != n_y {
        return Err(VerifyError::WrongControlCount {
            expected: n_y,
            got: y.len(),
        });
    }
    let mut worst = 0.0f64;
    for (j, &v) in y.iter().enumerate() {
        worst = worst
            .max(prob.control_lower[j] - v)
            .max(v - prob.control_upper[j]);
    }
    let at = Assignment {
        control: y,
        state: &[],
        uncertainty: &[],
        auxiliary: &[],
    };
    for g in &prob.control_ineqs {
        worst = worst.max(-g.eval(&at)?);
    }
    if worst > CANDIDATE_TOL {
        return Err(VerifyError::CandidateOutsideControlSet(worst));
    }
    Ok(())
}

/// Scenario-set bound as seen by one subproblem.
enum ScenarioBound<'a> {
    Ball(&'a Ellipsoid),
    Fixed(Vec<Polynomial>),
}

/// Certifies, constraint by constraint, that the candidate admits a valid
/// second stage across the whole scenario set. Targets are the robust
/// inequalities followed by the state-set rows; the admissible set couples
/// scenarios and states through the pinned equality system and the relaxed
/// state windows. One-sided: the verdict is `F` or `IC`, never `NF`.
pub fn feasibility_check(
    prob: &AroProblem,
    y: &[f64],
    config: &FeasConfig,
) -> Result<FeasibilityReport, VerifyError> {
    let clock = Instant::now();
    check_candidate(prob, y)?;
    if prob.n_x() + prob.n_zeta() > config.var_cap {
        return Ok(FeasibilityReport {
            checks: Vec::new(),
            verdict: Verdict::Inconclusive,
            skipped: true,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }
    let mut eqs: Vec<Polynomial> = Vec::with_capacity(prob.equalities.len());
    for e in &prob.equalities.entries {
        eqs.push(e.substitute_constants(Block::Control, y)?);
    }
    let scenario = match &prob.uncertainty {
        UncertaintySet::Ellipsoid(e) => ScenarioBound::Ball(e),
        other => ScenarioBound::Fixed(other.generators(Block::Uncertainty).entries),
    };
    if let UncertaintySet::Semialgebraic(s) = &prob.uncertainty {
        eqs.extend(s.equalities.iter().cloned());
    }
    let mut fixed: Vec<Polynomial> = Vec::new();
    if let ScenarioBound::Fixed(gens) = &scenario {
        fixed.extend(gens.iter().cloned());
    }
    fixed.extend(prob.relaxed_state_set.iter().cloned());

    let mut targets: Vec<(String, Polynomial)> = Vec::new();
    for (i, g) in prob.inequalities.entries.iter().enumerate() {
        targets.push((format!("G[{i}]"), g.substitute_constants(Block::Control, y)?));
    }
    for (i, p) in prob.state_set.iter().enumerate() {
        targets.push((format!("Sx[{i}]"), p.clone()));
    }

    let mut ambient: Vec<Var> = (0..prob.n_zeta())
        .map(|k| Var::new(Block::Uncertainty, k))
        .collect();
    ambient.extend((0..prob.n_x()).map(|k| Var::new(Block::State, k)));

    let mut chained: Vec<Polynomial> = Vec::new();
    let mut checks = Vec::with_capacity(targets.len());
    for (label, target) in &targets {
        let t0 = Instant::now();
        let (gens_sub, eqs_sub, support): (Vec<Polynomial>, Vec<Polynomial>, Vec<Var>) =
            match config.support {
                SupportPolicy::Full => {
                    let mut gens: Vec<Polynomial> = fixed.iter().chain(&chained).cloned().collect();
                    if let ScenarioBound::Ball(omega) = &scenario {
                        gens.push(omega.membership_polynomial(Block::Uncertainty));
                    }
                    (gens, eqs.clone(), ambient.clone())
                }
                SupportPolicy::Local { hops } => {
                    let pool: Vec<&Polynomial> =
                        eqs.iter().chain(&fixed).chain(&chained).collect();
                    let support = local_support(target, &pool, hops);
                    let mut gens: Vec<Polynomial> = fixed
                        .iter()
                        .chain(&chained)
                        .filter(|g| poly_vars(g).is_subset(&support))
                        .cloned()
                        .collect();
                    if let ScenarioBound::Ball(omega) = &scenario {
                        let keep: Vec<usize> = support
                            .iter()
                            .filter(|v| v.block == Block::Uncertainty)
                            .map(|v| v.index)
                            .collect();
                        if let Some(ball) = marginal_membership(omega, &keep) {
                            gens.push(ball);
                        }
                    }
                    let eqs_f = eqs
                        .iter()
                        .filter(|e| poly_vars(e).is_subset(&support))
                        .cloned()
                        .collect();
                    (gens, eqs_f, support.into_iter().collect())
                }
            };
        let (status, residual) = if total_degree(target) > config.degree {
            (
                CheckStatus::Inconclusive("target degree exceeds the certificate level".into()),
                None,
            )
        } else {
            match min_certified_shift(
                target,
                &gens_sub,
                &eqs_sub,
                &support,
                config.degree,
                config.sigma0_degree,
            ) {
                ShiftOutcome::Bound { value, residual } if residual <= RESIDUAL_TOL => {
                    if config.chain {
                        chained.push(target.add(&Polynomial::constant(value)));
                    }
                    (CheckStatus::Bound(value), Some(residual))
                }
                ShiftOutcome::Bound { residual, .. } => (
                    CheckStatus::Inconclusive(format!("certificate residual {residual:.3e}")),
                    Some(residual),
                ),
                ShiftOutcome::Unbounded => (CheckStatus::Unbounded, None),
                ShiftOutcome::NoCertificate(why) => (CheckStatus::Inconclusive(why), None),
            }
        };
        checks.push(ConstraintCheck {
            label: label.clone(),
            status,
            residual,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let verdict = if checks
        .iter()
        .all(|c| matches!(c.status, CheckStatus::Bound(v) if v <= VERDICT_TOL))
    {
        Verdict::Feasible
    } else {
        Verdict::Inconclusive
    };
    Ok(FeasibilityReport {
        checks,
        verdict,
        skipped: false,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Searches for a scenario-space separator: a polynomial nonnegative on the
/// admissible set (certified) whose integral over the scenario set is
/// negative. Both properties together prove that a set of scenarios of
/// positive volume admits no valid second stage at the candidate.
pub fn infeasibility_check(
    prob: &AroProblem,
    y: &[f64],
    config: &InfeasConfig,
) -> Result<InfeasibilityReport, VerifyError> {
    let clock = Instant::now();
    check_candidate(prob, y)?;
    let UncertaintySet::Ellipsoid(omega) = &prob.uncertainty else {
        return Err(VerifyError::UnsupportedUncertainty);
    };
    if prob.n_x() + prob.n_zeta() > config.var_cap {
        return Ok(skipped_separation(clock));
    }
    let mut eqs: Vec<Polynomial> = Vec::with_capacity(prob.equalities.len());
    for e in &prob.equalities.entries {
        eqs.push(e.substitute_constants(Block::Control, y)?);
    }
    let mut gens = vec![omega.membership_polynomial(Block::Uncertainty)];
    gens.extend(prob.state_set.iter().cloned());
    for g in &prob.inequalities.entries {
        gens.push(g.substitute_constants(Block::Control, y)?);
    }
    let mut support: Vec<Var> = (0..prob.n_zeta())
        .map(|k| Var::new(Block::Uncertainty, k))
        .collect();
    support.extend((0..prob.n_x()).map(|k| Var::new(Block::State, k)));
    separation_certificate(omega, prob.n_zeta(), &gens, &eqs, &support, config, clock)
}

/// Separator search over controls and scenarios jointly: a certificate here
/// proves that no admissible control covers the scenario set, independent of
/// any candidate.
pub fn global_infeasibility_check(
    prob: &AroProblem,
    config: &InfeasConfig,
) -> Result<InfeasibilityReport, VerifyError> {
    let clock = Instant::now();
    let UncertaintySet::Ellipsoid(omega) = &prob.uncertainty else {
        return Err(VerifyError::UnsupportedUncertainty);
    };
    if prob.n_x() + prob.n_zeta() + prob.n_y() > config.var_cap {
        return Ok(skipped_separation(clock));
    }
    let eqs = prob.equalities.entries.clone();
    let mut gens = vec![omega.membership_polynomial(Block::Uncertainty)];
    gens.extend(prob.state_set.iter().cloned());
    gens.extend(prob.inequalities.entries.iter().cloned());
    for (j, (&lo, &hi)) in prob
        .control_lower
        .iter()
        .zip(&prob.control_upper)
        .enumerate()
    {
        let yj = Polynomial::var(Var::new(Block::Control, j));
        if lo.is_finite() {
            gens.push(yj.add(&Polynomial::constant(-lo)));
        }
        if hi.is_finite() {
            gens.push(Polynomial::constant(hi).sub(&yj));
        }
    }
    gens.extend(prob.control_ineqs.iter().cloned());
    let mut support: Vec<Var> = (0..prob.n_y()).map(|k| Var::new(Block::Control, k)).collect();
    support.extend((0..prob.n_zeta()).map(|k| Var::new(Block::Uncertainty, k)));
    support.extend((0..prob.n_x()).map(|k| Var::new(Block::State, k)));
    separation_certificate(omega, prob.n_zeta(), &gens, &eqs, &support, config, clock)
}

fn skipped_separation(clock: Instant) -> InfeasibilityReport {
    InfeasibilityReport {
        certificate: Vec::new(),
        objective: None,
        verdict: Verdict::Inconclusive,
        residual: None,
        skipped: true,
        seconds: clock.elapsed().as_secs_f64(),
    }
}

fn inconclusive_separation(clock: Instant) -> InfeasibilityReport {
    InfeasibilityReport {
        certificate: Vec::new(),
        objective: None,
        verdict: Verdict::Inconclusive,
        residual: None,
        skipped: false,
        seconds: clock.elapsed().as_secs_f64(),
    }
}

/// Shared core of both separator searches: minimize the scenario-set
/// integral of `p` over unit-norm polynomials `p` in the scenario variables
/// that carry a nonnegativity certificate on the admissible set.
fn separation_certificate(
    omega: &Ellipsoid,
    n_zeta: usize,
    gens: &[Polynomial],
    eqs: &[Polynomial],
    support: &[Var],
    config: &InfeasConfig,
    clock: Instant,
) -> Result<InfeasibilityReport, VerifyError> {
    let zeta_vars: Vec<Var> = (0..n_zeta)
        .map(|k| Var::new(Block::Uncertainty, k))
        .collect();
    let p_basis = basis_over(&zeta_vars, config.degree);
    let mut builder = ProgramBuilder::default();
    // Unit coefficient-norm budget: head pinned to one, tail holds p.
    let ball = builder.soc(1 + p_basis.len());
    builder.eq([(ball.at(0), 1.0)], 1.0);
    let (handles, mut rows) = emit_certificate(
        &mut builder,
        gens,
        eqs,
        support,
        config.certificate_degree,
        config.sigma0_degree,
    );
    let index_of: BTreeMap<&Monomial, usize> =
        p_basis.iter().enumerate().map(|(k, m)| (m, k)).collect();
    for m in &p_basis {
        rows.entry(m.clone()).or_default();
    }
    for (mono, cols) in &rows {
        let mut terms = cols.clone();
        if let Some(&k) = index_of.get(mono) {
            terms.push((ball.at(1 + k), -1.0));
        }
        if terms.is_empty() {
            continue;
        }
        builder.eq(terms, 0.0);
    }
    let mut objective = Vec::with_capacity(p_basis.len());
    for (k, m) in p_basis.iter().enumerate() {
        let mut alpha = vec![0u32; n_zeta];
        for &(v, pw) in m.factors() {
            alpha[v.index] = pw;
        }
        objective.push((ball.at(1 + k), omega.moment(&alpha)?));
    }
    builder.objective(objective, 0.0);
    let program = match builder.build() {
        Ok(p) => p,
        Err(_) => return Ok(inconclusive_separation(clock)),
    };
    let result = program.solve();
    if !result.status.is_optimal() {
        return Ok(inconclusive_separation(clock));
    }
    let value = result.primal_objective;
    let certificate: Vec<(Monomial, f64)> = p_basis
        .iter()
        .enumerate()
        .map(|(k, m)| (m.clone(), result.value(ball, 1 + k)))
        .collect();
    let p_poly = Polynomial::from_terms(certificate.iter().cloned());
    let lhs = reconstruct(&result, &handles, gens, eqs);
    let residual = max_coef_diff(&lhs, &p_poly);
    let verdict = if value < -VERDICT_TOL && residual <= RESIDUAL_TOL {
        Verdict::NotFeasible
    } else {
        Verdict::Inconclusive
    };
    Ok(InfeasibilityReport {
        certificate,
        objective: Some(value),
        verdict,
        residual: Some(residual),
        skipped: false,
        seconds: clock.elapsed().as_secs_f64(),
    })
}
