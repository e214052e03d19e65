//! Conic programs in standard equality form and a bundled interior-point
//! solver.
//!
//! Programs are `min c'x  s.t.  A x = b, x in K` with `K` a product of free,
//! nonnegative, second-order and PSD cones. PSD blocks are stored in scaled
//! svec coordinates (off-diagonals times sqrt(2)) so that inner products of
//! coefficient vectors equal trace inner products of the matrices.
//!
//! The solver is a homogeneous self-dual interior-point method with
//! Nesterov-Todd scaling and a Mehrotra predictor-corrector; see [`solver`].
//! Infeasibility is returned with a verified Farkas certificate, and numerical
//! breakdown is a first-class status rather than a panic.

mod kkt;
mod scaling;
mod solver;

use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

pub use solver::SolverOptions;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("variable column {0} out of range ({1} columns)")]
    ColumnOutOfRange(usize, usize),
    #[error("nonfinite coefficient in {0}")]
    NonFinite(&'static str),
    #[error("second-order cone needs dimension >= 2, got {0}")]
    SocTooSmall(usize),
    #[error("PSD block needs side >= 1, got {0}")]
    PsdTooSmall(usize),
    #[error("program has no constraint rows")]
    NoConstraints,
    #[error("program has no cone variables (only free)")]
    NoConeVariables,
    #[error("free variable {0} appears in no constraint row")]
    UnusedFreeVariable(usize),
    #[error("constraint row {0} has no coefficients")]
    EmptyRow(usize),
    #[error("entry indices ({0},{1}) out of range for PSD side {2}")]
    BadPsdEntry(usize, usize, usize),
    #[error("program cannot be dumped: {0}")]
    Dump(String),
}

/// Cone of one variable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    Free(usize),
    Nonneg(usize),
    /// Second-order cone `x0 >= ||x1..||`, dimension >= 2.
    Soc(usize),
    /// PSD cone of the given matrix side, stored as scaled svec.
    Psd(usize),
}

impl Cone {
    pub fn dim(self) -> usize {
        match self {
            Cone::Free(n) | Cone::Nonneg(n) | Cone::Soc(n) => n,
            Cone::Psd(d) => d * (d + 1) / 2,
        }
    }

    /// Contribution to the barrier degree.
    pub(crate) fn degree(self) -> usize {
        match self {
            Cone::Free(_) => 0,
            Cone::Nonneg(n) => n,
            Cone::Soc(_) => 1,
            Cone::Psd(d) => d,
        }
    }
}

/// Handle to a contiguous block of scalar variables.
#[derive(Debug, Clone, Copy)]
pub struct VarIds {
    pub start: usize,
    pub len: usize,
}

impl VarIds {
    pub fn at(&self, k: usize) -> usize {
        assert!(k < self.len, "index {k} out of block of length {}", self.len);
        self.start + k
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        self.start..self.start + self.len
    }
}

/// Handle to a PSD block: matrix side plus svec layout.
#[derive(Debug, Clone, Copy)]
pub struct PsdIds {
    pub start: usize,
    pub side: usize,
}

impl PsdIds {
    pub fn svec_len(&self) -> usize {
        self.side * (self.side + 1) / 2
    }

    /// Column of the svec entry for (i, j); order is column-major lower
    /// triangle.
    pub fn col(&self, i: usize, j: usize) -> usize {
        let (p, q) = if i >= j { (i, j) } else { (j, i) };
        // Offset of column q in the packed lower triangle.
        let before = q * self.side - q * (q + 1) / 2 + q;
        self.start + before + (p - q)
    }

    /// Sparse row terms for `sum coef_k X_{p_k q_k}` (each unordered pair
    /// given once).
    pub fn entry_terms(&self, entries: &[(usize, usize, f64)]) -> Vec<(usize, f64)> {
        entries
            .iter()
            .map(|&(i, j, c)| {
                let scale = if i == j { 1.0 } else { 1.0 / SQRT2 };
                (self.col(i, j), c * scale)
            })
            .collect()
    }

    /// Sparse row terms for `tr(M X)` with symmetric `M` given by its lower
    /// triangle entries `(i >= j, M_ij)`.
    pub fn tr_terms(&self, lower: &[(usize, usize, f64)]) -> Vec<(usize, f64)> {
        lower
            .iter()
            .map(|&(i, j, m)| {
                let coef = if i == j { m } else { SQRT2 * m };
                (self.col(i, j), coef)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
struct Row {
    terms: Vec<(usize, f64)>,
    rhs: f64,
}

/// Incremental builder; all validation happens in [`ProgramBuilder::build`],
/// never inside the solver.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    cones: Vec<Cone>,
    n: usize,
    rows: Vec<Row>,
    c: Vec<(usize, f64)>,
    c0: f64,
}

impl ProgramBuilder {
    pub fn new() -> ProgramBuilder {
        ProgramBuilder::default()
    }

    fn push_block(&mut self, cone: Cone) -> usize {
        let start = self.n;
        self.cones.push(cone);
        self.n += cone.dim();
        start
    }

    pub fn free(&mut self, n: usize) -> VarIds {
        let start = self.push_block(Cone::Free(n));
        VarIds { start, len: n }
    }

    pub fn nonneg(&mut self, n: usize) -> VarIds {
        let start = self.push_block(Cone::Nonneg(n));
        VarIds { start, len: n }
    }

    pub fn soc(&mut self, dim: usize) -> VarIds {
        let start = self.push_block(Cone::Soc(dim));
        VarIds { start, len: dim }
    }

    pub fn psd(&mut self, side: usize) -> PsdIds {
        let start = self.push_block(Cone::Psd(side));
        PsdIds { start, side }
    }

    /// Equality row `sum coef_k x_{col_k} = rhs`.
    pub fn eq(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        self.rows.push(Row {
            terms: terms.into_iter().collect(),
            rhs,
        });
    }

    /// Adds `terms` to the linear objective; `offset` is added to reported
    /// objective values.
    pub fn objective(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, offset: f64) {
        self.c.extend(terms);
        self.c0 += offset;
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn build(self) -> Result<ConicProgram, ConicError> {
        let n = self.n;
        if self.rows.is_empty() {
            return Err(ConicError::NoConstraints);
        }
        for cone in &self.cones {
            match *cone {
                Cone::Soc(d) if d < 2 => return Err(ConicError::SocTooSmall(d)),
                Cone::Psd(d) if d < 1 => return Err(ConicError::PsdTooSmall(d)),
                _ => {}
            }
        }
        if !self.cones.iter().any(|c| c.degree() > 0) {
            return Err(ConicError::NoConeVariables);
        }
        let mut c = vec![0.0; n];
        for &(j, v) in &self.c {
            if j >= n {
                return Err(ConicError::ColumnOutOfRange(j, n));
            }
            if !v.is_finite() {
                return Err(ConicError::NonFinite("objective"));
            }
            c[j] += v;
        }
        if !self.c0.is_finite() {
            return Err(ConicError::NonFinite("objective offset"));
        }
        let mut rows = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.into_iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(ConicError::NonFinite("right-hand side"));
            }
            let mut terms = row.terms;
            for &(j, v) in &terms {
                if j >= n {
                    return Err(ConicError::ColumnOutOfRange(j, n));
                }
                if !v.is_finite() {
                    return Err(ConicError::NonFinite("row coefficient"));
                }
            }
            // Merge duplicates, drop exact zeros, keep deterministic order.
            terms.sort_by_key(|&(j, _)| j);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
            for (j, v) in terms {
                match merged.last_mut() {
                    Some((lj, lv)) if *lj == j => *lv += v,
                    _ => merged.push((j, v)),
                }
            }
            merged.retain(|&(_, v)| v != 0.0);
            if merged.is_empty() {
                return Err(ConicError::EmptyRow(i));
            }
            rows.push(Row {
                terms: merged,
                rhs: row.rhs,
            });
        }
        // Free variables must be pinned by at least one row.
        let mut used = vec![false; n];
        for row in &rows {
            for &(j, _) in &row.terms {
                used[j] = true;
            }
        }
        let mut offset = 0;
        for cone in &self.cones {
            if let Cone::Free(k) = *cone {
                for j in offset..offset + k {
                    if !used[j] {
                        return Err(ConicError::UnusedFreeVariable(j));
                    }
                }
            }
            offset += cone.dim();
        }
        Ok(ConicProgram {
            cones: self.cones,
            n,
            rows,
            c,
            c0: self.c0,
        })
    }
}

/// Validated program in standard form.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    cones: Vec<Cone>,
    n: usize,
    rows: Vec<Row>,
    c: Vec<f64>,
    c0: f64,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cones(&self) -> &[Cone] {
        &self.cones
    }

    pub fn objective_offset(&self) -> f64 {
        self.c0
    }

    pub(crate) fn row_terms(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i].terms
    }

    pub(crate) fn rhs(&self, i: usize) -> f64 {
        self.rows[i].rhs
    }

    pub(crate) fn cost(&self) -> &[f64] {
        &self.c
    }

    /// `out += scale * A * x`.
    pub(crate) fn mul_a(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, v) in &row.terms {
                acc += v * x[j];
            }
            out[i] += scale * acc;
        }
    }

    /// `out += scale * A' * y`.
    pub(crate) fn mul_at(&self, y: &[f64], scale: f64, out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for &(j, v) in &row.terms {
                out[j] += scale * v * yi;
            }
        }
    }

    /// Solves with default options.
    pub fn solve(&self) -> SolveResult {
        self.solve_with(&SolverOptions::default())
    }

    pub fn solve_with(&self, opts: &SolverOptions) -> SolveResult {
        solver::solve(self, opts)
    }

    /// Direct evaluation of a candidate point against the original data:
    /// equality residual and worst cone margin (negative means outside).
    pub fn point_residuals(&self, x: &[f64]) -> PointReport {
        let mut eq = 0.0f64;
        for row in &self.rows {
            let mut acc = -row.rhs;
            for &(j, v) in &row.terms {
                acc += v * x[j];
            }
            eq = eq.max(acc.abs());
        }
        PointReport {
            equality_inf: eq,
            cone_margin: cone_margin(&self.cones, x),
        }
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.c0 + self.c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>()
    }

    /// Conic Benchmark Format text for interchange with external solvers.
    pub fn to_cbf(&self) -> String {
        let mut scalar_cones: Vec<(&str, usize)> = Vec::new();
        let mut psd_sides: Vec<usize> = Vec::new();
        // Map global column -> scalar index or (psd block, i, j).
        enum ColRef {
            Scalar(usize),
            Psd(usize, usize, usize, f64),
        }
        let mut col_refs: Vec<ColRef> = Vec::with_capacity(self.n);
        let mut scalar_count = 0usize;
        for cone in &self.cones {
            match *cone {
                Cone::Free(k) => {
                    scalar_cones.push(("F", k));
                    for _ in 0..k {
                        col_refs.push(ColRef::Scalar(scalar_count));
                        scalar_count += 1;
                    }
                }
                Cone::Nonneg(k) => {
                    scalar_cones.push(("L+", k));
                    for _ in 0..k {
                        col_refs.push(ColRef::Scalar(scalar_count));
                        scalar_count += 1;
                    }
                }
                Cone::Soc(k) => {
                    scalar_cones.push(("Q", k));
                    for _ in 0..k {
                        col_refs.push(ColRef::Scalar(scalar_count));
                        scalar_count += 1;
                    }
                }
                Cone::Psd(d) => {
                    let blk = psd_sides.len();
                    psd_sides.push(d);
                    for q in 0..d {
                        for p in q..d {
                            let scale = if p == q { 1.0 } else { 1.0 / SQRT2 };
                            col_refs.push(ColRef::Psd(blk, p, q, scale));
                        }
                    }
                }
            }
        }
        let mut out = String::new();
        out.push_str("VER\n1\n\n");
        out.push_str("OBJSENSE\nMIN\n\n");
        if !psd_sides.is_empty() {
            out.push_str(&format!("PSDVAR\n{}\n", psd_sides.len()));
            for d in &psd_sides {
                out.push_str(&format!("{d}\n"));
            }
            out.push('\n');
        }
        if scalar_count > 0 {
            out.push_str(&format!("VAR\n{} {}\n", scalar_count, scalar_cones.len()));
            for (kind, k) in &scalar_cones {
                out.push_str(&format!("{kind} {k}\n"));
            }
            out.push('\n');
        }
        out.push_str(&format!("CON\n{} 1\nL= {}\n\n", self.rows.len(), self.rows.len()));
        let mut obj_scalar = Vec::new();
        let mut obj_psd = Vec::new();
        for (j, &cj) in self.c.iter().enumerate() {
            if cj == 0.0 {
                continue;
            }
            match col_refs[j] {
                ColRef::Scalar(s) => obj_scalar.push((s, cj)),
                ColRef::Psd(b, p, q, scale) => obj_psd.push((b, p, q, cj * scale)),
            }
        }
        if !obj_psd.is_empty() {
            out.push_str(&format!("OBJFCOORD\n{}\n", obj_psd.len()));
            for (b, p, q, v) in obj_psd {
                out.push_str(&format!("{b} {p} {q} {v:.17e}\n"));
            }
            out.push('\n');
        }
        if !obj_scalar.is_empty() {
            out.push_str(&format!("OBJACOORD\n{}\n", obj_scalar.len()));
            for (s, v) in obj_scalar {
                out.push_str(&format!("{s} {v:.17e}\n"));
            }
            out.push('\n');
        }
        if self.c0 != 0.0 {
            out.push_str(&format!("OBJBCOORD\n{:.17e}\n\n", self.c0));
        }
        let mut a_scalar = Vec::new();
        let mut a_psd = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in &row.terms {
                match col_refs[j] {
                    ColRef::Scalar(s) => a_scalar.push((i, s, v)),
                    ColRef::Psd(b, p, q, scale) => a_psd.push((i, b, p, q, v * scale)),
                }
            }
        }
        if !a_psd.is_empty() {
            out.push_str(&format!("FCOORD\n{}\n", a_psd.len()));
            for (i, b, p, q, v) in a_psd {
                out.push_str(&format!("{i} {b} {p} {q} {v:.17e}\n"));
            }
            out.push('\n');
        }
        if !a_scalar.is_empty() {
            out.push_str(&format!("ACOORD\n{}\n", a_scalar.len()));
            for (i, s, v) in a_scalar {
                out.push_str(&format!("{i} {s} {v:.17e}\n"));
            }
            out.push('\n');
        }
        let nonzero_rhs: Vec<(usize, f64)> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.rhs != 0.0)
            .map(|(i, r)| (i, -r.rhs))
            .collect();
        if !nonzero_rhs.is_empty() {
            out.push_str(&format!("BCOORD\n{}\n", nonzero_rhs.len()));
            for (i, v) in nonzero_rhs {
                out.push_str(&format!("{i} {v:.17e}\n"));
            }
            out.push('\n');
        }
        out
    }
}

/// Direct point evaluation against the program data.
#[derive(Debug, Clone, Copy)]
pub struct PointReport {
    pub equality_inf: f64,
    pub cone_margin: f64,
}

/// Termination status. Infeasibility statuses carry verified Farkas rays in
/// the corresponding [`SolveResult`] fields.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    NumericalProblem(String),
}

impl Status {
    pub fn is_optimal(&self) -> bool {
        matches!(self, Status::Optimal)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Optimal => write!(f, "optimal"),
            Status::PrimalInfeasible => write!(f, "primal infeasible"),
            Status::DualInfeasible => write!(f, "dual infeasible"),
            Status::NumericalProblem(why) => write!(f, "numerical problem: {why}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: Status,
    /// Primal point (or dual-infeasibility ray).
    pub x: Vec<f64>,
    /// Row multipliers (or primal-infeasibility ray, with `z`).
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl SolveResult {
    pub fn value(&self, ids: VarIds, k: usize) -> f64 {
        self.x[ids.at(k)]
    }

    pub fn block(&self, ids: VarIds) -> &[f64] {
        &self.x[ids.start..ids.start + ids.len]
    }

    pub fn psd_matrix(&self, ids: PsdIds) -> DMatrix<f64> {
        svec_to_mat(&self.x[ids.start..ids.start + ids.svec_len()], ids.side)
    }
}

/// Worst distance into cone interiors over all blocks; negative means the
/// point is outside some cone. Free blocks are skipped.
pub(crate) fn cone_margin(cones: &[Cone], x: &[f64]) -> f64 {
    let mut margin = f64::INFINITY;
    let mut offset = 0;
    for cone in cones {
        let d = cone.dim();
        let xs = &x[offset..offset + d];
        match cone {
            Cone::Free(_) => {}
            Cone::Nonneg(_) => {
                for &v in xs {
                    margin = margin.min(v);
                }
            }
            Cone::Soc(_) => {
                let tail: f64 = xs[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                margin = margin.min(xs[0] - tail);
            }
            Cone::Psd(side) => {
                let m = svec_to_mat(xs, *side);
                let eig = m.symmetric_eigen();
                margin = margin.min(eig.eigenvalues.min());
            }
        }
        offset += d;
    }
    margin
}

/// Unpacks a scaled svec into the dense symmetric matrix.
pub fn svec_to_mat(svec: &[f64], side: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(side, side);
    let mut k = 0;
    for q in 0..side {
        for p in q..side {
            let v = if p == q { svec[k] } else { svec[k] / SQRT2 };
            m[(p, q)] = v;
            m[(q, p)] = v;
            k += 1;
        }
    }
    m
}

/// Packs a dense symmetric matrix into scaled svec.
pub fn mat_to_svec(m: &DMatrix<f64>) -> Vec<f64> {
    let side = m.nrows();
    let mut out = Vec::with_capacity(side * (side + 1) / 2);
    for q in 0..side {
        for p in q..side {
            let v = if p == q { m[(p, q)] } else { SQRT2 * m[(p, q)] };
            out.push(v);
        }
    }
    out
}
