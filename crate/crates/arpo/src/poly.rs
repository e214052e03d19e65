//! Sparse multivariate polynomials over named variable blocks.
//!
//! Variables live in one of four blocks: control (`y`), state (`x`),
//! uncertainty (`z`) and auxiliary (`w`). Polynomials are sparse maps from
//! monomials to `f64` coefficients, kept in a canonical graded order so that
//! serialization and iteration are deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Coefficients with absolute value below this are dropped after arithmetic.
pub const COEF_EPS: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("variable {0} out of range for its block (dim {1})")]
    IndexOutOfRange(Var, usize),
    #[error("offset of an affine map must not mention block {0:?}")]
    OffsetMentionsBlock(Block),
    #[error("parse error: {0}")]
    Parse(String),
}

/// The four variable blocks a problem may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Control,
    State,
    Uncertainty,
    Auxiliary,
}

impl Block {
    pub const ALL: [Block; 4] = [
        Block::Control,
        Block::State,
        Block::Uncertainty,
        Block::Auxiliary,
    ];

    /// Single-letter tag used in the text form: y, x, z, w.
    pub fn tag(self) -> char {
        match self {
            Block::Control => 'y',
            Block::State => 'x',
            Block::Uncertainty => 'z',
            Block::Auxiliary => 'w',
        }
    }

    fn from_tag(c: char) -> Option<Block> {
        match c {
            'y' => Some(Block::Control),
            'x' => Some(Block::State),
            'z' => Some(Block::Uncertainty),
            'w' => Some(Block::Auxiliary),
            _ => None,
        }
    }
}

/// A single variable: block plus 0-based index within the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub block: Block,
    pub index: usize,
}

impl Var {
    pub fn new(block: Block, index: usize) -> Var {
        Var { block, index }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based in the text form.
        write!(f, "{}{}", self.block.tag(), self.index + 1)
    }
}

/// Dimensions of the variable blocks in play.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Space {
    dims: [usize; 4],
}

impl Space {
    pub fn new() -> Space {
        Space::default()
    }

    pub fn with(mut self, block: Block, dim: usize) -> Space {
        self.dims[block as usize] = dim;
        self
    }

    pub fn dim(&self, block: Block) -> usize {
        self.dims[block as usize]
    }

    pub fn contains(&self, v: Var) -> bool {
        v.index < self.dim(v.block)
    }
}

/// A point assigning values to every block (unused blocks stay empty).
#[derive(Debug, Clone, Copy, Default)]
pub struct Assignment<'a> {
    pub control: &'a [f64],
    pub state: &'a [f64],
    pub uncertainty: &'a [f64],
    pub auxiliary: &'a [f64],
}

impl<'a> Assignment<'a> {
    pub fn block(&self, b: Block) -> &'a [f64] {
        match b {
            Block::Control => self.control,
            Block::State => self.state,
            Block::Uncertainty => self.uncertainty,
            Block::Auxiliary => self.auxiliary,
        }
    }

    pub fn value(&self, v: Var) -> Option<f64> {
        self.block(v.block).get(v.index).copied()
    }
}

/// A power product of variables. Factors are sorted by variable and hold
/// strictly positive exponents; the empty product is the constant monomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial {
    factors: Vec<(Var, u32)>,
}

impl Monomial {
    pub fn one() -> Monomial {
        Monomial::default()
    }

    pub fn var(v: Var) -> Monomial {
        Monomial {
            factors: vec![(v, 1)],
        }
    }

    pub fn from_factors(mut factors: Vec<(Var, u32)>) -> Monomial {
        factors.retain(|&(_, p)| p > 0);
        factors.sort_by_key(|&(v, _)| v);
        // Merge duplicates.
        let mut merged: Vec<(Var, u32)> = Vec::with_capacity(factors.len());
        for (v, p) in factors {
            match merged.last_mut() {
                Some((lv, lp)) if *lv == v => *lp += p,
                _ => merged.push((v, p)),
            }
        }
        Monomial { factors: merged }
    }

    pub fn factors(&self) -> &[(Var, u32)] {
        &self.factors
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|&(_, p)| p).sum()
    }

    pub fn degree_in(&self, block: Block) -> u32 {
        self.factors
            .iter()
            .filter(|&&(v, _)| v.block == block)
            .map(|&(_, p)| p)
            .sum()
    }

    pub fn exponent(&self, v: Var) -> u32 {
        self.factors
            .iter()
            .find(|&&(fv, _)| fv == v)
            .map_or(0, |&(_, p)| p)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut factors = self.factors.clone();
        factors.extend_from_slice(&other.factors);
        Monomial::from_factors(factors)
    }

    pub fn is_one(&self) -> bool {
        self.factors.is_empty()
    }

    /// Splits into (factors within `block`, remaining factors).
    fn split_block(&self, block: Block) -> (Vec<(Var, u32)>, Monomial) {
        let (inside, outside): (Vec<_>, Vec<_>) =
            self.factors.iter().partition(|&&(v, _)| v.block == block);
        (inside, Monomial { factors: outside })
    }

    pub fn eval(&self, at: &Assignment) -> Result<f64, PolyError> {
        let mut acc = 1.0;
        for &(v, p) in &self.factors {
            let val = v
                .value_in(at)
                .ok_or(PolyError::IndexOutOfRange(v, at.block(v.block).len()))?;
            acc *= val.powi(p as i32);
        }
        Ok(acc)
    }
}

impl Var {
    fn value_in(&self, at: &Assignment) -> Option<f64> {
        at.value(*self)
    }
}

// Canonical order: graded first (total degree), lexicographic on the sorted
// factor list as tie-break. Deterministic, which is all downstream code needs.
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.factors.cmp(&other.factors))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .factors
            .iter()
            .map(|&(v, p)| {
                if p == 1 {
                    v.to_string()
                } else {
                    format!("{}^{}", v, p)
                }
            })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

/// Sparse polynomial with `f64` coefficients in canonical term order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polynomial {
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero() -> Polynomial {
        Polynomial::default()
    }

    pub fn constant(c: f64) -> Polynomial {
        let mut p = Polynomial::zero();
        if c.abs() >= COEF_EPS {
            p.terms.insert(Monomial::one(), c);
        }
        p
    }

    pub fn var(v: Var) -> Polynomial {
        let mut p = Polynomial::zero();
        p.terms.insert(Monomial::var(v), 1.0);
        p
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (Monomial, f64)>) -> Polynomial {
        let mut p = Polynomial::zero();
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p.trim();
        p
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coefficient(&Monomial::one())
    }

    fn add_term(&mut self, m: Monomial, c: f64) {
        let entry = self.terms.entry(m).or_insert(0.0);
        *entry += c;
    }

    fn trim(&mut self) {
        self.terms.retain(|_, c| c.abs() >= COEF_EPS);
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), *c);
        }
        out.trim();
        out
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            out.terms.insert(m.clone(), c * s);
        }
        out.trim();
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out.trim();
        out
    }

    pub fn pow(&self, e: u32) -> Polynomial {
        let mut out = Polynomial::constant(1.0);
        for _ in 0..e {
            out = out.mul(self);
        }
        out
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn degree_in(&self, block: Block) -> u32 {
        self.terms
            .keys()
            .map(|m| m.degree_in(block))
            .max()
            .unwrap_or(0)
    }

    /// All variables that occur with nonzero exponent.
    pub fn variables(&self) -> Vec<Var> {
        let mut vars: Vec<Var> = self
            .terms
            .keys()
            .flat_map(|m| m.factors().iter().map(|&(v, _)| v))
            .collect();
        vars.sort();
        vars.dedup();
        vars
    }

    pub fn eval(&self, at: &Assignment) -> Result<f64, PolyError> {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            acc += c * m.eval(at)?;
        }
        Ok(acc)
    }

    pub fn derivative(&self, v: Var) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            let p = m.exponent(v);
            if p == 0 {
                continue;
            }
            let factors: Vec<(Var, u32)> = m
                .factors()
                .iter()
                .map(|&(fv, fp)| if fv == v { (fv, fp - 1) } else { (fv, fp) })
                .collect();
            out.add_term(Monomial::from_factors(factors), c * p as f64);
        }
        out.trim();
        out
    }

    /// Replaces every variable of `block` by the given constants.
    pub fn substitute_constants(&self, block: Block, values: &[f64]) -> Result<Polynomial, PolyError> {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            let (inside, rest) = m.split_block(block);
            let mut coef = *c;
            for (v, p) in inside {
                let val = *values
                    .get(v.index)
                    .ok_or(PolyError::IndexOutOfRange(v, values.len()))?;
                coef *= val.powi(p as i32);
            }
            out.add_term(rest, coef);
        }
        out.trim();
        Ok(out)
    }

    /// Replaces every variable `v_i` of `block` by the affine expression
    /// `(A v)_i + offset_i(rest)` described by `map`.
    pub fn substitute_affine(&self, map: &AffineVectorMap) -> Result<Polynomial, PolyError> {
        let block = map.block;
        let n = map.output_dim();
        // Coordinate polynomials of the replacement expression.
        let mut coords: Vec<Polynomial> = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = map.offset.entries[i].clone();
            for j in 0..map.a.ncols() {
                let a = map.a[(i, j)];
                if a != 0.0 {
                    p = p.add(&Polynomial::var(Var::new(block, j)).scale(a));
                }
            }
            coords.push(p);
        }
        let mut powers: BTreeMap<(usize, u32), Polynomial> = BTreeMap::new();
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            let (inside, rest) = m.split_block(block);
            let mut piece = Polynomial::from_terms([(rest, *c)]);
            for (v, p) in inside {
                if v.index >= n {
                    return Err(PolyError::IndexOutOfRange(v, n));
                }
                let pk = powers
                    .entry((v.index, p))
                    .or_insert_with(|| coords[v.index].pow(p))
                    .clone();
                piece = piece.mul(&pk);
            }
            out = out.add(&piece);
        }
        out.trim();
        Ok(out)
    }

    /// Coefficient of the degree-1 monomial in `v`, ignoring any other factor.
    pub fn linear_coefficient(&self, v: Var) -> f64 {
        self.coefficient(&Monomial::var(v))
    }

    /// Writes the polynomial as `c + l'v + v'Qv` over the variables of a single
    /// block, with `Q` symmetric. Errors if any term has degree above 2 in the
    /// block or mentions another block.
    pub fn as_quadratic_form(&self, block: Block, dim: usize) -> Result<QuadraticForm, PolyError> {
        let mut q = DMatrix::<f64>::zeros(dim, dim);
        let mut l = DVector::<f64>::zeros(dim);
        let mut c = 0.0;
        for (m, coef) in &self.terms {
            let fs = m.factors();
            if fs.iter().any(|&(v, _)| v.block != block) {
                return Err(PolyError::OffsetMentionsBlock(block));
            }
            match (m.degree(), fs) {
                (0, _) => c += coef,
                (1, [(v, 1)]) => {
                    if v.index >= dim {
                        return Err(PolyError::IndexOutOfRange(*v, dim));
                    }
                    l[v.index] += coef;
                }
                (2, [(v, 2)]) => {
                    if v.index >= dim {
                        return Err(PolyError::IndexOutOfRange(*v, dim));
                    }
                    q[(v.index, v.index)] += coef;
                }
                (2, [(u, 1), (v, 1)]) => {
                    if u.index >= dim || v.index >= dim {
                        return Err(PolyError::IndexOutOfRange(*v, dim));
                    }
                    q[(u.index, v.index)] += coef / 2.0;
                    q[(v.index, u.index)] += coef / 2.0;
                }
                _ => {
                    return Err(PolyError::DimensionMismatch {
                        expected: 2,
                        got: m.degree() as usize,
                    })
                }
            }
        }
        Ok(QuadraticForm { q, l, c })
    }
}

/// Dense quadratic form `c + l'v + v'Qv` with symmetric `Q`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub q: DMatrix<f64>,
    pub l: DVector<f64>,
    pub c: f64,
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in &self.terms {
            let (sign, mag) = if *c < 0.0 { ("-", -c) } else { ("+", *c) };
            if first {
                if sign == "-" {
                    write!(f, "-")?;
                }
                first = false;
            } else {
                write!(f, " {} ", sign)?;
            }
            if m.is_one() {
                write!(f, "{}", mag)?;
            } else if (mag - 1.0).abs() < COEF_EPS {
                write!(f, "{}", m)?;
            } else {
                write!(f, "{}*{}", mag, m)?;
            }
        }
        Ok(())
    }
}

impl FromStr for Polynomial {
    type Err = PolyError;

    fn from_str(s: &str) -> Result<Polynomial, PolyError> {
        let mut out = Polynomial::zero();
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() || compact == "0" {
            return Ok(out);
        }
        // Split into signed chunks.
        let mut chunks: Vec<(f64, String)> = Vec::new();
        let mut sign = 1.0;
        let mut cur = String::new();
        for (i, ch) in compact.chars().enumerate() {
            match ch {
                '+' | '-' if i > 0 && !cur.is_empty() && !cur.ends_with('e') && !cur.ends_with('E') => {
                    chunks.push((sign, std::mem::take(&mut cur)));
                    sign = if ch == '-' { -1.0 } else { 1.0 };
                }
                '-' if cur.is_empty() => sign = -sign,
                '+' if cur.is_empty() => {}
                _ => cur.push(ch),
            }
        }
        if !cur.is_empty() {
            chunks.push((sign, cur));
        }
        for (sgn, chunk) in chunks {
            let mut coef = sgn;
            let mut factors: Vec<(Var, u32)> = Vec::new();
            for piece in chunk.split('*') {
                if piece.is_empty() {
                    return Err(PolyError::Parse(format!("empty factor in {chunk:?}")));
                }
                let c0 = piece.chars().next().unwrap();
                if let Some(block) = Block::from_tag(c0) {
                    let rest = &piece[1..];
                    let (idx_s, pow_s) = match rest.split_once('^') {
                        Some((a, b)) => (a, Some(b)),
                        None => (rest, None),
                    };
                    let idx: usize = idx_s
                        .parse()
                        .map_err(|_| PolyError::Parse(format!("bad index in {piece:?}")))?;
                    if idx == 0 {
                        return Err(PolyError::Parse(format!("indices are 1-based: {piece:?}")));
                    }
                    let pow: u32 = match pow_s {
                        Some(p) => p
                            .parse()
                            .map_err(|_| PolyError::Parse(format!("bad power in {piece:?}")))?,
                        None => 1,
                    };
                    factors.push((Var::new(block, idx - 1), pow));
                } else {
                    let v: f64 = piece
                        .parse()
                        .map_err(|_| PolyError::Parse(format!("bad number {piece:?}")))?;
                    coef *= v;
                }
            }
            out.add_term(Monomial::from_factors(factors), coef);
        }
        out.trim();
        Ok(out)
    }
}

/// A vector of polynomials, used for equality systems and offsets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolynomialVector {
    pub entries: Vec<Polynomial>,
}

impl PolynomialVector {
    pub fn new(entries: Vec<Polynomial>) -> PolynomialVector {
        PolynomialVector { entries }
    }

    pub fn zeros(n: usize) -> PolynomialVector {
        PolynomialVector {
            entries: vec![Polynomial::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eval(&self, at: &Assignment) -> Result<DVector<f64>, PolyError> {
        let mut out = DVector::zeros(self.len());
        for (i, p) in self.entries.iter().enumerate() {
            out[i] = p.eval(at)?;
        }
        Ok(out)
    }

    pub fn add(&self, other: &PolynomialVector) -> PolynomialVector {
        assert_eq!(self.len(), other.len());
        PolynomialVector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a.add(b))
                .collect(),
        }
    }

    pub fn substitute_affine(&self, map: &AffineVectorMap) -> Result<PolynomialVector, PolyError> {
        let entries = self
            .entries
            .iter()
            .map(|p| p.substitute_affine(map))
            .collect::<Result<_, _>>()?;
        Ok(PolynomialVector { entries })
    }

    pub fn max_degree_in(&self, block: Block) -> u32 {
        self.entries
            .iter()
            .map(|p| p.degree_in(block))
            .max()
            .unwrap_or(0)
    }
}

/// Affine expression `v ↦ A v_block + offset(rest)` over a designated block.
///
/// Doubles as a substitution target (`x := A x + offset`) and as the output of
/// first-order Taylor expansion (`F ≈ A x + offset`). The offset must not
/// mention the designated block, except for the identity map convention
/// `A = I, offset = 0`.
#[derive(Debug, Clone)]
pub struct AffineVectorMap {
    pub block: Block,
    pub a: DMatrix<f64>,
    pub offset: PolynomialVector,
}

impl AffineVectorMap {
    pub fn new(
        block: Block,
        a: DMatrix<f64>,
        offset: PolynomialVector,
    ) -> Result<AffineVectorMap, PolyError> {
        if a.nrows() != offset.len() {
            return Err(PolyError::DimensionMismatch {
                expected: a.nrows(),
                got: offset.len(),
            });
        }
        let identity = a.is_identity(0.0) && offset.entries.iter().all(Polynomial::is_zero);
        if !identity {
            for p in &offset.entries {
                if p.degree_in(block) > 0 {
                    return Err(PolyError::OffsetMentionsBlock(block));
                }
            }
        }
        Ok(AffineVectorMap { block, a, offset })
    }

    pub fn identity(block: Block, n: usize) -> AffineVectorMap {
        AffineVectorMap {
            block,
            a: DMatrix::identity(n, n),
            offset: PolynomialVector::zeros(n),
        }
    }

    /// Replacement expression with `A = 0`: `v := offset(rest)`.
    pub fn from_offset(block: Block, dim_block: usize, offset: PolynomialVector) -> Result<AffineVectorMap, PolyError> {
        let n = offset.len();
        AffineVectorMap::new(block, DMatrix::zeros(n, dim_block), offset)
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn eval(&self, at: &Assignment) -> Result<DVector<f64>, PolyError> {
        let vals = at.block(self.block);
        if vals.len() != self.a.ncols() {
            return Err(PolyError::DimensionMismatch {
                expected: self.a.ncols(),
                got: vals.len(),
            });
        }
        let v = DVector::from_column_slice(vals);
        Ok(&self.a * v + self.offset.eval(at)?)
    }
}

/// First-order Taylor expansion of `F` in the variables of `block` around
/// `anchor`, with every other block evaluated at zero when forming the
/// Jacobian. Returns the affine model `A v + offset(rest)` together with `A`.
///
/// Exact when `F` is affine in `block`; the offset keeps other-block variables
/// symbolically.
pub fn taylor1(
    f: &PolynomialVector,
    block: Block,
    anchor: &[f64],
) -> Result<(AffineVectorMap, DMatrix<f64>), PolyError> {
    let m = f.len();
    let n = anchor.len();
    let mut a = DMatrix::<f64>::zeros(m, n);
    for (i, p) in f.entries.iter().enumerate() {
        for j in 0..n {
            let d = p.derivative(Var::new(block, j));
            // Jacobian entry with the block at the anchor and every remaining
            // block at zero: only the constant term of the frozen derivative
            // survives.
            let dv = d.substitute_constants(block, anchor)?;
            a[(i, j)] = dv.constant_term();
        }
    }
    let mut offset_entries = Vec::with_capacity(m);
    for (i, p) in f.entries.iter().enumerate() {
        let frozen = p.substitute_constants(block, anchor)?;
        let lin_at_anchor: f64 = (0..n).map(|j| a[(i, j)] * anchor[j]).sum();
        offset_entries.push(frozen.add(&Polynomial::constant(-lin_at_anchor)));
    }
    let map = AffineVectorMap::new(block, a.clone(), PolynomialVector::new(offset_entries))?;
    Ok((map, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn x(i: usize) -> Polynomial {
        Polynomial::var(Var::new(Block::State, i))
    }

    fn y(i: usize) -> Polynomial {
        Polynomial::var(Var::new(Block::Control, i))
    }

    fn z(i: usize) -> Polynomial {
        Polynomial::var(Var::new(Block::Uncertainty, i))
    }

    #[test]
    fn arithmetic_and_eval() {
        // p = (x1 + 2)^2 = x1^2 + 4 x1 + 4
        let p = x(0).add(&Polynomial::constant(2.0)).pow(2);
        assert_eq!(p.num_terms(), 3);
        let at = Assignment {
            state: &[3.0],
            ..Default::default()
        };
        assert_relative_eq!(p.eval(&at).unwrap(), 25.0);
        assert_eq!(p.total_degree(), 2);
    }

    #[test]
    fn cancellation_is_trimmed() {
        let p = x(0).mul(&x(1));
        let q = p.sub(&p);
        assert!(q.is_zero());
        // Coefficients below the cleanup threshold vanish.
        let tiny = x(0).scale(1e-16);
        assert!(tiny.is_zero());
    }

    #[test]
    fn derivative_product_rule() {
        // d/dx1 (x1^2 x2 + x2) = 2 x1 x2
        let p = x(0).pow(2).mul(&x(1)).add(&x(1));
        let d = p.derivative(Var::new(Block::State, 0));
        let expect = x(0).mul(&x(1)).scale(2.0);
        assert_eq!(d, expect);
    }

    #[test]
    fn substitute_affine_square() {
        // x^2 with x := y + z gives y^2 + 2 y z + z^2.
        let p = x(0).pow(2);
        let map = AffineVectorMap::from_offset(
            Block::State,
            1,
            PolynomialVector::new(vec![y(0).add(&z(0))]),
        )
        .unwrap();
        let q = p.substitute_affine(&map).unwrap();
        let expect = y(0).pow(2).add(&y(0).mul(&z(0)).scale(2.0)).add(&z(0).pow(2));
        assert_eq!(q, expect);
        assert_eq!(q.degree_in(Block::State), 0);
    }

    #[test]
    fn substitute_affine_identity_fixes_polynomial() {
        let p = x(0).pow(2).mul(&x(1)).add(&x(1).scale(3.0));
        let id = AffineVectorMap::identity(Block::State, 2);
        assert_eq!(p.substitute_affine(&id).unwrap(), p);
    }

    #[test]
    fn taylor1_quadratic_example() {
        // F = [x1^2 + x2, x1 x2] at anchor (1,1): A = [[2,1],[1,1]],
        // offset = F(anchor) - A*anchor = (-1,-1).
        let f = PolynomialVector::new(vec![x(0).pow(2).add(&x(1)), x(0).mul(&x(1))]);
        let (map, a) = taylor1(&f, Block::State, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(a[(0, 0)], 2.0);
        assert_relative_eq!(a[(0, 1)], 1.0);
        assert_relative_eq!(a[(1, 0)], 1.0);
        assert_relative_eq!(a[(1, 1)], 1.0);
        assert_relative_eq!(map.offset.entries[0].constant_term(), -1.0);
        assert_relative_eq!(map.offset.entries[1].constant_term(), -1.0);
    }

    #[test]
    fn taylor1_exact_for_affine() {
        // F = [2 x1 - x2 + 3 + z1] is its own linearization.
        let f = PolynomialVector::new(vec![x(0)
            .scale(2.0)
            .sub(&x(1))
            .add(&Polynomial::constant(3.0))
            .add(&z(0))]);
        let (map, _) = taylor1(&f, Block::State, &[5.0, -2.0]).unwrap();
        for (xv, zv) in [(0.3, 1.0), (-2.0, 0.5), (10.0, -4.0)] {
            let at = Assignment {
                state: &[xv, 2.0 * xv],
                uncertainty: &[zv],
                ..Default::default()
            };
            let truth = f.eval(&at).unwrap();
            let model = map.eval(&at).unwrap();
            assert_relative_eq!(truth[0], model[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_form_extraction() {
        // 3 + 2 x1 + x1^2 + 4 x1 x2
        let p = Polynomial::constant(3.0)
            .add(&x(0).scale(2.0))
            .add(&x(0).pow(2))
            .add(&x(0).mul(&x(1)).scale(4.0));
        let qf = p.as_quadratic_form(Block::State, 2).unwrap();
        assert_relative_eq!(qf.c, 3.0);
        assert_relative_eq!(qf.l[0], 2.0);
        assert_relative_eq!(qf.q[(0, 0)], 1.0);
        assert_relative_eq!(qf.q[(0, 1)], 2.0);
        assert_relative_eq!(qf.q[(1, 0)], 2.0);
    }

    #[test]
    fn text_round_trip() {
        let p = y(0)
            .pow(2)
            .mul(&z(2))
            .scale(2.0)
            .add(&x(1).scale(-0.5))
            .add(&Polynomial::constant(1.25));
        let s = p.to_string();
        let back: Polynomial = s.parse().unwrap();
        assert_eq!(back, p);
        // Spot-check the surface form of a single term.
        let single = y(0).pow(2).mul(&z(2)).scale(2.0);
        assert_eq!(single.to_string(), "2*y1^2*z3");
        assert_eq!("2*y1^2*z3".parse::<Polynomial>().unwrap(), single);
    }

    proptest! {
        #[test]
        fn taylor1_error_is_second_order(
            coefs in proptest::collection::vec(-2.0f64..2.0, 6),
            anchor in proptest::collection::vec(-1.0f64..1.0, 2),
            probe in proptest::collection::vec(-0.2f64..0.2, 2),
        ) {
            // Random quadratic in two state variables.
            let p = Polynomial::constant(coefs[0])
                .add(&x(0).scale(coefs[1]))
                .add(&x(1).scale(coefs[2]))
                .add(&x(0).pow(2).scale(coefs[3]))
                .add(&x(0).mul(&x(1)).scale(coefs[4]))
                .add(&x(1).pow(2).scale(coefs[5]));
            let f = PolynomialVector::new(vec![p.clone()]);
            let (map, _) = taylor1(&f, Block::State, &anchor).unwrap();
            let pt = [anchor[0] + probe[0], anchor[1] + probe[1]];
            let at = Assignment { state: &pt, ..Default::default() };
            let truth = p.eval(&at).unwrap();
            let model = map.eval(&at).unwrap()[0];
            let h2 = probe[0] * probe[0] + probe[1] * probe[1];
            // |f - model| <= C * ||x - anchor||^2 with C from the coefficients.
            let c_bound = 2.0 * (coefs[3].abs() + coefs[4].abs() + coefs[5].abs()) + 1e-9;
            prop_assert!((truth - model).abs() <= c_bound * h2 + 1e-9);
        }

        #[test]
        fn serialization_round_trips(
            coefs in proptest::collection::vec(-10.0f64..10.0, 4),
            exps in proptest::collection::vec(0u32..4, 4),
        ) {
            let p = Polynomial::constant(coefs[0])
                .add(&x(0).pow(exps[0]).mul(&y(0).pow(exps[1])).scale(coefs[1]))
                .add(&z(0).pow(exps[2]).scale(coefs[2]))
                .add(&x(1).pow(exps[3]).mul(&z(1)).scale(coefs[3]));
            let back: Polynomial = p.to_string().parse().unwrap();
            // Round trip is exact up to coefficient formatting precision.
            for (m, c) in p.terms() {
                prop_assert!((back.coefficient(m) - c).abs() <= 1e-12 * c.abs().max(1.0));
            }
            prop_assert_eq!(back.num_terms(), p.num_terms());
        }
    }
}
