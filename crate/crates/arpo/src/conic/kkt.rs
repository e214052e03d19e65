//! Reduced KKT system for the interior-point solver.
//!
//! Eliminating the cone directions leaves the bordered saddle system
//!
//! ```text
//! [ 0     A_f' ] [dx_f]   [r_f]
//! [ A_f   G    ] [dy  ] = [r_y],    G = A_c H A_c',
//! ```
//!
//! where `A_f` are the free columns and `H = W W'` the NT scaling. Rows that
//! touch the same cone block must share a dense Schur block, so rows are
//! grouped into connected components via union-find and `G` is assembled and
//! factored per component. Rows supported only on free columns carry no `G`
//! entries and join the free border instead, giving the symmetric indefinite
//! system solved with Bunch-Kaufman. One iterative-refinement pass against
//! the unregularized matrices recovers the accuracy lost to the static
//! regularization.

use faer::linalg::solvers::{Lblt, Llt};
use faer::prelude::Solve;
use faer::{Mat, Side};

use super::scaling::{BlockScaling, Scaling};
use super::solver::ProblemData;
use super::Cone;

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = i;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Sparse symmetric matrix of one row's coefficients on one PSD block,
/// stored as full entry list (both triangles, diagonal once).
struct SparseSym {
    entries: Vec<(usize, usize, f64)>,
}

enum Unit {
    /// One nonnegative column: scaling block `sblk`, coordinate `k` within
    /// it, entries as (local row, coefficient).
    Nonneg {
        sblk: usize,
        k: usize,
        comp: usize,
        entries: Vec<(usize, f64)>,
    },
    /// One SOC block: `s` is the dense restriction of `A` to the block
    /// columns over the touching rows; `sst = s s'` is constant.
    Soc {
        sblk: usize,
        comp: usize,
        rows: Vec<usize>,
        s: Mat<f64>,
        sst: Mat<f64>,
    },
    /// One PSD block: per touching row the coefficient matrix `M_i`, so
    /// `G[i l, j l] += tr(M_i Wm M_j Wm)`.
    Psd {
        sblk: usize,
        comp: usize,
        side: usize,
        rows: Vec<usize>,
        ms: Vec<SparseSym>,
    },
}

pub struct KktSystem {
    m: usize,
    n_f: usize,
    comp_rows: Vec<Vec<usize>>,
    /// Rows supported only on free columns, moved into the border.
    border_rows: Vec<usize>,
    units: Vec<Unit>,
    free_cols: Vec<usize>,
    /// Per component: dense `A_f` restriction (local rows x n_f).
    af: Vec<Mat<f64>>,
    /// Border rows x n_f.
    a0: Mat<f64>,
    // Per-factorization state.
    g_raw: Vec<Mat<f64>>,
    g_chol: Vec<Option<Llt<f64>>>,
    ginv_af: Vec<Mat<f64>>,
    k2: Option<Lblt<f64>>,
    k2_raw: Mat<f64>,
}

pub struct KktSolution {
    pub dx_f: Vec<f64>,
    pub dy: Vec<f64>,
}

impl KktSystem {
    pub fn new(data: &ProblemData) -> KktSystem {
        let m = data.b.len();
        let mut uf = UnionFind::new(m);

        // Cone-column layout: map each column to its cone block.
        let mut free_cols = Vec::new();
        struct BlockInfo {
            cone: Cone,
            offset: usize,
            sblk: usize,
        }
        let mut blocks = Vec::new();
        let mut off = 0;
        let mut sblk = 0;
        for &cone in &data.cones {
            match cone {
                Cone::Free(k) => {
                    free_cols.extend(off..off + k);
                }
                _ => {
                    blocks.push(BlockInfo {
                        cone,
                        offset: off,
                        sblk,
                    });
                    sblk += 1;
                }
            }
            off += cone.dim();
        }

        // Union rows through each coupling unit.
        for blk in &blocks {
            match blk.cone {
                Cone::Nonneg(k) => {
                    for j in 0..k {
                        let col = &data.cols[blk.offset + j];
                        for w in col.windows(2) {
                            uf.union(w[0].0, w[1].0);
                        }
                    }
                }
                Cone::Soc(_) | Cone::Psd(_) => {
                    let dim = blk.cone.dim();
                    let mut rows: Vec<usize> = Vec::new();
                    for j in 0..dim {
                        rows.extend(data.cols[blk.offset + j].iter().map(|&(i, _)| i));
                    }
                    for w in rows.windows(2) {
                        uf.union(w[0], w[1]);
                    }
                }
                Cone::Free(_) => unreachable!(),
            }
        }

        // Rows with no cone support go to the border.
        let mut has_cone = vec![false; m];
        for blk in &blocks {
            for j in 0..blk.cone.dim() {
                for &(i, _) in &data.cols[blk.offset + j] {
                    has_cone[i] = true;
                }
            }
        }
        let mut comp_of_root: Vec<Option<usize>> = vec![None; m];
        let mut comp_rows: Vec<Vec<usize>> = Vec::new();
        let mut row_comp: Vec<Option<(usize, usize)>> = vec![None; m];
        let mut border_rows = Vec::new();
        for i in 0..m {
            if !has_cone[i] {
                border_rows.push(i);
                continue;
            }
            let root = uf.find(i);
            let comp = *comp_of_root[root].get_or_insert_with(|| {
                comp_rows.push(Vec::new());
                comp_rows.len() - 1
            });
            row_comp[i] = Some((comp, comp_rows[comp].len()));
            comp_rows[comp].push(i);
        }

        // Units with local row indices.
        let mut units = Vec::new();
        for blk in &blocks {
            match blk.cone {
                Cone::Nonneg(k) => {
                    for j in 0..k {
                        let col = &data.cols[blk.offset + j];
                        if col.is_empty() {
                            continue;
                        }
                        let comp = row_comp[col[0].0].unwrap().0;
                        let entries = col
                            .iter()
                            .map(|&(i, v)| (row_comp[i].unwrap().1, v))
                            .collect();
                        units.push(Unit::Nonneg {
                            sblk: blk.sblk,
                            k: j,
                            comp,
                            entries,
                        });
                    }
                }
                Cone::Soc(dim) => {
                    let mut rows: Vec<usize> = Vec::new();
                    for j in 0..dim {
                        rows.extend(data.cols[blk.offset + j].iter().map(|&(i, _)| i));
                    }
                    rows.sort_unstable();
                    rows.dedup();
                    if rows.is_empty() {
                        continue;
                    }
                    let comp = row_comp[rows[0]].unwrap().0;
                    let mut s = Mat::zeros(rows.len(), dim);
                    for j in 0..dim {
                        for &(i, v) in &data.cols[blk.offset + j] {
                            let pos = rows.binary_search(&i).unwrap();
                            s[(pos, j)] = v;
                        }
                    }
                    let sst = &s * s.transpose();
                    let local: Vec<usize> =
                        rows.iter().map(|&i| row_comp[i].unwrap().1).collect();
                    units.push(Unit::Soc {
                        sblk: blk.sblk,
                        comp,
                        rows: local,
                        s,
                        sst,
                    });
                }
                Cone::Psd(side) => {
                    let dim = side * (side + 1) / 2;
                    let mut rows: Vec<usize> = Vec::new();
                    for j in 0..dim {
                        rows.extend(data.cols[blk.offset + j].iter().map(|&(i, _)| i));
                    }
                    rows.sort_unstable();
                    rows.dedup();
                    if rows.is_empty() {
                        continue;
                    }
                    let comp = row_comp[rows[0]].unwrap().0;
                    // Per-row full-entry coefficient matrices. svec column
                    // (p, q) with coefficient a corresponds to matrix entries
                    // M_pq = M_qp = a/sqrt(2) off-diagonal, M_qq = a on it.
                    let mut ms: Vec<SparseSym> = rows
                        .iter()
                        .map(|_| SparseSym {
                            entries: Vec::new(),
                        })
                        .collect();
                    let mut svec_idx = 0;
                    for q in 0..side {
                        for p in q..side {
                            for &(i, a) in &data.cols[blk.offset + svec_idx] {
                                let pos = rows.binary_search(&i).unwrap();
                                if p == q {
                                    ms[pos].entries.push((p, q, a));
                                } else {
                                    let v = a / super::SQRT2;
                                    ms[pos].entries.push((p, q, v));
                                    ms[pos].entries.push((q, p, v));
                                }
                            }
                            svec_idx += 1;
                        }
                    }
                    let local: Vec<usize> =
                        rows.iter().map(|&i| row_comp[i].unwrap().1).collect();
                    units.push(Unit::Psd {
                        sblk: blk.sblk,
                        comp,
                        side,
                        rows: local,
                        ms,
                    });
                }
                Cone::Free(_) => unreachable!(),
            }
        }

        let n_f = free_cols.len();
        let mut af: Vec<Mat<f64>> = comp_rows
            .iter()
            .map(|rows| Mat::zeros(rows.len(), n_f))
            .collect();
        let mut a0 = Mat::zeros(border_rows.len(), n_f);
        for (jf, &j) in free_cols.iter().enumerate() {
            for &(i, v) in &data.cols[j] {
                match row_comp[i] {
                    Some((c, l)) => af[c][(l, jf)] = v,
                    None => {
                        let pos = border_rows.binary_search(&i).unwrap();
                        a0[(pos, jf)] = v;
                    }
                }
            }
        }

        let g_raw = comp_rows
            .iter()
            .map(|rows| Mat::zeros(rows.len(), rows.len()))
            .collect();
        let k2_dim = n_f + border_rows.len();
        KktSystem {
            m,
            n_f,
            comp_rows,
            border_rows,
            units,
            free_cols,
            af,
            a0,
            g_raw,
            g_chol: Vec::new(),
            ginv_af: Vec::new(),
            k2: None,
            k2_raw: Mat::zeros(k2_dim, k2_dim),
        }
    }

    /// Assembles and factors `G` and the border for the given scaling.
    /// Returns false on unrecoverable factorization failure.
    pub fn factor(&mut self, scaling: &Scaling) -> bool {
        for g in &mut self.g_raw {
            g.fill(0.0);
        }
        for unit in &self.units {
            match unit {
                Unit::Nonneg {
                    sblk,
                    k,
                    comp,
                    entries,
                } => {
                    let h = match &scaling.blocks[*sblk] {
                        BlockScaling::Nonneg { w, .. } => w[*k] * w[*k],
                        _ => unreachable!(),
                    };
                    let g = &mut self.g_raw[*comp];
                    for (a, &(ia, va)) in entries.iter().enumerate() {
                        for &(ib, vb) in &entries[..=a] {
                            let add = h * va * vb;
                            if ia >= ib {
                                g[(ia, ib)] += add;
                            } else {
                                g[(ib, ia)] += add;
                            }
                        }
                    }
                }
                Unit::Soc {
                    sblk,
                    comp,
                    rows,
                    s,
                    sst,
                } => {
                    let (eta, v) = match &scaling.blocks[*sblk] {
                        BlockScaling::Soc { eta, v, .. } => (*eta, v),
                        _ => unreachable!(),
                    };
                    let dim = v.len();
                    // H = eta^2 (2vv' - J), so S H S' over the touching rows
                    // is eta^2 (2 pp' - 2 qq' + SS') with p = Sv, q = S e0.
                    let mut p = vec![0.0; rows.len()];
                    let mut q = vec![0.0; rows.len()];
                    for r in 0..rows.len() {
                        let mut pv = 0.0;
                        for j in 0..dim {
                            pv += s[(r, j)] * v[j];
                        }
                        p[r] = pv;
                        q[r] = s[(r, 0)];
                    }
                    let e2 = eta * eta;
                    let g = &mut self.g_raw[*comp];
                    for a in 0..rows.len() {
                        for b in 0..=a {
                            let add = e2
                                * (sst[(a, b)] + 2.0 * p[a] * p[b] - 2.0 * q[a] * q[b]);
                            let (ia, ib) = (rows[a], rows[b]);
                            if ia >= ib {
                                g[(ia, ib)] += add;
                            } else {
                                g[(ib, ia)] += add;
                            }
                        }
                    }
                }
                Unit::Psd {
                    sblk,
                    comp,
                    side,
                    rows,
                    ms,
                } => {
                    let wm = match &scaling.blocks[*sblk] {
                        BlockScaling::Psd { wm, .. } => wm,
                        _ => unreachable!(),
                    };
                    let side = *side;
                    let g = &mut self.g_raw[*comp];
                    // N_a = Wm M_a Wm formed per row; pair terms then cost
                    // only the sparsity of M_b. The left product runs over
                    // the handful of rows M_a actually touches instead of a
                    // dense side^3 multiply.
                    let mut t = nalgebra::DMatrix::<f64>::zeros(side, side);
                    let mut n_a = nalgebra::DMatrix::<f64>::zeros(side, side);
                    let mut touched: Vec<usize> = Vec::new();
                    for a in 0..rows.len() {
                        t.fill(0.0);
                        touched.clear();
                        for &(p, qq, val) in &ms[a].entries {
                            if !touched.contains(&p) {
                                touched.push(p);
                            }
                            for col in 0..side {
                                t[(p, col)] += val * wm[(qq, col)];
                            }
                        }
                        n_a.fill(0.0);
                        for &p in &touched {
                            for j in 0..side {
                                let tv = t[(p, j)];
                                if tv != 0.0 {
                                    for i in 0..side {
                                        n_a[(i, j)] += wm[(i, p)] * tv;
                                    }
                                }
                            }
                        }
                        for b in 0..=a {
                            let mut acc = 0.0;
                            for &(p, qq, val) in &ms[b].entries {
                                acc += val * n_a[(qq, p)];
                            }
                            let (ia, ib) = (rows[a], rows[b]);
                            if ia >= ib {
                                g[(ia, ib)] += acc;
                            } else {
                                g[(ib, ia)] += acc;
                            }
                        }
                    }
                }
            }
        }

        // Mirror to the upper triangle and factor with escalating static
        // regularization.
        self.g_chol.clear();
        self.ginv_af.clear();
        for g in &mut self.g_raw {
            let n = g.nrows();
            for i in 0..n {
                for j in 0..i {
                    g[(j, i)] = g[(i, j)];
                }
            }
        }
        for g in &self.g_raw {
            let n = g.nrows();
            let mut max_diag = 0.0f64;
            for i in 0..n {
                max_diag = max_diag.max(g[(i, i)].abs());
            }
            let mut reg = 1e-12 * (1.0 + max_diag);
            let mut chol = None;
            for _ in 0..4 {
                let mut gr = g.clone();
                for i in 0..n {
                    gr[(i, i)] += reg;
                }
                match Llt::new(gr.as_ref(), Side::Lower) {
                    Ok(f) => {
                        chol = Some(f);
                        break;
                    }
                    Err(_) => reg *= 1e3,
                }
            }
            match chol {
                Some(f) => self.g_chol.push(Some(f)),
                None => return false,
            }
        }

        // Border: S_f = sum_c A_f[c]' G_c^{-1} A_f[c], assembled into
        // K2 = [[S_f, -A0'], [-A0, 0]].
        let k2_dim = self.n_f + self.border_rows.len();
        if k2_dim > 0 {
            let mut sf = Mat::<f64>::zeros(self.n_f, self.n_f);
            for (c, af) in self.af.iter().enumerate() {
                if af.nrows() == 0 || self.n_f == 0 {
                    self.ginv_af.push(af.clone());
                    continue;
                }
                let mut sol = af.clone();
                self.g_chol[c].as_ref().unwrap().solve_in_place(sol.as_mut());
                sf += af.transpose() * &sol;
                self.ginv_af.push(sol);
            }
            let mut k2 = Mat::<f64>::zeros(k2_dim, k2_dim);
            for i in 0..self.n_f {
                for j in 0..self.n_f {
                    k2[(i, j)] = sf[(i, j)];
                }
            }
            for (r, _) in self.border_rows.iter().enumerate() {
                for j in 0..self.n_f {
                    k2[(self.n_f + r, j)] = -self.a0[(r, j)];
                    k2[(j, self.n_f + r)] = -self.a0[(r, j)];
                }
            }
            self.k2_raw = k2.clone();
            self.k2 = Some(Lblt::new(k2.as_ref(), Side::Lower));
        } else {
            self.k2 = None;
        }
        true
    }

    /// Solves the bordered system for right-hand sides `r_f` (free dual
    /// rows) and `r_y` (primal rows), with one refinement pass.
    pub fn solve(&self, r_f: &[f64], r_y: &[f64]) -> KktSolution {
        let (mut dx_f, mut dy) = self.solve_once(r_f, r_y);
        // Refinement against the unregularized matrices.
        let (res_f, res_y) = self.residual(r_f, r_y, &dx_f, &dy);
        let (cor_f, cor_y) = self.solve_once(&res_f, &res_y);
        for (v, c) in dx_f.iter_mut().zip(&cor_f) {
            *v += c;
        }
        for (v, c) in dy.iter_mut().zip(&cor_y) {
            *v += c;
        }
        KktSolution { dx_f, dy }
    }

    fn solve_once(&self, r_f: &[f64], r_y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        // t_c = G_c^{-1} r_y[c]
        let mut t: Vec<Mat<f64>> = Vec::with_capacity(self.comp_rows.len());
        for (c, rows) in self.comp_rows.iter().enumerate() {
            let mut rhs = Mat::zeros(rows.len(), 1);
            for (l, &i) in rows.iter().enumerate() {
                rhs[(l, 0)] = r_y[i];
            }
            self.g_chol[c].as_ref().unwrap().solve_in_place(rhs.as_mut());
            t.push(rhs);
        }
        let mut dx_f = vec![0.0; self.n_f];
        let mut dy_border = vec![0.0; self.border_rows.len()];
        if let Some(k2) = &self.k2 {
            // rhs1 = sum_c af' t_c - r_f ; rhs2 = -r_y[border].
            let mut rhs = Mat::zeros(self.n_f + self.border_rows.len(), 1);
            for jf in 0..self.n_f {
                let mut acc = -r_f[jf];
                for (c, af) in self.af.iter().enumerate() {
                    for l in 0..af.nrows() {
                        acc += af[(l, jf)] * t[c][(l, 0)];
                    }
                }
                rhs[(jf, 0)] = acc;
            }
            for (r, &i) in self.border_rows.iter().enumerate() {
                rhs[(self.n_f + r, 0)] = -r_y[i];
            }
            k2.solve_in_place(rhs.as_mut());
            for jf in 0..self.n_f {
                dx_f[jf] = rhs[(jf, 0)];
            }
            for r in 0..self.border_rows.len() {
                dy_border[r] = rhs[(self.n_f + r, 0)];
            }
        }
        // dy_c = t_c - G_c^{-1} A_f dx_f.
        let mut dy = vec![0.0; self.m];
        for (c, rows) in self.comp_rows.iter().enumerate() {
            for (l, &i) in rows.iter().enumerate() {
                let mut v = t[c][(l, 0)];
                if self.n_f > 0 {
                    let ga = &self.ginv_af[c];
                    for jf in 0..self.n_f {
                        v -= ga[(l, jf)] * dx_f[jf];
                    }
                }
                dy[i] = v;
            }
        }
        for (r, &i) in self.border_rows.iter().enumerate() {
            dy[i] = dy_border[r];
        }
        (dx_f, dy)
    }

    /// Residual of the bordered equations at a candidate solution.
    fn residual(
        &self,
        r_f: &[f64],
        r_y: &[f64],
        dx_f: &[f64],
        dy: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut res_f = r_f.to_vec();
        for (c, af) in self.af.iter().enumerate() {
            let rows = &self.comp_rows[c];
            for jf in 0..self.n_f {
                let mut acc = 0.0;
                for (l, &i) in rows.iter().enumerate() {
                    acc += af[(l, jf)] * dy[i];
                }
                res_f[jf] -= acc;
            }
        }
        for (r, &i) in self.border_rows.iter().enumerate() {
            for jf in 0..self.n_f {
                res_f[jf] -= self.a0[(r, jf)] * dy[i];
            }
        }
        let mut res_y = r_y.to_vec();
        for (c, rows) in self.comp_rows.iter().enumerate() {
            let g = &self.g_raw[c];
            let af = &self.af[c];
            for (l, &i) in rows.iter().enumerate() {
                let mut acc = 0.0;
                for (l2, &i2) in rows.iter().enumerate() {
                    acc += g[(l, l2)] * dy[i2];
                }
                for jf in 0..self.n_f {
                    acc += af[(l, jf)] * dx_f[jf];
                }
                res_y[i] -= acc;
            }
        }
        for (r, &i) in self.border_rows.iter().enumerate() {
            let mut acc = 0.0;
            for jf in 0..self.n_f {
                acc += self.a0[(r, jf)] * dx_f[jf];
            }
            res_y[i] -= acc;
        }
        (res_f, res_y)
    }

    pub fn free_cols(&self) -> &[usize] {
        &self.free_cols
    }
}
