//! Homogeneous self-dual interior-point solver.
//!
//! The embedding tracks `(x, y, z, tau, kappa)` with residuals
//!
//! ```text
//! p = A x - b tau,   d = A'y + z - c tau,   g = -c'x + b'y - kappa,
//! ```
//!
//! and drives them to zero along the central path `lambda o lambda = mu e`,
//! `tau kappa = mu`. Convergence yields `x/tau`; `tau -> 0` with `b'y > 0`
//! or `c'x < 0` yields an infeasibility ray, which is only reported after
//! the Farkas inequalities have been verified against the original
//! (unscaled) data. Search directions come from Nesterov-Todd scaling with a
//! Mehrotra predictor-corrector; the cone block of each Newton system is
//! eliminated analytically and the rest is handled by [`super::kkt`].

use super::kkt::KktSystem;
use super::scaling::{self, Scaling};
use super::{cone_margin, Cone, ConicProgram, Residuals, SolveResult, Status};

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Relative primal and dual feasibility tolerance.
    pub feas_tol: f64,
    /// Relative duality-gap tolerance.
    pub gap_tol: f64,
    /// Farkas certificate verification tolerance.
    pub cert_tol: f64,
    pub max_iter: usize,
    /// Accept at these relaxed tolerances when the iteration cap is reached.
    pub reduced_tol: f64,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> SolverOptions {
        SolverOptions {
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            cert_tol: 1e-7,
            max_iter: 200,
            reduced_tol: 1e-5,
            verbose: false,
        }
    }
}

/// Ruiz-equilibrated copy of the program data. Column scalings are uniform
/// across each SOC and PSD block so cone membership is preserved.
pub(super) struct ProblemData {
    pub cones: Vec<Cone>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub cols: Vec<Vec<(usize, f64)>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub row_scale: Vec<f64>,
    pub col_scale: Vec<f64>,
}

impl ProblemData {
    fn build(prog: &ConicProgram) -> ProblemData {
        let m = prog.num_rows();
        let n = prog.num_vars();
        // Column -> cone block, and whether that block needs uniform scaling.
        let mut block_of = vec![0usize; n];
        let mut uniform = Vec::new();
        let mut off = 0;
        for (bi, cone) in prog.cones().iter().enumerate() {
            for j in off..off + cone.dim() {
                block_of[j] = bi;
            }
            uniform.push(matches!(cone, Cone::Soc(_) | Cone::Psd(_)));
            off += cone.dim();
        }
        let mut row_scale = vec![1.0f64; m];
        let mut col_scale = vec![1.0f64; n];
        for _ in 0..5 {
            let mut row_norm = vec![0.0f64; m];
            let mut col_norm = vec![0.0f64; n];
            for i in 0..m {
                for &(j, v) in prog.row_terms(i) {
                    let a = (v * row_scale[i] * col_scale[j]).abs();
                    row_norm[i] = row_norm[i].max(a);
                    col_norm[j] = col_norm[j].max(a);
                }
            }
            for i in 0..m {
                if row_norm[i] > 0.0 {
                    row_scale[i] /= row_norm[i].sqrt();
                }
            }
            // Uniform blocks take the max over their columns.
            let mut block_norm = vec![0.0f64; prog.cones().len()];
            for j in 0..n {
                block_norm[block_of[j]] = block_norm[block_of[j]].max(col_norm[j]);
            }
            for j in 0..n {
                let norm = if uniform[block_of[j]] {
                    block_norm[block_of[j]]
                } else {
                    col_norm[j]
                };
                if norm > 0.0 {
                    col_scale[j] /= norm.sqrt();
                }
            }
        }
        let mut rows = Vec::with_capacity(m);
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for i in 0..m {
            let terms: Vec<(usize, f64)> = prog
                .row_terms(i)
                .iter()
                .map(|&(j, v)| (j, v * row_scale[i] * col_scale[j]))
                .collect();
            for &(j, v) in &terms {
                cols[j].push((i, v));
            }
            rows.push(terms);
        }
        let b: Vec<f64> = (0..m).map(|i| prog.rhs(i) * row_scale[i]).collect();
        let c: Vec<f64> = (0..n).map(|j| prog.cost()[j] * col_scale[j]).collect();
        ProblemData {
            cones: prog.cones().to_vec(),
            rows,
            cols,
            b,
            c,
            row_scale,
            col_scale,
        }
    }

    fn mul_a(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, v) in row {
                acc += v * x[j];
            }
            out[i] = acc;
        }
    }

    fn mul_at(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for &(j, v) in row {
                out[j] += v * yi;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn amax(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Zeroes free-block positions so cone-block operators see clean inputs.
fn zero_free(cones: &[Cone], v: &mut [f64]) {
    let mut off = 0;
    for cone in cones {
        if let Cone::Free(k) = cone {
            v[off..off + k].iter_mut().for_each(|x| *x = 0.0);
        }
        off += cone.dim();
    }
}

struct Dirs {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dtau: f64,
    dkappa: f64,
    /// Scaled directions `W^{-T} dx`, `W dz` (cone positions).
    shat: Vec<f64>,
    zhat: Vec<f64>,
}

struct IterCtx<'a> {
    data: &'a ProblemData,
    kkt: &'a KktSystem,
    scal: &'a Scaling,
    c_cone: &'a [f64],
    hc: Vec<f64>,
    ahc: Vec<f64>,
    w_f: Vec<f64>,
    w_y: Vec<f64>,
    denom: f64,
    tau: f64,
    kappa: f64,
}

impl IterCtx<'_> {
    /// Newton direction for given residual targets; `v` solves
    /// `lambda o (W^{-T}dx + W dz) = ds`.
    fn direction(&self, rp: &[f64], rd: &[f64], rg: f64, v: &[f64], ds_tau: f64) -> Dirs {
        let data = self.data;
        let cones = &data.cones[..];
        let n = data.c.len();
        let m = data.b.len();
        let free_cols = self.kkt.free_cols();

        let mut rd_cone = rd.to_vec();
        zero_free(cones, &mut rd_cone);
        // q1 = W'v - H rd_c on cone positions.
        let wtv = self.scal.apply_wt(cones, v);
        let h_rd = self.scal.apply_h(cones, &rd_cone);
        let q1: Vec<f64> = wtv.iter().zip(&h_rd).map(|(a, b)| a - b).collect();

        // rhs_y = rp - A q1 (q1 is zero on free positions).
        let mut aq1 = vec![0.0; m];
        data.mul_a(&q1, &mut aq1);
        let rhs_y: Vec<f64> = rp.iter().zip(&aq1).map(|(r, a)| r - a).collect();
        let rd_f: Vec<f64> = free_cols.iter().map(|&j| rd[j]).collect();
        let u = self.kkt.solve(&rd_f, &rhs_y);

        let c_f: Vec<f64> = free_cols.iter().map(|&j| data.c[j]).collect();
        let num = rg
            + ds_tau / self.tau
            + dot(&c_f, &u.dx_f)
            + dot(self.c_cone, &q1)
            + dot(&self.ahc, &u.dy)
            - dot(&data.b, &u.dy);
        let dtau = num / self.denom;

        let dy: Vec<f64> = u.dy.iter().zip(&self.w_y).map(|(a, w)| a + dtau * w).collect();
        let dx_f: Vec<f64> = u
            .dx_f
            .iter()
            .zip(&self.w_f)
            .map(|(a, w)| a + dtau * w)
            .collect();

        let mut atdy = vec![0.0; n];
        data.mul_at(&dy, &mut atdy);
        let mut atdy_cone = atdy.clone();
        zero_free(cones, &mut atdy_cone);

        // dz on cone rows; free rows have no dual slack.
        let dz: Vec<f64> = (0..n)
            .map(|j| rd_cone[j] + self.c_cone[j] * dtau - atdy_cone[j])
            .collect();

        let h_atdy = self.scal.apply_h(cones, &atdy_cone);
        let mut dx: Vec<f64> = (0..n)
            .map(|j| q1[j] - self.hc[j] * dtau + h_atdy[j])
            .collect();
        for (k, &j) in free_cols.iter().enumerate() {
            dx[j] = dx_f[k];
        }
        let dkappa = (ds_tau - self.kappa * dtau) / self.tau;

        let mut dx_cone = dx.clone();
        zero_free(cones, &mut dx_cone);
        let shat = self.scal.apply_w_inv_t(cones, &dx_cone);
        let zhat = self.scal.apply_w(cones, &dz);
        Dirs {
            dx,
            dy,
            dz,
            dtau,
            dkappa,
            shat,
            zhat,
        }
    }

    /// Largest feasible step for the given directions.
    fn max_step(&self, d: &Dirs) -> f64 {
        let mut t = self
            .scal
            .max_step(&self.data.cones, &d.shat)
            .min(self.scal.max_step(&self.data.cones, &d.zhat));
        if d.dtau < 0.0 {
            t = t.min(-self.tau / d.dtau);
        }
        if d.dkappa < 0.0 {
            t = t.min(-self.kappa / d.dkappa);
        }
        t
    }
}

struct BestIterate {
    metric: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    tau: f64,
    res: Residuals,
    pobj: f64,
    dobj: f64,
}

pub(super) fn solve(prog: &ConicProgram, opts: &SolverOptions) -> SolveResult {
    let data = ProblemData::build(prog);
    let mut kkt = KktSystem::new(&data);
    let cones = data.cones.clone();
    let n = data.c.len();
    let m = data.b.len();
    let deg: usize = cones.iter().map(|c| c.degree()).sum::<usize>();

    let mut x = vec![0.0; n];
    let mut z = vec![0.0; n];
    Scaling::mu_e(&cones, 1.0, &mut x);
    Scaling::mu_e(&cones, 1.0, &mut z);
    let mut y = vec![0.0; m];
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;

    let mut c_cone = data.c.clone();
    zero_free(&cones, &mut c_cone);
    let free_cols: Vec<usize> = kkt.free_cols().to_vec();
    let c_f: Vec<f64> = free_cols.iter().map(|&j| data.c[j]).collect();

    let mut best: Option<BestIterate> = None;
    let mut stall = 0usize;
    let mut iterations = 0usize;

    let fail = |why: &str, best: Option<BestIterate>, iters: usize| -> SolveResult {
        let (x, y, z, res, pobj, dobj) = match best {
            Some(b) => {
                let (ux, uy, uz) = unscale(&data, &b.x, &b.y, &b.z, b.tau);
                (ux, uy, uz, b.res, b.pobj, b.dobj)
            }
            None => (
                vec![0.0; n],
                vec![0.0; m],
                vec![0.0; n],
                Residuals {
                    primal: f64::INFINITY,
                    dual: f64::INFINITY,
                    gap: f64::INFINITY,
                },
                f64::NAN,
                f64::NAN,
            ),
        };
        SolveResult {
            status: Status::NumericalProblem(why.to_string()),
            x,
            y,
            z,
            primal_objective: pobj,
            dual_objective: dobj,
            residuals: res,
            iterations: iters,
        }
    };

    for it in 0..=opts.max_iter {
        iterations = it;
        // Residuals of the embedding (scaled data).
        let mut p = vec![0.0; m];
        data.mul_a(&x, &mut p);
        for i in 0..m {
            p[i] -= data.b[i] * tau;
        }
        let mut d = vec![0.0; n];
        data.mul_at(&y, &mut d);
        for j in 0..n {
            d[j] += z[j] - data.c[j] * tau;
        }
        let g = -dot(&data.c, &x) + dot(&data.b, &y) - kappa;
        let mu = (dot(&x, &z) + tau * kappa) / (deg + 1) as f64;

        // Convergence metrics on the original data. Residual vectors map
        // back through the row and column scalings.
        let pres = {
            let mut s = 0.0f64;
            for i in 0..m {
                let v = p[i] / data.row_scale[i];
                s += v * v;
            }
            s.sqrt() / (tau * norm_b_orig(prog))
        };
        let dres = {
            let mut s = 0.0f64;
            for j in 0..n {
                let v = d[j] * data.col_scale[j];
                s += v * v;
            }
            s.sqrt() / (tau * norm_c_orig(prog))
        };
        let pobj = dot(&data.c, &x) / tau;
        let dobj = dot(&data.b, &y) / tau;
        let relgap = (pobj - dobj).abs() / (1.0 + pobj.abs().max(dobj.abs()));

        if opts.verbose {
            eprintln!(
                "it {it:3}  pres {pres:9.2e}  dres {dres:9.2e}  gap {relgap:9.2e}  mu {mu:9.2e}  tau {tau:9.2e}  kappa {kappa:9.2e}"
            );
        }

        let metric = pres.max(dres).max(relgap);
        if best.as_ref().is_none_or(|b| metric < b.metric) {
            best = Some(BestIterate {
                metric,
                x: x.clone(),
                y: y.clone(),
                z: z.clone(),
                tau,
                res: Residuals {
                    primal: pres,
                    dual: dres,
                    gap: relgap,
                },
                pobj: pobj + prog.objective_offset(),
                dobj: dobj + prog.objective_offset(),
            });
        }

        if pres <= opts.feas_tol && dres <= opts.feas_tol && relgap <= opts.gap_tol {
            let (ux, uy, uz) = unscale(&data, &x, &y, &z, tau);
            return SolveResult {
                status: Status::Optimal,
                x: ux,
                y: uy,
                z: uz,
                primal_objective: pobj + prog.objective_offset(),
                dual_objective: dobj + prog.objective_offset(),
                residuals: Residuals {
                    primal: pres,
                    dual: dres,
                    gap: relgap,
                },
                iterations: it,
            };
        }

        // Farkas certificate checks against the original data.
        if let Some(result) = try_certificates(prog, &data, &x, &y, &z, opts, it) {
            return result;
        }

        if it == opts.max_iter {
            break;
        }
        if tau <= 1e-12 * kappa.max(1.0) {
            return fail("tau collapsed without a verifiable certificate", best, it);
        }

        let Some(scal) = scaling::compute(&cones, &x, &z) else {
            return fail("iterate left the cone interior", best, it);
        };
        if !kkt.factor(&scal) {
            return fail("KKT factorization failed", best, it);
        }

        let hc = scal.apply_h(&cones, &c_cone);
        let mut ahc = vec![0.0; m];
        data.mul_a(&hc, &mut ahc);
        let mut rhs2_y = vec![0.0; m];
        for i in 0..m {
            rhs2_y[i] = data.b[i] + ahc[i];
        }
        let w = kkt.solve(&c_f, &rhs2_y);
        let denom = -dot(&c_f, &w.dx_f) - dot(&ahc, &w.dy) + dot(&data.b, &w.dy)
            + dot(&c_cone, &hc)
            + kappa / tau;
        if !denom.is_finite() || denom.abs() < 1e-300 {
            return fail("degenerate Newton system", best, it);
        }
        let ctx = IterCtx {
            data: &data,
            kkt: &kkt,
            scal: &scal,
            c_cone: &c_cone,
            hc,
            ahc,
            w_f: w.dx_f,
            w_y: w.dy,
            denom,
            tau,
            kappa,
        };

        // Predictor.
        let rp: Vec<f64> = p.iter().map(|v| -v).collect();
        let rd: Vec<f64> = d.iter().map(|v| -v).collect();
        let neg_lambda: Vec<f64> = scal.lambda.iter().map(|v| -v).collect();
        let aff = ctx.direction(&rp, &rd, -g, &neg_lambda, -tau * kappa);
        let alpha_aff = ctx.max_step(&aff).min(1.0);

        let mut mu_aff = (tau + alpha_aff * aff.dtau) * (kappa + alpha_aff * aff.dkappa);
        for j in 0..n {
            mu_aff += (x[j] + alpha_aff * aff.dx[j]) * (z[j] + alpha_aff * aff.dz[j]);
        }
        mu_aff /= (deg + 1) as f64;
        // When the affine direction fails to reduce complementarity its
        // second-order terms dominate and the Mehrotra correction would
        // poison the step; fall back to a pure centering step instead.
        let (sigma, use_corrector) = if mu_aff >= mu || alpha_aff < 1e-3 {
            (1.0, false)
        } else {
            ((mu_aff / mu).powi(3).clamp(0.0, 0.9999), true)
        };

        // Corrector with residual damping (1 - sigma).
        let mut ds = vec![0.0; n];
        Scaling::mu_e(&cones, sigma * mu, &mut ds);
        let mut lsq = vec![0.0; n];
        scal.lambda_sq(&cones, &mut lsq);
        let mut corr = vec![0.0; n];
        if use_corrector {
            scal.jordan_product(&cones, &aff.shat, &aff.zhat, &mut corr);
        }
        for j in 0..n {
            ds[j] -= lsq[j] + corr[j];
        }
        let mut v = vec![0.0; n];
        scal.lambda_solve(&cones, &ds, &mut v);
        let ds_tau = sigma * mu
            - tau * kappa
            - if use_corrector {
                aff.dtau * aff.dkappa
            } else {
                0.0
            };
        let damp = 1.0 - sigma;
        let rp2: Vec<f64> = p.iter().map(|r| -damp * r).collect();
        let rd2: Vec<f64> = d.iter().map(|r| -damp * r).collect();
        let dir = ctx.direction(&rp2, &rd2, -damp * g, &v, ds_tau);

        let alpha = (0.99 * ctx.max_step(&dir)).min(1.0);
        if alpha < 1e-7 {
            stall += 1;
            if stall >= 2 {
                return fail("step length collapsed", best, it);
            }
        } else {
            stall = 0;
        }

        for j in 0..n {
            x[j] += alpha * dir.dx[j];
            z[j] += alpha * dir.dz[j];
        }
        for i in 0..m {
            y[i] += alpha * dir.dy[i];
        }
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
    }

    // Iteration cap: accept at reduced accuracy if close, else report.
    if let Some(b) = &best {
        if b.res.primal <= opts.reduced_tol
            && b.res.dual <= opts.reduced_tol
            && b.res.gap <= opts.reduced_tol
        {
            let (ux, uy, uz) = unscale(&data, &b.x, &b.y, &b.z, b.tau);
            return SolveResult {
                status: Status::Optimal,
                x: ux,
                y: uy,
                z: uz,
                primal_objective: b.pobj,
                dual_objective: b.dobj,
                residuals: b.res,
                iterations,
            };
        }
    }
    fail("iteration limit reached", best, iterations)
}

fn norm_b_orig(prog: &ConicProgram) -> f64 {
    1.0 + (0..prog.num_rows())
        .map(|i| prog.rhs(i) * prog.rhs(i))
        .sum::<f64>()
        .sqrt()
}

fn norm_c_orig(prog: &ConicProgram) -> f64 {
    1.0 + norm2(prog.cost())
}

/// Maps a scaled iterate back to original coordinates, dividing by `tau`.
fn unscale(
    data: &ProblemData,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    tau: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ux: Vec<f64> = x
        .iter()
        .zip(&data.col_scale)
        .map(|(v, s)| v * s / tau)
        .collect();
    let uy: Vec<f64> = y
        .iter()
        .zip(&data.row_scale)
        .map(|(v, s)| v * s / tau)
        .collect();
    let uz: Vec<f64> = z
        .iter()
        .zip(&data.col_scale)
        .map(|(v, s)| v / s / tau)
        .collect();
    (ux, uy, uz)
}

/// Checks the current iterate for a verifiable Farkas certificate; rays are
/// scale-free so no division by tau.
fn try_certificates(
    prog: &ConicProgram,
    data: &ProblemData,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    opts: &SolverOptions,
    it: usize,
) -> Option<SolveResult> {
    let n = prog.num_vars();
    let m = prog.num_rows();
    // Unscaled ray candidates.
    let uy: Vec<f64> = y
        .iter()
        .zip(&data.row_scale)
        .map(|(v, s)| v * s)
        .collect();
    let uz: Vec<f64> = z
        .iter()
        .zip(&data.col_scale)
        .map(|(v, s)| v / s)
        .collect();
    let ux: Vec<f64> = x
        .iter()
        .zip(&data.col_scale)
        .map(|(v, s)| v * s)
        .collect();

    // Primal infeasibility: b'y > 0, A'y + z = 0, z in K*.
    let by: f64 = (0..m).map(|i| prog.rhs(i) * uy[i]).sum();
    if by > 0.0 {
        let yn: Vec<f64> = uy.iter().map(|v| v / by).collect();
        let zn: Vec<f64> = uz.iter().map(|v| v / by).collect();
        let mut atz = zn.clone();
        prog.mul_at(&yn, 1.0, &mut atz);
        let res = norm2(&atz) / (1.0 + norm2(&yn) + norm2(&zn));
        let margin = cone_margin(prog.cones(), &zn);
        if res <= opts.cert_tol && margin >= -1e-9 * (1.0 + amax(&zn)) {
            return Some(SolveResult {
                status: Status::PrimalInfeasible,
                x: vec![0.0; n],
                y: yn,
                z: zn,
                primal_objective: f64::INFINITY,
                dual_objective: f64::INFINITY,
                residuals: Residuals {
                    primal: f64::INFINITY,
                    dual: res,
                    gap: f64::INFINITY,
                },
                iterations: it,
            });
        }
    }

    // Dual infeasibility: c'x < 0, A x = 0, x in K.
    let cx = dot(prog.cost(), &ux);
    if cx < 0.0 {
        let xn: Vec<f64> = ux.iter().map(|v| v / -cx).collect();
        let mut ax = vec![0.0; m];
        prog.mul_a(&xn, 1.0, &mut ax);
        let res = norm2(&ax) / (1.0 + norm2(&xn));
        let margin = cone_margin(prog.cones(), &xn);
        if res <= opts.cert_tol && margin >= -1e-9 * (1.0 + amax(&xn)) {
            return Some(SolveResult {
                status: Status::DualInfeasible,
                x: xn,
                y: vec![0.0; m],
                z: vec![0.0; n],
                primal_objective: f64::NEG_INFINITY,
                dual_objective: f64::NEG_INFINITY,
                residuals: Residuals {
                    primal: res,
                    dual: f64::INFINITY,
                    gap: f64::INFINITY,
                },
                iterations: it,
            });
        }
    }
    None
}
