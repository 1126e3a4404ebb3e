//! Maximum likelihood for `(α, U, V)` by EM on the mean-shifted model
//!
//! ```text
//! y_mi = ζ_m,c(i) + x_mᵀ η_i + ε_mi,   ζ_m ~ N(B x_m, U),   ε_m ~ N(0, V)
//! ```
//!
//! The E-step needs only the posterior mean `ζ̄_m = B x_m + K Zᵀ V⁻¹ r_m`
//! and the shared posterior covariance `K`. The M-step updates `B` from
//! `ζ̄`, then `U`, then alternates `V` and `η` (each an exact conditional
//! maximiser, so the likelihood never decreases).

use nalgebra::{DMatrix, DVector};

use super::ols::ols_parts;
use super::{CoefficientSet, Estimator, FitResult};
use crate::covstruct::{RandomEffectCov, ResidualCov, StructuredCovariance, VMode};
use crate::error::{Error, Result};
use crate::linalg::{clip_eigenvalues, spd_inverse, symmetrize};
use crate::netdata::ModelData;

#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Absolute change in marginal log-likelihood that counts as converged.
    pub tol: f64,
    /// Change relative to `|log-likelihood|` that also counts as converged.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Cap on the `V`/`η` alternation inside one M-step.
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    /// Residual variances are kept above this fraction of each cell's
    /// initial residual variance.
    pub v_floor: f64,
    /// Same for the eigenvalues of block `V`. When a cell has more edges
    /// than `N − p` the block likelihood is unbounded, so this floor is
    /// what keeps the estimate away from a singular `Σ`. Where the floor
    /// binds, convergence slows markedly; very tight `tol` may not be met.
    pub block_floor: f64,
    /// Smallest initial `V` as a fraction of the cell's residual variance.
    pub init_v_min: f64,
    /// `(cell, covariate)` pairs whose `β` is fixed at zero.
    pub zero_beta: Vec<(usize, usize)>,
    /// Extrapolate between EM steps (see [`fit_em_from`]).
    pub accelerate: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            rel_tol: 1e-8,
            max_iter: 1000,
            inner_max_iter: 50,
            inner_tol: 1e-8,
            v_floor: 1e-6,
            block_floor: 0.2,
            init_v_min: 0.05,
            zero_beta: Vec::new(),
            accelerate: true,
        }
    }
}

/// Parameter values EM starts from or stopped at.
#[derive(Debug, Clone)]
pub struct EmState {
    /// `cells × p`.
    pub beta: DMatrix<f64>,
    /// `edges × q`.
    pub eta: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: ResidualCov,
    /// Absolute lower bound on residual variances per cell.
    pub v_floor: Vec<f64>,
}

impl EmState {
    pub fn from_fit(fit: &FitResult) -> Result<Self> {
        let floor = if fit.v_floor.is_empty() {
            (0..fit.v.layout().n_cells())
                .map(|c| 1e-6 * fit.v.mean_variance(c))
                .collect()
        } else {
            fit.v_floor.clone()
        };
        Ok(Self {
            beta: fit.coefficients.beta().clone(),
            eta: fit.coefficients.eta().clone(),
            u: fit.u.matrix().clone(),
            v: fit.v.clone(),
            v_floor: floor,
        })
    }
}

/// Starting values: OLS coefficients, `U` from cross-cell covariances of
/// cell-mean residuals, and a diagonal `V` from the remaining per-cell
/// variance (whatever the requested mode).
pub fn em_init(data: &ModelData, mode: VMode, opts: &EmOptions) -> Result<EmState> {
    let parts = ols_parts(data)?;
    let layout = data.layout();
    let n = data.n_subjects();
    let nc = layout.n_cells();
    let x = data.designs.covariates();
    let mut rbar = DMatrix::zeros(n, nc);
    let mut ss = vec![0.0; nc];
    let mut fitted = vec![0.0; layout.n_edges()];
    for (m, y) in data.responses().iter().enumerate() {
        let xm: Vec<f64> = x.row(m).iter().cloned().collect();
        parts.coef.mean_into(&xm, &mut fitted);
        for c in 0..nc {
            let r = layout.range(c);
            let mut sum = 0.0;
            for e in r.clone() {
                let res = y[e] - fitted[e];
                sum += res;
                ss[c] += res * res;
            }
            rbar[(m, c)] = sum / r.len() as f64;
        }
    }
    let denom = (n - 1) as f64;
    let u = clip_eigenvalues(&(rbar.transpose() * &rbar / denom), 0.0);
    let mut var = Vec::with_capacity(nc);
    let mut floor = Vec::with_capacity(nc);
    let floor_frac = if mode == VMode::Block { opts.block_floor } else { opts.v_floor };
    for c in 0..nc {
        let avg = ss[c] / (denom * layout.size(c) as f64);
        if !(avg > 0.0) {
            return Err(Error::Numerical(format!(
                "cell {} has zero residual variance",
                data.designs.partition().cell_name(c)
            )));
        }
        var.push((avg - u[(c, c)]).max(opts.init_v_min * avg));
        floor.push(floor_frac * avg);
        var[c] = var[c].max(floor[c]);
    }
    let v = match mode {
        VMode::CellDiagonal => ResidualCov::cell_diagonal(layout.clone(), var)?,
        VMode::EdgeDiagonal => ResidualCov::edge_diagonal(
            layout.clone(),
            (0..nc).flat_map(|c| std::iter::repeat_n(var[c], layout.size(c))).collect(),
        )?,
        VMode::Block => ResidualCov::block(
            layout.clone(),
            (0..nc)
                .map(|c| DMatrix::from_diagonal_element(layout.size(c), layout.size(c), var[c]))
                .collect(),
        )?,
    };
    Ok(EmState {
        beta: parts.coef.beta().clone(),
        eta: parts.coef.eta().clone(),
        u,
        v,
        v_floor: floor,
    })
}

pub fn fit_em(data: &ModelData, mode: VMode, opts: &EmOptions) -> Result<FitResult> {
    let init = em_init(data, mode, opts)?;
    fit_em_from(data, init, opts)
}

/// Response moments that stay fixed across iterations.
struct Moments {
    /// `Σ_m y_me²`.
    yy_diag: Vec<f64>,
    /// `Σ_m y_mc y_mcᵀ` per cell (block mode only).
    yy_block: Vec<DMatrix<f64>>,
    /// `Σ_m y_me x_m,≤q` (`edges × q`).
    hy: DMatrix<f64>,
}

impl Moments {
    fn new(data: &ModelData, q: usize, block: bool) -> Self {
        let layout = data.layout();
        let x = data.designs.covariates();
        let d = layout.n_edges();
        let mut yy_diag = vec![0.0; d];
        let mut hy = DMatrix::zeros(d, q);
        for (m, y) in data.responses().iter().enumerate() {
            for e in 0..d {
                yy_diag[e] += y[e] * y[e];
                for j in 0..q {
                    hy[(e, j)] += y[e] * x[(m, j)];
                }
            }
        }
        let yy_block = if block {
            (0..layout.n_cells())
                .map(|c| {
                    let r = layout.range(c);
                    let ymat = DMatrix::from_fn(r.len(), data.n_subjects(), |i, m| {
                        data.responses()[m][r.start + i]
                    });
                    &ymat * ymat.transpose()
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            yy_diag,
            yy_block,
            hy,
        }
    }
}

/// Current parameter values inside the EM loop.
#[derive(Clone)]
struct Params {
    beta: DMatrix<f64>,
    eta: DMatrix<f64>,
    u: DMatrix<f64>,
    v: ResidualCov,
}

impl Params {
    fn sq_dist(&self, o: &Params) -> f64 {
        let mut s = (&self.beta - &o.beta).norm_squared()
            + (&self.eta - &o.eta).norm_squared()
            + (&self.u - &o.u).norm_squared();
        match (&self.v, &o.v) {
            (ResidualCov::Block { blocks: a, .. }, ResidualCov::Block { blocks: b, .. }) => {
                s += a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>();
            }
            (ResidualCov::CellDiagonal { var: a, .. }, ResidualCov::CellDiagonal { var: b, .. })
            | (ResidualCov::EdgeDiagonal { var: a, .. }, ResidualCov::EdgeDiagonal { var: b, .. }) => {
                s += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
            _ => unreachable!("V mode is fixed during a fit"),
        }
        s
    }

    /// `w0 p0 + w1 p1 + w2 p2`, projected back onto the feasible set.
    fn combine(w: [f64; 3], ps: [&Params; 3], floor: &[f64]) -> Result<Params> {
        let lin = |f: &dyn Fn(&Params) -> &DMatrix<f64>| f(ps[0]) * w[0] + f(ps[1]) * w[1] + f(ps[2]) * w[2];
        let beta = lin(&|p| &p.beta);
        let eta = lin(&|p| &p.eta);
        let u = clip_eigenvalues(&symmetrize(&lin(&|p| &p.u)), 0.0);
        let layout = ps[0].v.layout().clone();
        let v = match (&ps[0].v, &ps[1].v, &ps[2].v) {
            (
                ResidualCov::Block { blocks: a, .. },
                ResidualCov::Block { blocks: b, .. },
                ResidualCov::Block { blocks: c, .. },
            ) => {
                let blocks = (0..a.len())
                    .map(|i| {
                        let m = &a[i] * w[0] + &b[i] * w[1] + &c[i] * w[2];
                        clip_eigenvalues(&symmetrize(&m), floor[i])
                    })
                    .collect();
                ResidualCov::block(layout, blocks)?
            }
            (v0, v1, v2) => {
                let (a, b, c) = (diag_values(v0), diag_values(v1), diag_values(v2));
                let floor_of = |i: usize| match v0 {
                    ResidualCov::CellDiagonal { .. } => floor[i],
                    _ => floor[layout.edge_cells()[i]],
                };
                let var = (0..a.len())
                    .map(|i| (w[0] * a[i] + w[1] * b[i] + w[2] * c[i]).max(floor_of(i)))
                    .collect();
                match v0 {
                    ResidualCov::CellDiagonal { .. } => ResidualCov::cell_diagonal(layout, var)?,
                    _ => ResidualCov::edge_diagonal(layout, var)?,
                }
            }
        };
        Ok(Params { beta, eta, u, v })
    }
}

fn diag_values(v: &ResidualCov) -> &[f64] {
    match v {
        ResidualCov::CellDiagonal { var, .. } | ResidualCov::EdgeDiagonal { var, .. } => var,
        ResidualCov::Block { .. } => unreachable!("V mode is fixed during a fit"),
    }
}

/// What the E-step hands to the M-step.
struct Posterior {
    loglik: f64,
    /// `ζ̄` (`N × cells`).
    zeta: DMatrix<f64>,
    /// `ζ̄ − B x`, the posterior mean of `γ`.
    gamma: DMatrix<f64>,
    k: DMatrix<f64>,
}

/// Quantities fixed for the whole fit.
struct Engine<'a> {
    data: &'a ModelData,
    opts: &'a EmOptions,
    gram: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    x1: DMatrix<f64>,
    sq: DMatrix<f64>,
    sq_inv: DMatrix<f64>,
    moments: Moments,
    floor: Vec<f64>,
}

impl Engine<'_> {
    fn e_step(&self, th: &Params) -> Result<Posterior> {
        let data = self.data;
        let layout = data.layout();
        let x = data.designs.covariates();
        let (n, p) = x.shape();
        let q = self.x1.ncols();
        let nc = layout.n_cells();
        let d = layout.n_edges();
        let sigma = StructuredCovariance::new(th.v.clone(), RandomEffectCov::new(th.u.clone())?)?;
        let k = sigma.k().clone();
        let logdet = sigma.logdet();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut resid = DMatrix::zeros(d, n);
        let mut mu = DMatrix::zeros(nc, n);
        for (m, y) in data.responses().iter().enumerate() {
            let mut col = resid.column_mut(m);
            for c in 0..nc {
                let mc: f64 = (0..p).map(|j| th.beta[(c, j)] * x[(m, j)]).sum();
                mu[(c, m)] = mc;
                for e in layout.range(c) {
                    let mut v = mc;
                    for j in 0..q {
                        v += th.eta[(e, j)] * x[(m, j)];
                    }
                    col[e] = y[e] - v;
                }
            }
        }
        // rᵀ V⁻¹ r and w = Zᵀ V⁻¹ r for all subjects at once, cell by cell.
        let mut quad = vec![0.0; n];
        let mut w = DMatrix::zeros(nc, n);
        for c in 0..nc {
            let r = layout.range(c);
            let rc = resid.rows(r.start, r.len());
            let t = sigma.v_solve_cell_matrix(c, &rc.into_owned());
            for m in 0..n {
                let (mut qm, mut wm) = (0.0, 0.0);
                for i in 0..r.len() {
                    qm += rc[(i, m)] * t[(i, m)];
                    wm += t[(i, m)];
                }
                quad[m] += qm;
                w[(c, m)] = wm;
            }
        }
        let kw = &k * &w;
        let mut ll = 0.0;
        for m in 0..n {
            let corr = w.column(m).dot(&kw.column(m));
            ll += -0.5 * (d as f64 * ln2pi + logdet + quad[m] - corr);
        }
        let gamma = kw.transpose();
        let zeta = &gamma + mu.transpose();
        Ok(Posterior {
            loglik: ll,
            zeta,
            gamma,
            k,
        })
    }

    fn m_step(&self, th: &Params, post: &Posterior) -> Result<Params> {
        let data = self.data;
        let x = data.designs.covariates();
        let n = data.n_subjects();
        let g = post.zeta.transpose() * x;
        let beta = if self.opts.zero_beta.is_empty() {
            &g * &self.s_inv
        } else {
            constrained_beta(&g, &self.gram, &th.u, &self.opts.zero_beta)?
        };
        let resid = &post.zeta - x * beta.transpose();
        let u = symmetrize(&(resid.transpose() * &resid / n as f64 + &post.k));

        let stats = ResidualStats::new(data, &self.moments, &post.zeta, &self.x1, th.v.mode());
        let r_eta = &stats.h * &self.sq_inv;
        let mut eta = th.eta.clone();
        let mut v = th.v.clone();
        for _ in 0..self.opts.inner_max_iter.max(1) {
            v = update_v(&stats, &eta, &self.sq, &post.k, &self.floor, &v, n)?;
            let new_eta = update_eta(&r_eta, &v);
            let change = (&new_eta - &eta).amax();
            let scale = new_eta.amax().max(f64::MIN_POSITIVE);
            eta = new_eta;
            if change <= self.opts.inner_tol * scale {
                break;
            }
        }
        Ok(Params { beta, eta, u, v })
    }
}

/// Run EM from the given state until the log-likelihood change over one
/// plain EM step drops below `opts.tol` (or `opts.rel_tol` relative to the
/// log-likelihood) or `opts.max_iter` M-steps have been taken.
///
/// With `opts.accelerate` the iterates are extrapolated SQUAREM-style
/// (Varadhan and Roland, 2008): two EM steps give a secant direction, the
/// extrapolated point is projected back onto the parameter space and
/// stabilised by one more EM step, and it is only kept if its likelihood
/// beats the second plain step. The trace therefore stays monotone.
pub fn fit_em_from(data: &ModelData, state: EmState, opts: &EmOptions) -> Result<FitResult> {
    let designs = &data.designs;
    let layout = data.layout().clone();
    let nc = layout.n_cells();
    let d = layout.n_edges();
    let p = designs.n_covariates();
    let q = designs.edge_covariates();
    let x = designs.covariates();
    let mode = state.v.mode();

    if state.beta.nrows() != nc || state.beta.ncols() != p || state.eta.nrows() != d || state.eta.ncols() != q {
        return Err(Error::Dimension("EM state does not match the data".into()));
    }
    if state.v.layout() != &layout || state.u.nrows() != nc || state.v_floor.len() != nc {
        return Err(Error::Dimension("EM state covariance does not match the data".into()));
    }
    for &(c, j) in &opts.zero_beta {
        if c >= nc || j >= p {
            return Err(Error::validation(format!("constraint ({c},{j}) out of range")));
        }
    }

    let gram = designs.gram();
    let s_inv = spd_inverse(&gram).ok_or_else(|| Error::RankDeficient {
        cell: "all".into(),
        detail: "covariate Gram matrix is singular".into(),
    })?;
    let x1 = x.columns(0, q).into_owned();
    let sq = x1.transpose() * &x1;
    let sq_inv = spd_inverse(&sq).ok_or_else(|| Error::RankDeficient {
        cell: "all".into(),
        detail: "edge-level covariates are collinear".into(),
    })?;
    let engine = Engine {
        data,
        opts,
        gram,
        s_inv,
        x1,
        sq,
        sq_inv,
        moments: Moments::new(data, q, mode == VMode::Block),
        floor: state.v_floor,
    };

    let mut th = Params {
        beta: state.beta,
        eta: state.eta,
        u: state.u,
        v: state.v,
    };
    for &(c, j) in &opts.zero_beta {
        th.beta[(c, j)] = 0.0;
    }

    let mut iterations = 0;
    let mut post = engine.e_step(&th)?;
    check_finite(post.loglik)?;
    let mut trace = vec![post.loglik];
    let mut converged = false;

    // One plain EM step from (th, post); reports whether it converged.
    let em_step = |th: &Params, post: &Posterior, iterations: &mut usize| -> Result<(Params, Posterior, bool)> {
        let next = engine.m_step(th, post)?;
        *iterations += 1;
        let np = engine.e_step(&next)?;
        check_finite(np.loglik)?;
        let change = np.loglik - post.loglik;
        if change < -(1e-6 + 1e-12 * post.loglik.abs()) {
            return Err(Error::LikelihoodDecrease {
                iteration: *iterations,
                decrease: -change,
            });
        }
        let done = change.abs() < opts.tol || change.abs() < opts.rel_tol * np.loglik.abs();
        Ok((next, np, done))
    };

    while iterations < opts.max_iter {
        let (th1, post1, done) = em_step(&th, &post, &mut iterations)?;
        trace.push(post1.loglik);
        th = th1;
        post = post1;
        if done {
            converged = true;
            break;
        }
        if !opts.accelerate || iterations + 2 > opts.max_iter {
            continue;
        }
        let th0 = th.clone();
        let (th1, post1, done) = em_step(&th, &post, &mut iterations)?;
        if done {
            trace.push(post1.loglik);
            th = th1;
            post = post1;
            converged = true;
            break;
        }
        let (th2, post2, done) = em_step(&th1, &post1, &mut iterations)?;
        if done {
            trace.push(post1.loglik);
            trace.push(post2.loglik);
            th = th2;
            post = post2;
            converged = true;
            break;
        }
        let r2 = th1.sq_dist(&th0);
        let v2 = second_difference_sq(&th0, &th1, &th2);
        let mut kept = false;
        if v2 > 0.0 && r2 > 0.0 {
            let alpha = -(r2 / v2).sqrt();
            if alpha < -1.0 {
                let w = [1.0 + 2.0 * alpha + alpha * alpha, -2.0 * alpha - 2.0 * alpha * alpha, alpha * alpha];
                if let Ok(ext) = Params::combine(w, [&th0, &th1, &th2], &engine.floor) {
                    if let Ok(pe) = engine.e_step(&ext) {
                        if pe.loglik.is_finite() && pe.loglik >= post2.loglik {
                            let (th3, post3, done) = em_step(&ext, &pe, &mut iterations)?;
                            trace.push(post1.loglik);
                            trace.push(post2.loglik);
                            trace.push(pe.loglik);
                            trace.push(post3.loglik);
                            th = th3;
                            post = post3;
                            kept = true;
                            if done {
                                converged = true;
                                break;
                            }
                        }
                    }
                }
            }
        }
        if !kept {
            trace.push(post1.loglik);
            trace.push(post2.loglik);
            th = th2;
            post = post2;
        }
    }

    let Params { beta, eta, u, v } = th;
    let coefficients = CoefficientSet::new(layout.clone(), beta, eta)?;
    Ok(FitResult {
        estimator: Estimator::Em,
        coefficients,
        u: RandomEffectCov::new(u)?,
        v,
        loglik_trace: trace,
        converged,
        iterations,
        posterior_gamma: post.gamma,
        partition: designs.shared_partition(),
        covariate_names: designs.covariate_names().to_vec(),
        gram: engine.gram,
        v_floor: engine.floor,
    })
}

fn check_finite(ll: f64) -> Result<()> {
    if ll.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical("log-likelihood is not finite".into()))
    }
}

/// `|θ2 − 2θ1 + θ0|²` over all parameters.
fn second_difference_sq(t0: &Params, t1: &Params, t2: &Params) -> f64 {
    let m = |a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>| (c - b * 2.0 + a).norm_squared();
    let mut s = m(&t0.beta, &t1.beta, &t2.beta) + m(&t0.eta, &t1.eta, &t2.eta) + m(&t0.u, &t1.u, &t2.u);
    s += match (&t0.v, &t1.v, &t2.v) {
        (
            ResidualCov::Block { blocks: a, .. },
            ResidualCov::Block { blocks: b, .. },
            ResidualCov::Block { blocks: c, .. },
        ) => (0..a.len()).map(|i| m(&a[i], &b[i], &c[i])).sum::<f64>(),
        (v0, v1, v2) => {
            let (a, b, c) = (diag_values(v0), diag_values(v1), diag_values(v2));
            (0..a.len()).map(|i| (c[i] - 2.0 * b[i] + a[i]).powi(2)).sum::<f64>()
        }
    };
    s
}

/// `β` maximising `Σ_m (ζ̄_m − B x_m)ᵀ U⁻¹ (ζ̄_m − B x_m)` with some entries
/// fixed at zero. A singular `U` gets a small ridge.
fn constrained_beta(
    g: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    u: &DMatrix<f64>,
    zero: &[(usize, usize)],
) -> Result<DMatrix<f64>> {
    let (nc, p) = g.shape();
    let w = spd_inverse(u).unwrap_or_else(|| {
        let ridge = 1e-8 * (u.trace() / nc as f64).max(f64::MIN_POSITIVE);
        spd_inverse(&(u + DMatrix::identity(nc, nc) * ridge))
            .unwrap_or_else(|| DMatrix::identity(nc, nc))
    });
    let free: Vec<(usize, usize)> = (0..p)
        .flat_map(|j| (0..nc).map(move |c| (c, j)))
        .filter(|cj| !zero.contains(cj))
        .collect();
    let wg = &w * g;
    let a = DMatrix::from_fn(free.len(), free.len(), |i, k| {
        let (c, j) = free[i];
        let (c2, j2) = free[k];
        gram[(j, j2)] * w[(c, c2)]
    });
    let b = DVector::from_fn(free.len(), |i, _| wg[(free[i].0, free[i].1)]);
    let sol = symmetrize(&a)
        .cholesky()
        .ok_or_else(|| Error::Numerical("constrained coefficient system is singular".into()))?
        .solve(&b);
    let mut beta = DMatrix::zeros(nc, p);
    for (i, &(c, j)) in free.iter().enumerate() {
        beta[(c, j)] = sol[i];
    }
    Ok(beta)
}

/// Moments of `e_m = y_m − Z ζ̄_m` needed by the `V`/`η` updates.
struct ResidualStats {
    /// `Σ_m e_me²`.
    e2: Vec<f64>,
    /// `Σ_m e_mc e_mcᵀ` (block mode).
    eblock: Vec<DMatrix<f64>>,
    /// `Σ_m e_me x_m,≤q` (`edges × q`).
    h: DMatrix<f64>,
    layout: crate::netdata::CellLayout,
}

impl ResidualStats {
    fn new(data: &ModelData, mom: &Moments, zeta: &DMatrix<f64>, x1: &DMatrix<f64>, mode: VMode) -> Self {
        let layout = data.layout().clone();
        let q = x1.ncols();
        let nc = layout.n_cells();
        // a_e = Σ_m ζ̄_mc y_me, z2_c = Σ_m ζ̄_mc², zx_c = Σ_m ζ̄_mc x_m,≤q
        let mut a = vec![0.0; layout.n_edges()];
        for (m, y) in data.responses().iter().enumerate() {
            for c in 0..nc {
                let z = zeta[(m, c)];
                for e in layout.range(c) {
                    a[e] += z * y[e];
                }
            }
        }
        let z2: Vec<f64> = (0..nc).map(|c| zeta.column(c).norm_squared()).collect();
        let zx = zeta.transpose() * x1;
        let mut e2 = vec![0.0; layout.n_edges()];
        let mut h = mom.hy.clone();
        for c in 0..nc {
            for e in layout.range(c) {
                e2[e] = mom.yy_diag[e] - 2.0 * a[e] + z2[c];
                for j in 0..q {
                    h[(e, j)] -= zx[(c, j)];
                }
            }
        }
        let eblock = if mode == VMode::Block {
            (0..nc)
                .map(|c| {
                    let r = layout.range(c);
                    let ac = DVector::from_column_slice(&a[r.clone()]);
                    let ones = DVector::from_element(r.len(), 1.0);
                    let mut eb = mom.yy_block[c].clone();
                    eb -= &ac * ones.transpose();
                    eb -= &ones * ac.transpose();
                    eb.add_scalar_mut(z2[c]);
                    eb
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            e2,
            eblock,
            h,
            layout,
        }
    }
}

/// Expected residual moment `(1/N) Σ (e − η x)(e − η x)ᵀ + K_cc 11ᵀ`,
/// projected onto the mode's class with eigenvalues clipped at the floor.
fn update_v(
    st: &ResidualStats,
    eta: &DMatrix<f64>,
    sq: &DMatrix<f64>,
    k: &DMatrix<f64>,
    floor: &[f64],
    current: &ResidualCov,
    n: usize,
) -> Result<ResidualCov> {
    let layout = &st.layout;
    let nf = n as f64;
    let q = eta.ncols();
    let diag_moment = |e: usize, c: usize| {
        let mut m = st.e2[e];
        for j in 0..q {
            m -= 2.0 * st.h[(e, j)] * eta[(e, j)];
            for l in 0..q {
                m += eta[(e, j)] * sq[(j, l)] * eta[(e, l)];
            }
        }
        m / nf + k[(c, c)]
    };
    match current.mode() {
        VMode::CellDiagonal => {
            let var = (0..layout.n_cells())
                .map(|c| {
                    let r = layout.range(c);
                    let s: f64 = r.clone().map(|e| diag_moment(e, c)).sum();
                    (s / r.len() as f64).max(floor[c])
                })
                .collect();
            ResidualCov::cell_diagonal(layout.clone(), var)
        }
        VMode::EdgeDiagonal => {
            let mut var = vec![0.0; layout.n_edges()];
            for c in 0..layout.n_cells() {
                for e in layout.range(c) {
                    var[e] = diag_moment(e, c).max(floor[c]);
                }
            }
            ResidualCov::edge_diagonal(layout.clone(), var)
        }
        VMode::Block => {
            let blocks = (0..layout.n_cells())
                .map(|c| {
                    let r = layout.range(c);
                    let ec = eta.rows(r.start, r.len());
                    let hc = st.h.rows(r.start, r.len());
                    let hct = hc * ec.transpose();
                    let mut m = &st.eblock[c] - &hct - hct.transpose() + ec * sq * ec.transpose();
                    m /= nf;
                    m.add_scalar_mut(k[(c, c)]);
                    clip_eigenvalues(&m, floor[c])
                })
                .collect();
            ResidualCov::block(layout.clone(), blocks)
        }
    }
}

/// `η_c = R_c − V_c 1 (1ᵀ V_c 1)⁻¹ 1ᵀ R_c`: the `V`-weighted projection of the
/// unconstrained deviations onto the sum-to-zero subspace.
fn update_eta(r_eta: &DMatrix<f64>, v: &ResidualCov) -> DMatrix<f64> {
    let layout = v.layout();
    let q = r_eta.ncols();
    let mut eta = r_eta.clone();
    for c in 0..layout.n_cells() {
        let r = layout.range(c);
        let v1: Vec<f64> = match v {
            ResidualCov::Block { blocks, .. } => blocks[c].column_sum().iter().cloned().collect(),
            _ => r.clone().map(|e| v.edge_variance(e)).collect(),
        };
        let total: f64 = v1.iter().sum();
        for j in 0..q {
            let s: f64 = r.clone().map(|e| r_eta[(e, j)]).sum();
            for (i, e) in r.clone().enumerate() {
                eta[(e, j)] -= v1[i] * s / total;
            }
        }
    }
    eta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estim::testutil::random_data;
    use crate::estim::{fit_ols, marginal_loglik};
    use crate::netdata::{build_partition, DesignMatrices, MeanModel};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::sync::Arc;

    #[test]
    fn single_edge_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let norm = Normal::new(1.5, 0.7).unwrap();
        let ys: Vec<f64> = (0..40).map(|_| norm.sample(&mut rng)).collect();
        let part = Arc::new(build_partition(&[1, 1]).unwrap());
        let cov = DMatrix::from_element(ys.len(), 1, 1.0);
        let designs = DesignMatrices::new(part, cov, vec!["1".into()], MeanModel::EdgeEffects).unwrap();
        let data = ModelData::new(designs, ys.iter().map(|&y| vec![y]).collect()).unwrap();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        for mode in [VMode::CellDiagonal, VMode::EdgeDiagonal, VMode::Block] {
            // The likelihood is flat at the optimum, so a stopping rule on its
            // change only pins the variance to about the square root of the
            // tolerance. Run a fixed budget instead.
            let opts = EmOptions { tol: 0.0, rel_tol: 0.0, max_iter: 300, ..Default::default() };
            let fit = fit_em(&data, mode, &opts).unwrap();
            assert_relative_eq!(fit.coefficients.cell_effect(0, 0), mean, max_relative = 1e-10);
            let total = fit.u.matrix()[(0, 0)] + fit.v.edge_variance(0);
            assert_relative_eq!(total, var, max_relative = 1e-10);
        }
    }

    #[test]
    fn trace_is_monotone() {
        for (seed, mode) in [(1, VMode::CellDiagonal), (2, VMode::EdgeDiagonal), (3, VMode::Block)] {
            // No single-edge cells (U_cc and V_c only identified through
            // their sum) and more subjects than edges (block V otherwise
            // degenerates towards the floor).
            let data = random_data(seed, &[1, 1, 1, 2, 2, 2, 3, 3, 3], 60, 2, MeanModel::EdgeEffects);
            let fit = fit_em(&data, mode, &EmOptions::default()).unwrap();
            assert!(fit.converged, "{mode}");
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-6);
            }
            let ll = marginal_loglik(&data, &fit.coefficients, &fit.sigma().unwrap()).unwrap();
            assert!((ll - fit.loglik().unwrap()).abs() < 1e-6 * ll.abs());
        }
    }

    #[test]
    fn acceleration_reaches_the_same_maximum() {
        let data = random_data(8, &[1, 1, 1, 2, 2, 2, 2], 40, 2, MeanModel::EdgeEffects);
        for mode in [VMode::CellDiagonal, VMode::EdgeDiagonal, VMode::Block] {
            // No block floor: once it binds, EM creeps along the weakly
            // identified U_cc / V_c 11ᵀ direction and a 1e-10 stop is out of reach.
            let tight = |accelerate| EmOptions { tol: 1e-10, rel_tol: 0.0, max_iter: 20000, accelerate, block_floor: 0.0, ..Default::default() };
            let plain = fit_em(&data, mode, &tight(false)).unwrap();
            let fast = fit_em(&data, mode, &tight(true)).unwrap();
            assert!(plain.converged && fast.converged);
            assert!(fast.iterations <= plain.iterations, "{mode}");
            assert!((plain.loglik().unwrap() - fast.loglik().unwrap()).abs() < 1e-5, "{mode}");
            for w in fast.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-6);
            }
        }
    }

    #[test]
    fn full_model_keeps_ols_coefficients() {
        let data = random_data(4, &[1, 1, 1, 2, 2], 25, 2, MeanModel::EdgeEffects);
        let ols = fit_ols(&data).unwrap().coefficients;
        let em = fit_em(&data, VMode::Block, &EmOptions::default()).unwrap().coefficients;
        for (a, b) in em.theta().iter().zip(ols.theta().iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reduced_model_is_monotone_and_stationary() {
        let data = random_data(6, &[1, 1, 1, 2, 2, 2], 30, 2, MeanModel::CellEffects);
        for mode in [VMode::CellDiagonal, VMode::EdgeDiagonal] {
            let opts = EmOptions { tol: 1e-9, rel_tol: 0.0, ..Default::default() };
            let fit = fit_em(&data, mode, &opts).unwrap();
            assert!(fit.converged);
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-6);
            }
            // One more iteration from the fixed point barely moves anything.
            let again = fit_em_from(
                &data,
                EmState::from_fit(&fit).unwrap(),
                &EmOptions { max_iter: 1, tol: 0.0, rel_tol: 0.0, ..opts.clone() },
            )
            .unwrap();
            let db = (again.coefficients.beta() - fit.coefficients.beta()).amax();
            let du = (again.u.matrix() - fit.u.matrix()).amax();
            assert!(db < 1e-5 && du < 1e-5, "{db} {du}");
        }
    }

    #[test]
    fn zero_constraints_hold() {
        let data = random_data(8, &[1, 1, 1, 2, 2, 2], 30, 2, MeanModel::EdgeEffects);
        let opts = EmOptions {
            zero_beta: vec![(0, 1), (2, 1)],
            ..Default::default()
        };
        let fit = fit_em(&data, VMode::CellDiagonal, &opts).unwrap();
        assert_eq!(fit.coefficients.cell_effect(0, 1), 0.0);
        assert_eq!(fit.coefficients.cell_effect(2, 1), 0.0);
        assert_ne!(fit.coefficients.cell_effect(1, 1), 0.0);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6);
        }
    }

    #[test]
    fn deviations_sum_to_zero_after_fit() {
        let data = random_data(10, &[1, 1, 1, 2, 2, 2], 20, 2, MeanModel::CellEffects);
        let fit = fit_em(&data, VMode::EdgeDiagonal, &EmOptions::default()).unwrap();
        let layout = data.layout();
        for c in 0..layout.n_cells() {
            let s: f64 = layout.range(c).map(|e| fit.coefficients.eta()[(e, 0)]).sum();
            assert!(s.abs() < 1e-10);
        }
    }
}
