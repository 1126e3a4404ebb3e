//! Data-driven refinement of the node partition.
//!
//! Two searches are offered. The k-means variant clusters nodes so that the
//! OLS edge-level effects `x_ij = β̂_cell + η̂_ij` are as homogeneous as
//! possible within each cell. The likelihood search moves single nodes
//! between communities to raise the marginal likelihood of the model with
//! cell-level covariate effects only, refitting by EM after every sweep.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covstruct::{ResidualCov, VMode};
use crate::error::{Error, Result};
use crate::estim::{em_init, fit_em_from, fit_ols, EmOptions, EmState, FitResult};
use crate::linalg::low_rank_factor;
use crate::netdata::{CellPartition, MeanModel, ModelData};

/// Per node pair OLS covariate effects, `x_ij = β̂_cell,j + η̂_ij,j` for the
/// selected covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEffectField {
    n: usize,
    dim: usize,
    /// Pair-major: `values[pair * dim + k]`.
    values: Vec<f64>,
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

impl EdgeEffectField {
    /// `f(i, j)` for every pair `i < j`; each call returns `dim` values.
    pub fn from_fn(n: usize, dim: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        if n < 2 || dim == 0 {
            return Err(Error::validation("a field needs at least 2 nodes and 1 covariate"));
        }
        let mut values = Vec::with_capacity(n * (n - 1) / 2 * dim);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(i, j);
                if v.len() != dim {
                    return Err(Error::Dimension(format!("pair ({i},{j}) has {} values, expected {dim}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::validation(format!("pair ({i},{j}) has a non-finite effect")));
                }
                values.extend(v);
            }
        }
        Ok(Self { n, dim, values })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Effect vector of the pair `{i, j}` (`i ≠ j`).
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let p = pair_index(self.n, i, j);
        &self.values[p * self.dim..(p + 1) * self.dim]
    }

    fn grand_mean(&self) -> Vec<f64> {
        let pairs = self.values.len() / self.dim;
        let mut m = vec![0.0; self.dim];
        for p in 0..pairs {
            for k in 0..self.dim {
                m[k] += self.values[p * self.dim + k];
            }
        }
        m.iter_mut().for_each(|v| *v /= pairs as f64);
        m
    }
}

/// OLS edge-level effects of the given covariates. Under OLS these are the
/// per-edge regression slopes, so the field does not depend on the
/// partition the data happen to carry.
pub fn edge_effect_field(data: &ModelData, covariates: &[usize]) -> Result<EdgeEffectField> {
    let p = data.designs.n_covariates();
    if covariates.is_empty() || covariates.iter().any(|&j| j >= p) {
        return Err(Error::validation("covariate index out of range"));
    }
    let data = if data.designs.mean_model() == MeanModel::EdgeEffects {
        data.clone()
    } else {
        data.with_mean_model(MeanModel::EdgeEffects)?
    };
    let fit = fit_ols(&data)?;
    let part = data.partition();
    EdgeEffectField::from_fn(part.n_nodes(), covariates.len(), |i, j| {
        let e = part.edge_index(i, j).expect("complete edge set");
        covariates.iter().map(|&k| fit.coefficients.edge_effect(e, k)).collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineMethod {
    KMeans,
    Likelihood,
}

impl fmt::Display for RefineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefineMethod::KMeans => "kmeans",
            RefineMethod::Likelihood => "likelihood",
        })
    }
}

impl FromStr for RefineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(RefineMethod::KMeans),
            "likelihood" | "lik" => Ok(RefineMethod::Likelihood),
            _ => Err(Error::validation(format!("unknown refinement method '{s}'"))),
        }
    }
}

/// Outcome of a refinement.
///
/// `objective` is the within-cell sum of squares for k-means (lower is
/// better) and the marginal log-likelihood for the likelihood search
/// (higher is better); `trace` follows the winning run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub method: RefineMethod,
    /// 0-based community index per node.
    pub labels: Vec<usize>,
    pub community_names: Vec<String>,
    pub objective: f64,
    pub n_init: usize,
    /// Seed of the winning restart.
    pub best_init: u64,
    pub trace: Vec<f64>,
    /// Whether the winning run reached a fixed point.
    pub converged: bool,
}

impl RefinementResult {
    pub fn partition(&self) -> Result<CellPartition> {
        CellPartition::from_indices(self.labels.clone(), self.community_names.clone())
    }

    /// `key: value` pairs for a partition file header.
    pub fn provenance(&self) -> Vec<(String, String)> {
        vec![
            ("method".into(), self.method.to_string()),
            ("seed".into(), self.best_init.to_string()),
            ("restarts".into(), self.n_init.to_string()),
            ("objective".into(), format!("{}", self.objective)),
            ("converged".into(), self.converged.to_string()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            n_init: 100,
            max_iter: 300,
            seed: 1,
        }
    }
}

/// Which nodes may move and where to.
struct Moves<'a> {
    /// Labels of every node; frozen nodes keep theirs.
    base: &'a [usize],
    movable: &'a [usize],
    /// Labels a movable node may take.
    choices: &'a [usize],
    k: usize,
}

/// Cell centres for the current labels. Cells without edges get the grand
/// mean so that a node can still be scored against them.
fn centres(field: &EdgeEffectField, labels: &[usize], k: usize, fallback: &[f64]) -> Vec<f64> {
    let dim = field.dim;
    let mut sum = vec![0.0; k * k * dim];
    let mut count = vec![0usize; k * k];
    for i in 0..field.n {
        for j in (i + 1)..field.n {
            let (a, b) = (labels[i].min(labels[j]), labels[i].max(labels[j]));
            let x = field.get(i, j);
            count[a * k + b] += 1;
            for t in 0..dim {
                sum[(a * k + b) * dim + t] += x[t];
            }
        }
    }
    let mut out = vec![0.0; k * k * dim];
    for a in 0..k {
        for b in a..k {
            for t in 0..dim {
                let v = if count[a * k + b] > 0 {
                    sum[(a * k + b) * dim + t] / count[a * k + b] as f64
                } else {
                    fallback[t]
                };
                out[(a * k + b) * dim + t] = v;
                out[(b * k + a) * dim + t] = v;
            }
        }
    }
    out
}

fn sq_dist(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Cost of every label for node `i`: `Σ_j ‖x_ij − β^{a, c_j}‖²`.
fn node_costs(field: &EdgeEffectField, labels: &[usize], ctr: &[f64], k: usize, i: usize, out: &mut [f64]) {
    let dim = field.dim;
    out.iter_mut().for_each(|v| *v = 0.0);
    // Per-label sums of x and ‖x‖² over i's neighbours.
    let mut cnt = vec![0usize; k];
    let mut s = vec![0.0; k * dim];
    let mut ss = 0.0;
    for j in 0..field.n {
        if j == i {
            continue;
        }
        let x = field.get(i, j);
        let b = labels[j];
        cnt[b] += 1;
        for t in 0..dim {
            s[b * dim + t] += x[t];
            ss += x[t] * x[t];
        }
    }
    for (a, o) in out.iter_mut().enumerate() {
        let mut cost = ss;
        for b in 0..k {
            if cnt[b] == 0 {
                continue;
            }
            let c = &ctr[(a * k + b) * dim..(a * k + b + 1) * dim];
            for t in 0..dim {
                cost += cnt[b] as f64 * c[t] * c[t] - 2.0 * c[t] * s[b * dim + t];
            }
        }
        *o = cost;
    }
}

/// Within-cell sum of squares of `labels` about the cell means.
pub fn kmeans_objective(field: &EdgeEffectField, labels: &[usize], k: usize) -> f64 {
    let ctr = centres(field, labels, k, &field.grand_mean());
    objective_at(field, labels, &ctr, k)
}

fn objective_at(field: &EdgeEffectField, labels: &[usize], ctr: &[f64], k: usize) -> f64 {
    let dim = field.dim;
    let mut total = 0.0;
    for i in 0..field.n {
        for j in (i + 1)..field.n {
            let cell = labels[i] * k + labels[j];
            total += sq_dist(field.get(i, j), &ctr[cell * dim..(cell + 1) * dim]);
        }
    }
    total
}

struct Run {
    labels: Vec<usize>,
    objective: f64,
    trace: Vec<f64>,
    converged: bool,
}

fn kmeans_run(field: &EdgeEffectField, mv: &Moves, seed: u64, max_iter: usize) -> Run {
    let k = mv.k;
    let fallback = field.grand_mean();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = mv.base.to_vec();
    // Random start using every choice at least once.
    let mut order = mv.movable.to_vec();
    order.shuffle(&mut rng);
    for (t, &i) in order.iter().enumerate() {
        labels[i] = if t < mv.choices.len() {
            mv.choices[t]
        } else {
            mv.choices[rng.random_range(0..mv.choices.len())]
        };
    }
    let mut ctr = centres(field, &labels, k, &fallback);
    let mut trace = vec![objective_at(field, &labels, &ctr, k)];
    let mut costs = vec![0.0; k];
    let mut converged = false;
    for _ in 0..max_iter {
        let mut changed = false;
        for &i in mv.movable {
            node_costs(field, &labels, &ctr, k, i, &mut costs);
            let cur = labels[i];
            let mut best = cur;
            for &a in mv.choices {
                if costs[a] < costs[best] || (costs[a] == costs[best] && best != cur && a < best) {
                    best = a;
                }
            }
            if best != cur {
                labels[i] = best;
                changed = true;
            }
        }
        repair_empty(field, &mut labels, &ctr, mv);
        if !changed {
            converged = true;
            break;
        }
        ctr = centres(field, &labels, k, &fallback);
        trace.push(objective_at(field, &labels, &ctr, k));
    }
    let objective = *trace.last().expect("initial objective");
    Run {
        labels,
        objective,
        trace,
        converged,
    }
}

/// Give each empty label the movable node that fits its current cluster
/// worst, taken from a cluster that keeps at least one member.
fn repair_empty(field: &EdgeEffectField, labels: &mut [usize], ctr: &[f64], mv: &Moves) {
    let k = mv.k;
    let mut costs = vec![0.0; k];
    loop {
        let mut size = vec![0usize; k];
        for &l in labels.iter() {
            size[l] += 1;
        }
        let Some(&empty) = mv.choices.iter().find(|&&a| size[a] == 0) else {
            return;
        };
        let mut worst: Option<(usize, f64)> = None;
        for &i in mv.movable {
            if size[labels[i]] < 2 {
                continue;
            }
            node_costs(field, labels, ctr, k, i, &mut costs);
            let c = costs[labels[i]];
            if worst.is_none_or(|(_, w)| c > w) {
                worst = Some((i, c));
            }
        }
        match worst {
            Some((i, _)) => labels[i] = empty,
            None => return,
        }
    }
}

fn best_of(runs: Vec<Run>, seeds: &[u64]) -> (Run, u64) {
    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.objective < runs[best].objective {
            best = r;
        }
    }
    let seed = seeds[best];
    (runs.into_iter().nth(best).expect("at least one run"), seed)
}

/// Partition all nodes of `field` into `k` communities by the k-means
/// variant, keeping the best of `opts.n_init` random starts. Restart `r`
/// uses seed `opts.seed + r`.
pub fn refine_kmeans(field: &EdgeEffectField, k: usize, opts: &KMeansOptions) -> Result<RefinementResult> {
    if k == 0 || k > field.n {
        return Err(Error::validation(format!("cannot form {k} communities from {} nodes", field.n)));
    }
    if opts.n_init == 0 {
        return Err(Error::validation("at least one restart is needed"));
    }
    let base = vec![0; field.n];
    let movable: Vec<usize> = (0..field.n).collect();
    let choices: Vec<usize> = (0..k).collect();
    let mv = Moves {
        base: &base,
        movable: &movable,
        choices: &choices,
        k,
    };
    let seeds: Vec<u64> = (0..opts.n_init as u64).map(|r| opts.seed.wrapping_add(r)).collect();
    let runs: Vec<Run> = seeds.par_iter().map(|&s| kmeans_run(field, &mv, s, opts.max_iter)).collect();
    let (run, best_init) = best_of(runs, &seeds);
    Ok(RefinementResult {
        method: RefineMethod::KMeans,
        labels: canonical_labels(&run.labels, k),
        community_names: (1..=k).map(|a| a.to_string()).collect(),
        objective: run.objective,
        n_init: opts.n_init,
        best_init,
        trace: run.trace,
        converged: run.converged,
    })
}

/// Relabel so communities are numbered by first appearance.
fn canonical_labels(labels: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LikelihoodOptions {
    /// Diagonal `V` mode used for the fits.
    pub v_mode: VMode,
    pub em: EmOptions,
    pub max_sweeps: usize,
    /// Moves that would leave a community smaller than this are skipped.
    pub min_size: usize,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self {
            v_mode: VMode::CellDiagonal,
            em: EmOptions::default(),
            max_sweeps: 50,
            min_size: 2,
        }
    }
}

/// Fixed parameters of the cell-effects model in partition-free form.
struct NodeModel {
    k: usize,
    /// Edge intercepts `μ_ij` by pair.
    mu: Vec<f64>,
    /// Cell effects of covariates `1..p` by community pair (`k × k × (p−1)`).
    b: Vec<f64>,
    /// `L` with `U = L Lᵀ`, rows indexed by community-pair cell.
    l: DMatrix<f64>,
    /// Residual variance per pair (edge-diagonal) or per cell.
    v_pair: Option<Vec<f64>>,
    v_cell: Vec<f64>,
    /// `k × k` lookup of the cell index of a community pair.
    cell_of: Vec<usize>,
}

/// Everything that stays fixed during a likelihood search.
struct Problem<'a> {
    data: &'a ModelData,
    n: usize,
    /// Responses by pair, subject-major within a pair.
    y: Vec<f64>,
    n_subjects: usize,
    /// Covariates `1..p` per subject.
    x: DMatrix<f64>,
    names: Vec<String>,
}

impl<'a> Problem<'a> {
    fn new(data: &'a ModelData, names: Vec<String>, opts: &'a LikelihoodOptions) -> Result<Self> {
        if !opts.v_mode.is_diagonal() {
            return Err(Error::validation("the likelihood search supports diagonal V only"));
        }
        let part = data.partition();
        let n = part.n_nodes();
        let ns = data.n_subjects();
        let mut y = vec![0.0; n * (n - 1) / 2 * ns];
        for i in 0..n {
            for j in (i + 1)..n {
                let e = part.edge_index(i, j).expect("complete edge set");
                let p = pair_index(n, i, j);
                for (m, ym) in data.responses().iter().enumerate() {
                    y[p * ns + m] = ym[e];
                }
            }
        }
        let cov = data.designs.covariates();
        let x = cov.columns(1, cov.ncols() - 1).into_owned();
        Ok(Self {
            data,
            n,
            y,
            n_subjects: ns,
            x,
            names,
        })
    }

    fn model_data(&self, labels: &[usize]) -> Result<ModelData> {
        let part = Arc::new(CellPartition::from_indices(labels.to_vec(), self.names.clone())?);
        self.data.repartition(part)?.with_mean_model(MeanModel::CellEffects)
    }

    fn node_model(&self, fit: &FitResult) -> NodeModel {
        let part = &fit.partition;
        let k = part.n_communities();
        let p1 = self.x.ncols();
        let mut cell_of = vec![0; k * k];
        for a in 0..k {
            for b in 0..k {
                cell_of[a * k + b] = part.cell_index(a, b).expect("every cell present");
            }
        }
        let mut mu = vec![0.0; self.n * (self.n - 1) / 2];
        for (e, &(i, j)) in part.edges().iter().enumerate() {
            mu[pair_index(self.n, i, j)] = fit.coefficients.edge_effect(e, 0);
        }
        let mut b = vec![0.0; k * k * p1];
        for a in 0..k {
            for c in 0..k {
                for t in 0..p1 {
                    b[(a * k + c) * p1 + t] = fit.coefficients.cell_effect(cell_of[a * k + c], t + 1);
                }
            }
        }
        let nc = part.n_cells();
        let (v_pair, v_cell) = match &fit.v {
            ResidualCov::EdgeDiagonal { var, .. } => {
                let mut vp = vec![0.0; mu.len()];
                for (e, &(i, j)) in part.edges().iter().enumerate() {
                    vp[pair_index(self.n, i, j)] = var[e];
                }
                (Some(vp), vec![0.0; nc])
            }
            ResidualCov::CellDiagonal { var, .. } => (None, var.clone()),
            ResidualCov::Block { .. } => unreachable!("diagonal modes only"),
        };
        NodeModel {
            k,
            mu,
            b,
            l: low_rank_factor(fit.u.matrix(), 1e-12),
            v_pair,
            v_cell,
            cell_of,
        }
    }

    /// EM state on the partition `labels` reproducing the node model exactly.
    fn warm_state(&self, nm: &NodeModel, labels: &[usize], floor: &[f64]) -> Result<(ModelData, EmState)> {
        let data = self.model_data(labels)?;
        let part = data.partition();
        let layout = part.layout();
        let nc = part.n_cells();
        let p1 = self.x.ncols();
        let mut beta = DMatrix::zeros(nc, p1 + 1);
        let mut eta = DMatrix::zeros(layout.n_edges(), 1);
        for c in 0..nc {
            let r = layout.range(c);
            let mus: Vec<f64> = r.clone().map(|e| {
                let (i, j) = part.edges()[e];
                nm.mu[pair_index(self.n, i, j)]
            }).collect();
            let mean = mus.iter().sum::<f64>() / mus.len() as f64;
            beta[(c, 0)] = mean;
            for (e, m) in r.zip(mus) {
                eta[(e, 0)] = m - mean;
            }
            let cell = part.cells()[c];
            for t in 0..p1 {
                beta[(c, t + 1)] = nm.b[(cell.a * nm.k + cell.b) * p1 + t];
            }
        }
        let v = match &nm.v_pair {
            Some(vp) => ResidualCov::edge_diagonal(
                layout.clone(),
                part.edges().iter().map(|&(i, j)| vp[pair_index(self.n, i, j)]).collect(),
            )?,
            None => ResidualCov::cell_diagonal(layout.clone(), nm.v_cell.clone())?,
        };
        let state = EmState {
            beta,
            eta,
            u: &nm.l * nm.l.transpose(),
            v,
            v_floor: floor.to_vec(),
        };
        Ok((data, state))
    }
}

/// Sufficient statistics of the marginal likelihood under fixed parameters.
#[derive(Clone)]
struct Stats {
    /// `Σ_e r_me² / V_e` per subject.
    a: Vec<f64>,
    /// `Σ_{e∈c} r_me / V_e`, `cells × subjects`.
    w: DMatrix<f64>,
    /// `Σ_{e∈c} 1 / V_e`.
    d: Vec<f64>,
    log_v: f64,
}

impl Problem<'_> {
    fn residual_var(&self, nm: &NodeModel, pair: usize, cell: usize) -> f64 {
        match &nm.v_pair {
            Some(vp) => vp[pair],
            None => nm.v_cell[cell],
        }
    }

    /// Add (`sign = 1`) or remove (`sign = −1`) the pair `{i, j}` as a member
    /// of community pair `(a, b)`.
    #[allow(clippy::too_many_arguments)]
    fn account(&self, nm: &NodeModel, st: &mut Stats, i: usize, j: usize, a: usize, b: usize, sign: f64) {
        let pair = pair_index(self.n, i, j);
        let cell = nm.cell_of[a * nm.k + b];
        let v = self.residual_var(nm, pair, cell);
        let p1 = self.x.ncols();
        let coef = &nm.b[(a * nm.k + b) * p1..(a * nm.k + b + 1) * p1];
        let ys = &self.y[pair * self.n_subjects..(pair + 1) * self.n_subjects];
        for m in 0..self.n_subjects {
            let mut r = ys[m] - nm.mu[pair];
            for t in 0..p1 {
                r -= self.x[(m, t)] * coef[t];
            }
            st.a[m] += sign * r * r / v;
            st.w[(cell, m)] += sign * r / v;
        }
        st.d[cell] += sign / v;
        st.log_v += sign * v.ln();
    }

    fn stats(&self, nm: &NodeModel, labels: &[usize]) -> Stats {
        let nc = nm.k * (nm.k + 1) / 2;
        let mut st = Stats {
            a: vec![0.0; self.n_subjects],
            w: DMatrix::zeros(nc, self.n_subjects),
            d: vec![0.0; nc],
            log_v: 0.0,
        };
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                self.account(nm, &mut st, i, j, labels[i], labels[j], 1.0);
            }
        }
        st
    }

    fn loglik(&self, nm: &NodeModel, st: &Stats) -> f64 {
        let ns = self.n_subjects as f64;
        let d_edges = (self.n * (self.n - 1) / 2) as f64;
        let r = nm.l.ncols();
        let mut quad: f64 = st.a.iter().sum();
        let mut logdet_a = 0.0;
        if r > 0 {
            let dl = DMatrix::from_fn(nm.l.nrows(), r, |c, t| st.d[c] * nm.l[(c, t)]);
            let inner = DMatrix::identity(r, r) + nm.l.transpose() * dl;
            let Some(chol) = inner.cholesky() else {
                return f64::NEG_INFINITY;
            };
            logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let g = nm.l.transpose() * &st.w;
            let sol = chol.solve(&g);
            quad -= g.component_mul(&sol).sum();
        }
        -0.5 * (ns * (d_edges * (2.0 * std::f64::consts::PI).ln() + st.log_v + logdet_a) + quad)
    }

    /// Log-likelihood after moving node `i` from its label to `to`.
    fn move_loglik(&self, nm: &NodeModel, st: &Stats, labels: &[usize], i: usize, to: usize) -> f64 {
        let mut s = st.clone();
        let from = labels[i];
        for j in 0..self.n {
            if j == i {
                continue;
            }
            self.account(nm, &mut s, i, j, from, labels[j], -1.0);
            self.account(nm, &mut s, i, j, to, labels[j], 1.0);
        }
        self.loglik(nm, &s)
    }
}

/// Node moves that maximise the likelihood of the cell-effects model.
///
/// Each sweep visits movable nodes in index order and moves a node to the
/// allowed label with the highest likelihood, holding all parameters at
/// their last EM estimates. After a sweep with moves, EM is restarted from
/// those same parameters on the new partition, so the log-likelihood never
/// decreases. The search stops after a sweep without moves.
pub fn refine_likelihood(
    data: &ModelData,
    labels: &[usize],
    names: &[String],
    movable: Option<&[usize]>,
    choices: Option<&[usize]>,
    opts: &LikelihoodOptions,
) -> Result<RefinementResult> {
    let k = names.len();
    let n = data.partition().n_nodes();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} nodes", labels.len())));
    }
    if data.designs.n_covariates() < 2 {
        return Err(Error::validation("the likelihood search needs a covariate besides the intercept"));
    }
    let mut size = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::validation(format!("label {l} out of range")));
        }
        size[l] += 1;
    }
    if size.iter().any(|&s| s < opts.min_size.max(2)) {
        return Err(Error::validation(format!(
            "every community needs at least {} nodes",
            opts.min_size.max(2)
        )));
    }
    let all_nodes: Vec<usize> = (0..n).collect();
    let all_labels: Vec<usize> = (0..k).collect();
    let movable = movable.unwrap_or(&all_nodes);
    let choices = choices.unwrap_or(&all_labels);

    let problem = Problem::new(data, names.to_vec(), opts)?;
    let mut labels = labels.to_vec();
    let first = problem.model_data(&labels)?;
    let init = em_init(&first, opts.v_mode, &opts.em)?;
    let floor = init.v_floor.clone();
    let mut fit = fit_em_from(&first, init, &opts.em)?;
    let mut trace = vec![fit.loglik().expect("EM fit has a likelihood")];
    let mut converged = false;
    for _ in 0..opts.max_sweeps {
        let nm = problem.node_model(&fit);
        let mut st = problem.stats(&nm, &labels);
        let mut current = problem.loglik(&nm, &st);
        let mut moved = false;
        for &i in movable {
            let from = labels[i];
            if size[from] <= opts.min_size.max(2) {
                continue;
            }
            let mut best = (from, current);
            for &to in choices {
                if to == from {
                    continue;
                }
                let ll = problem.move_loglik(&nm, &st, &labels, i, to);
                if ll > best.1 + 1e-9 * current.abs().max(1.0) {
                    best = (to, ll);
                }
            }
            if best.0 != from {
                labels[i] = best.0;
                size[from] -= 1;
                size[best.0] += 1;
                st = problem.stats(&nm, &labels);
                current = problem.loglik(&nm, &st);
                moved = true;
            }
        }
        if !moved {
            converged = true;
            break;
        }
        let (data_k, state) = problem.warm_state(&nm, &labels, &floor)?;
        fit = fit_em_from(&data_k, state, &opts.em)?;
        trace.push(fit.loglik().expect("EM fit has a likelihood"));
    }
    Ok(RefinementResult {
        method: RefineMethod::Likelihood,
        labels,
        community_names: names.to_vec(),
        objective: *trace.last().expect("initial fit"),
        n_init: 1,
        best_init: 0,
        trace,
        converged,
    })
}

/// Split community `a` of `data`'s partition into `parts` communities named
/// `a.1 … a.parts`, leaving every other node where it is.
///
/// The k-means split uses the OLS field of covariate `covariate`; the
/// likelihood split starts from the k-means split and then moves nodes of
/// `a` between the new communities.
pub fn split_community(
    data: &ModelData,
    a: usize,
    parts: usize,
    method: RefineMethod,
    covariate: usize,
    kmeans: &KMeansOptions,
    likelihood: &LikelihoodOptions,
) -> Result<RefinementResult> {
    let part = data.partition();
    let k = part.n_communities();
    if a >= k {
        return Err(Error::validation(format!("community index {a} out of range")));
    }
    let members: Vec<usize> = (0..part.n_nodes()).filter(|&i| part.labels()[i] == a).collect();
    if parts == 0 || parts > members.len() {
        return Err(Error::validation(format!(
            "cannot split community '{}' of {} nodes into {parts} parts",
            part.community_names()[a],
            members.len()
        )));
    }
    let field = edge_effect_field(data, &[covariate])?;
    if parts == 1 {
        let labels = part.labels().to_vec();
        let objective = kmeans_objective(&field, &labels, k);
        return Ok(RefinementResult {
            method,
            labels,
            community_names: part.community_names().to_vec(),
            objective,
            n_init: 0,
            best_init: kmeans.seed,
            trace: vec![objective],
            converged: true,
        });
    }
    let base_name = &part.community_names()[a];
    let mut names = part.community_names().to_vec();
    names[a] = format!("{base_name}.1");
    for t in 2..=parts {
        names.push(format!("{base_name}.{t}"));
    }
    let choices: Vec<usize> = std::iter::once(a).chain(k..k + parts - 1).collect();
    let k2 = names.len();
    let base = part.labels().to_vec();
    let mv = Moves {
        base: &base,
        movable: &members,
        choices: &choices,
        k: k2,
    };
    let seeds: Vec<u64> = (0..kmeans.n_init.max(1) as u64).map(|r| kmeans.seed.wrapping_add(r)).collect();
    let runs: Vec<Run> = seeds.par_iter().map(|&s| kmeans_run(&field, &mv, s, kmeans.max_iter)).collect();
    let (run, best_init) = best_of(runs, &seeds);
    let labels = order_split(run.labels, &members, &choices);
    match method {
        RefineMethod::KMeans => Ok(RefinementResult {
            method,
            labels,
            community_names: names,
            objective: run.objective,
            n_init: seeds.len(),
            best_init,
            trace: run.trace,
            converged: run.converged,
        }),
        RefineMethod::Likelihood => {
            let mut res = refine_likelihood(data, &labels, &names, Some(&members), Some(&choices), likelihood)?;
            res.best_init = best_init;
            res.n_init = seeds.len();
            Ok(res)
        }
    }
}

/// Number the new parts by their lowest node index.
fn order_split(mut labels: Vec<usize>, members: &[usize], choices: &[usize]) -> Vec<usize> {
    let mut first: Vec<(usize, usize)> = choices
        .iter()
        .filter_map(|&c| members.iter().find(|&&i| labels[i] == c).map(|&i| (i, c)))
        .collect();
    first.sort();
    let map: Vec<(usize, usize)> = first.iter().zip(choices).map(|(&(_, old), &new)| (old, new)).collect();
    for &i in members {
        if let Some(&(_, new)) = map.iter().find(|(old, _)| *old == labels[i]) {
            labels[i] = new;
        }
    }
    labels
}

/// Agreement of two labelings up to relabeling: the fraction of node pairs
/// on which both agree about being together or apart (Rand index).
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estim::marginal_loglik;
    use crate::simlab::{generate_data, synthetic_spec, SyntheticParams};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn random_field(seed: u64, n: usize, dim: usize) -> EdgeEffectField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EdgeEffectField::from_fn(n, dim, |_, _| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Minimum objective over all labelings using exactly `k` labels.
    fn exhaustive(field: &EdgeEffectField, k: usize) -> f64 {
        let n = field.n_nodes();
        let mut labels = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            let mut used = vec![false; k];
            labels.iter().for_each(|&l| used[l] = true);
            if used.iter().all(|&u| u) {
                best = best.min(kmeans_objective(field, &labels, k));
            }
            let mut t = 0;
            loop {
                if t == n {
                    return best;
                }
                labels[t] += 1;
                if labels[t] < k {
                    break;
                }
                labels[t] = 0;
                t += 1;
            }
        }
    }

    #[test]
    fn planted_blocks_are_recovered_exactly() {
        let truth = [0, 0, 0, 0, 1, 1, 1, 1];
        let field = EdgeEffectField::from_fn(8, 1, |i, j| vec![if truth[i] == truth[j] { 1.0 } else { -1.0 }]).unwrap();
        let res = refine_kmeans(&field, 2, &KMeansOptions::default()).unwrap();
        assert_eq!(res.objective, 0.0);
        assert_eq!(rand_index(&res.labels, &truth), 1.0);
    }

    #[test]
    fn single_community_objective_is_total_variance() {
        let field = random_field(3, 7, 2);
        let res = refine_kmeans(&field, 1, &KMeansOptions { n_init: 3, ..Default::default() }).unwrap();
        let mean = field.grand_mean();
        let mut total = 0.0;
        for i in 0..7 {
            for j in (i + 1)..7 {
                total += sq_dist(field.get(i, j), &mean);
            }
        }
        assert!((res.objective - total).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_search_on_small_instances() {
        for seed in 0..12 {
            let n = 5 + (seed as usize % 3);
            let k = 2 + (seed as usize % 2);
            let field = random_field(seed, n, 1);
            let want = exhaustive(&field, k);
            let got = refine_kmeans(&field, k, &KMeansOptions::default()).unwrap();
            assert!((got.objective - want).abs() < 1e-10, "seed {seed}: {} vs {want}", got.objective);
            assert!((kmeans_objective(&field, &got.labels, k) - got.objective).abs() < 1e-10);
        }
    }

    #[test]
    fn trace_decreases_and_runs_are_deterministic() {
        let field = random_field(9, 20, 2);
        let opts = KMeansOptions { n_init: 8, seed: 4, ..Default::default() };
        let a = refine_kmeans(&field, 3, &opts).unwrap();
        let b = refine_kmeans(&field, 3, &opts).unwrap();
        assert_eq!(a, b);
        for w in a.trace.windows(2) {
            assert!(w[1] < w[0] + 1e-12);
        }
        assert!(a.converged);
        let mut used = vec![false; 3];
        a.labels.iter().for_each(|&l| used[l] = true);
        assert!(used.iter().all(|&u| u));
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Constant field: every start collapses, repair keeps all labels used.
        let field = EdgeEffectField::from_fn(6, 1, |_, _| vec![0.5]).unwrap();
        let res = refine_kmeans(&field, 3, &KMeansOptions { n_init: 5, ..Default::default() }).unwrap();
        let mut used = vec![false; 3];
        res.labels.iter().for_each(|&l| used[l] = true);
        assert!(used.iter().all(|&u| u));
        assert!(res.objective.abs() < 1e-24);
    }

    fn two_group_data(seed: u64, sizes: &[usize], effects: Vec<(usize, f64)>) -> ModelData {
        let params = SyntheticParams {
            effects,
            eta_sd: 0.0,
            v_mode: VMode::CellDiagonal,
            ..Default::default()
        };
        let spec = synthetic_spec(sizes, &[30, 30], &params, seed).unwrap();
        generate_data(&spec, seed + 1).unwrap()
    }

    #[test]
    fn field_is_partition_free_and_matches_group_difference() {
        let data = two_group_data(1, &[3, 3], vec![(0, 0.4)]);
        let field = edge_effect_field(&data, &[1]).unwrap();
        let part = data.partition();
        // Binary covariate: slope = difference of the group means.
        for i in 0..6 {
            for j in (i + 1)..6 {
                let e = part.edge_index(i, j).unwrap();
                let (mut s0, mut s1) = (0.0, 0.0);
                for (m, y) in data.responses().iter().enumerate() {
                    if m < 30 { s0 += y[e] } else { s1 += y[e] }
                }
                assert!((field.get(i, j)[0] - (s1 - s0) / 30.0).abs() < 1e-12);
            }
        }
        let other = Arc::new(CellPartition::from_indices(vec![1, 0, 1, 0, 0, 1], vec!["x".into(), "y".into()]).unwrap());
        let again = edge_effect_field(&data.repartition(other).unwrap(), &[1]).unwrap();
        for (a, b) in field.values.iter().zip(&again.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_nodes_and_trivial_split() {
        let data = two_group_data(2, &[6, 4], vec![(0, 0.5)]);
        let km = KMeansOptions { n_init: 10, ..Default::default() };
        let lik = LikelihoodOptions::default();
        let one = split_community(&data, 0, 1, RefineMethod::KMeans, 1, &km, &lik).unwrap();
        assert_eq!(one.labels, data.partition().labels());
        let two = split_community(&data, 0, 2, RefineMethod::KMeans, 1, &km, &lik).unwrap();
        for i in 6..10 {
            assert_eq!(two.labels[i], 1);
        }
        assert_eq!(two.community_names, vec!["1.1", "2", "1.2"]);
        assert!(two.labels[..6].iter().all(|&l| l == 0 || l == 2));
        assert!(split_community(&data, 0, 7, RefineMethod::KMeans, 1, &km, &lik).is_err());
    }

    #[test]
    fn likelihood_search_from_optimum_makes_no_moves() {
        // Strong, distinct effects in a planted 2-community model.
        let data = two_group_data(5, &[3, 3], vec![(0, 1.5), (1, -1.5), (2, 1.5)]);
        let names = vec!["1".to_string(), "2".to_string()];
        let labels = data.partition().labels().to_vec();
        let res = refine_likelihood(&data, &labels, &names, None, None, &LikelihoodOptions::default()).unwrap();
        assert_eq!(res.labels, labels);
        assert_eq!(res.trace.len(), 1);
        assert!(res.converged);
    }

    #[test]
    fn likelihood_search_repairs_a_swap_and_never_decreases() {
        let data = two_group_data(7, &[4, 4], vec![(0, 1.0), (1, -1.0), (2, 1.0)]);
        let names = vec!["1".to_string(), "2".to_string()];
        let truth = data.partition().labels().to_vec();
        let mut start = truth.clone();
        start.swap(0, 7);
        let res = refine_likelihood(&data, &start, &names, None, None, &LikelihoodOptions::default()).unwrap();
        assert_eq!(res.labels, truth);
        for w in res.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6);
        }
    }

    #[test]
    fn fixed_parameter_likelihood_matches_dense() {
        let data = two_group_data(11, &[3, 3], vec![(0, 0.3)]);
        let names = vec!["1".to_string(), "2".to_string()];
        let opts = LikelihoodOptions { v_mode: VMode::EdgeDiagonal, ..Default::default() };
        let problem = Problem::new(&data, names, &opts).unwrap();
        let labels = data.partition().labels().to_vec();
        let md = problem.model_data(&labels).unwrap();
        let fit = crate::estim::fit_em(&md, VMode::EdgeDiagonal, &opts.em).unwrap();
        let nm = problem.node_model(&fit);
        let st = problem.stats(&nm, &labels);
        let want = marginal_loglik(&md, &fit.coefficients, &fit.sigma().unwrap()).unwrap();
        assert!((problem.loglik(&nm, &st) - want).abs() < 1e-8 * want.abs());
        // A move scored incrementally equals the rebuilt statistics.
        let mut moved = labels.clone();
        moved[1] = 1;
        let inc = problem.move_loglik(&nm, &st, &labels, 1, 1);
        let full = problem.loglik(&nm, &problem.stats(&nm, &moved));
        assert!((inc - full).abs() < 1e-8 * full.abs());
        // And the warm start reproduces that value on the new partition.
        let (md2, state) = problem.warm_state(&nm, &moved, &fit.v_floor).unwrap();
        let coef = crate::estim::CoefficientSet::new(md2.layout().clone(), state.beta.clone(), state.eta.clone()).unwrap();
        let sigma = crate::covstruct::StructuredCovariance::new(state.v.clone(), crate::covstruct::RandomEffectCov::new(state.u.clone()).unwrap()).unwrap();
        let ll = marginal_loglik(&md2, &coef, &sigma).unwrap();
        assert!((ll - full).abs() < 1e-8 * full.abs());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn objective_is_equivariant(seed in 0u64..1000, k in 1usize..4) {
            let field = random_field(seed, 7, 2);
            let order = [3usize, 6, 0, 5, 1, 4, 2];
            let permuted = EdgeEffectField::from_fn(7, 2, |i, j| field.get(order[i], order[j]).to_vec()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..k)).collect();
            let moved: Vec<usize> = (0..7).map(|i| labels[order[i]]).collect();
            let renamed: Vec<usize> = labels.iter().map(|&l| (l + 1) % k).collect();
            let base = kmeans_objective(&field, &labels, k);
            prop_assert!((kmeans_objective(&permuted, &moved, k) - base).abs() < 1e-10);
            prop_assert!((kmeans_objective(&field, &renamed, k) - base).abs() < 1e-10);
        }

        #[test]
        fn search_never_beats_exhaustive(seed in 0u64..1000) {
            let field = random_field(seed, 6, 1);
            let got = refine_kmeans(&field, 2, &KMeansOptions { n_init: 5, seed, ..Default::default() }).unwrap();
            prop_assert!(got.objective >= exhaustive(&field, 2) - 1e-10);
            prop_assert!((kmeans_objective(&field, &got.labels, 2) - got.objective).abs() < 1e-10);
        }
    }
}
