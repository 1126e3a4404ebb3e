//! Synthetic populations and the two validation studies: repeated
//! simulation from a known truth (bias, standard-error calibration,
//! interval coverage) and random splits of a single group (null p-values).

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covstruct::{RandomEffectCov, ResidualCov, VMode};
use crate::error::{Error, Result};
use crate::estim::{fit_em, fit_em_from, fit_ols, read_fit, write_fit, CoefficientSet, EmOptions, EmState, Estimator, FitResult};
use crate::infer::{adjust, interval, normal_p_value, normal_quantile, Correction};
use crate::linalg::{low_rank_factor, symmetrize};
use crate::netdata::io::{read_grid, write_matrix};
use crate::netdata::{CellPartition, DesignMatrices, MeanModel, ModelData, NetworkPopulation, NodeSet};

/// A fully specified model to simulate from.
#[derive(Debug, Clone)]
pub struct GenerativeSpec {
    pub nodes: NodeSet,
    pub partition: Arc<CellPartition>,
    /// `N × p`, first column the intercept.
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub coefficients: CoefficientSet,
    pub u: RandomEffectCov,
    pub v: ResidualCov,
    /// Covariate whose cell effects the studies track.
    pub tested: usize,
    pub seed: u64,
}

impl GenerativeSpec {
    pub fn n_subjects(&self) -> usize {
        self.covariates.nrows()
    }

    /// Cells with a nonzero effect of the tested covariate.
    pub fn true_positives(&self) -> Vec<usize> {
        (0..self.partition.n_cells())
            .filter(|&c| self.coefficients.cell_effect(c, self.tested) != 0.0)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let layout = self.partition.layout();
        if self.coefficients.layout() != layout || self.v.layout() != layout || self.u.dim() != layout.n_cells() {
            return Err(Error::Dimension("spec components disagree on cells".into()));
        }
        if self.covariates.ncols() != self.coefficients.n_covariates()
            || self.covariate_names.len() != self.covariates.ncols()
        {
            return Err(Error::Dimension("spec covariates disagree with its coefficients".into()));
        }
        if self.tested >= self.covariates.ncols() {
            return Err(Error::validation("tested covariate out of range"));
        }
        if self.nodes.len() != self.partition.n_nodes() {
            return Err(Error::Dimension("spec nodes disagree with its partition".into()));
        }
        Ok(())
    }

    fn designs(&self) -> Result<DesignMatrices> {
        DesignMatrices::new(
            self.partition.clone(),
            self.covariates.clone(),
            self.covariate_names.clone(),
            MeanModel::EdgeEffects,
        )
    }
}

/// Draws `y_m = X_m α + Z γ_m + ε_m` with `γ_m ~ N(0, U)`, `ε_m ~ N(0, V)`.
struct Sampler {
    means: Vec<Vec<f64>>,
    lu: DMatrix<f64>,
    v_sd: Vec<f64>,
    v_blocks: Vec<DMatrix<f64>>,
}

impl Sampler {
    fn new(spec: &GenerativeSpec) -> Result<Self> {
        spec.validate()?;
        let means = (0..spec.n_subjects())
            .map(|m| {
                let x: Vec<f64> = spec.covariates.row(m).iter().cloned().collect();
                spec.coefficients.mean(&x)
            })
            .collect();
        let lu = low_rank_factor(spec.u.matrix(), 0.0);
        let (v_sd, v_blocks) = match &spec.v {
            ResidualCov::Block { blocks, .. } => {
                let f = blocks
                    .iter()
                    .map(|b| {
                        let eig = SymmetricEigen::new(symmetrize(b));
                        let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                        &eig.eigenvectors * DMatrix::from_diagonal(&s)
                    })
                    .collect();
                (Vec::new(), f)
            }
            v => (
                (0..v.layout().n_edges()).map(|e| v.edge_variance(e).sqrt()).collect(),
                Vec::new(),
            ),
        };
        Ok(Self { means, lu, v_sd, v_blocks })
    }

    fn draw(&self, m: usize, layout: &crate::netdata::CellLayout, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut y = self.means[m].clone();
        let z: Vec<f64> = (0..self.lu.ncols()).map(|_| StandardNormal.sample(rng)).collect();
        for c in 0..layout.n_cells() {
            let g: f64 = (0..self.lu.ncols()).map(|k| self.lu[(c, k)] * z[k]).sum();
            let r = layout.range(c);
            if self.v_blocks.is_empty() {
                for e in r {
                    let n: f64 = StandardNormal.sample(rng);
                    y[e] += g + self.v_sd[e] * n;
                }
            } else {
                let f = &self.v_blocks[c];
                let n: Vec<f64> = (0..f.ncols()).map(|_| StandardNormal.sample(rng)).collect();
                for (i, e) in r.enumerate() {
                    let eps: f64 = (0..f.ncols()).map(|k| f[(i, k)] * n[k]).sum();
                    y[e] += g + eps;
                }
            }
        }
        y
    }
}

/// One synthetic data set from `spec`, drawn with `seed`.
pub fn generate_data(spec: &GenerativeSpec, seed: u64) -> Result<ModelData> {
    let sampler = Sampler::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = spec.partition.layout();
    let ys = (0..spec.n_subjects()).map(|m| sampler.draw(m, layout, &mut rng)).collect();
    ModelData::new(spec.designs()?, ys)
}

/// Synthetic population from `spec` using the spec's own seed.
pub fn generate(spec: &GenerativeSpec) -> Result<NetworkPopulation> {
    let data = generate_data(spec, spec.seed)?;
    let ids: Vec<String> = (0..spec.n_subjects()).map(|m| format!("sub{:04}", m + 1)).collect();
    data.to_population(spec.nodes.clone(), &ids)
}

/// Knobs for [`synthetic_spec`].
#[derive(Debug, Clone)]
pub struct SyntheticParams {
    /// Intercept of cells inside a community.
    pub within: f64,
    /// Intercept of cells between communities.
    pub between: f64,
    /// `(cell, effect)` pairs for the group covariate; other cells get 0.
    pub effects: Vec<(usize, f64)>,
    /// Standard deviation of the edge deviations `η` (all covariates).
    pub eta_sd: f64,
    /// Diagonal of `U`.
    pub u_var: f64,
    /// Correlation between the random effects of different cells.
    pub u_corr: f64,
    /// Residual variance level.
    pub v_var: f64,
    /// Edge variances are drawn uniformly within `v_var · (1 ± v_spread)`
    /// (edge-diagonal truth only).
    pub v_spread: f64,
    pub v_mode: VMode,
    /// Within-cell residual correlation (block truth only).
    pub v_corr: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            within: 0.5,
            between: 0.2,
            effects: Vec::new(),
            eta_sd: 0.05,
            u_var: 0.03,
            u_corr: 0.4,
            v_var: 0.04,
            v_spread: 0.25,
            v_mode: VMode::EdgeDiagonal,
            v_corr: 0.0,
        }
    }
}

/// Block-model spec over communities of the given sizes. `groups` holds one
/// size (intercept only) or two (controls then cases, with a 0/1 group
/// covariate).
pub fn synthetic_spec(sizes: &[usize], groups: &[usize], params: &SyntheticParams, seed: u64) -> Result<GenerativeSpec> {
    if groups.is_empty() || groups.len() > 2 {
        return Err(Error::validation("one or two group sizes expected"));
    }
    let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &s)| std::iter::repeat_n(k, s)).collect();
    let names = (1..=sizes.len()).map(|k| k.to_string()).collect();
    let partition = Arc::new(CellPartition::from_indices(labels, names)?);
    let nodes = NodeSet::new((1..=partition.n_nodes()).map(|i| format!("n{i}")).collect())?;
    let layout = partition.layout().clone();
    let nc = layout.n_cells();
    let n: usize = groups.iter().sum();
    let p = groups.len();
    let covariates = DMatrix::from_fn(n, p, |m, j| if j == 0 || m >= groups[0] { 1.0 } else { 0.0 });
    let covariate_names = if p == 1 {
        vec!["intercept".to_string()]
    } else {
        vec!["intercept".to_string(), "group".to_string()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut beta = DMatrix::zeros(nc, p);
    for c in 0..nc {
        beta[(c, 0)] = if partition.cells()[c].is_within() { params.within } else { params.between };
    }
    for &(c, b) in &params.effects {
        if c >= nc || p < 2 {
            return Err(Error::validation(format!("effect on cell {c} cannot be placed")));
        }
        beta[(c, 1)] = b;
    }
    let eta_dist = Normal::new(0.0, params.eta_sd).map_err(|e| Error::validation(e.to_string()))?;
    let mut eta = DMatrix::zeros(layout.n_edges(), p);
    for c in 0..nc {
        let r = layout.range(c);
        if r.len() < 2 {
            continue;
        }
        for j in 0..p {
            let draws: Vec<f64> = r.clone().map(|_| eta_dist.sample(&mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            for (e, d) in r.clone().zip(draws) {
                eta[(e, j)] = d - mean;
            }
        }
    }
    let coefficients = CoefficientSet::new(layout.clone(), beta, eta)?;
    let u = RandomEffectCov::new(DMatrix::from_fn(nc, nc, |a, b| {
        if a == b {
            params.u_var
        } else {
            params.u_corr * params.u_var
        }
    }))?;
    let v = match params.v_mode {
        VMode::CellDiagonal => ResidualCov::cell_diagonal(layout.clone(), vec![params.v_var; nc])?,
        VMode::EdgeDiagonal => {
            let lo = params.v_var * (1.0 - params.v_spread);
            let hi = params.v_var * (1.0 + params.v_spread);
            let var = (0..layout.n_edges())
                .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect();
            ResidualCov::edge_diagonal(layout.clone(), var)?
        }
        VMode::Block => {
            let blocks = (0..nc)
                .map(|c| {
                    let s = layout.size(c);
                    DMatrix::from_fn(s, s, |i, k| {
                        if i == k {
                            params.v_var
                        } else {
                            params.v_corr * params.v_var
                        }
                    })
                })
                .collect();
            ResidualCov::block(layout.clone(), blocks)?
        }
    };
    Ok(GenerativeSpec {
        nodes,
        partition,
        covariates,
        covariate_names,
        coefficients,
        u,
        v,
        tested: p - 1,
        seed,
    })
}

/// Desk-scale two-group spec: 4 communities of 10 nodes (10 cells, 780
/// edges), 50 controls and 50 cases, group effects in 3 cells.
pub fn fixture_spec(seed: u64) -> Result<GenerativeSpec> {
    let params = SyntheticParams {
        effects: vec![(0, 0.08), (5, -0.06), (9, 0.05)],
        ..Default::default()
    };
    synthetic_spec(&[10; 4], &[50, 50], &params, seed)
}

/// One-group version of the fixture for null studies.
pub fn null_fixture_spec(n: usize, seed: u64) -> Result<GenerativeSpec> {
    synthetic_spec(&[10; 4], &[n], &SyntheticParams::default(), seed)
}

/// Community sizes of the 13-system parcellation used at full scale
/// (235 nodes, 27,495 edges, 91 cells).
pub const FULL_SCALE_SIZES: [usize; 13] = [30, 5, 14, 13, 57, 5, 31, 25, 18, 13, 9, 11, 4];

/// Full-scale two-group spec: 70 controls and 54 cases.
pub fn full_scale_spec(seed: u64) -> Result<GenerativeSpec> {
    let params = SyntheticParams {
        effects: vec![(0, 0.05), (20, -0.04), (60, 0.04)],
        v_mode: VMode::CellDiagonal,
        ..Default::default()
    };
    synthetic_spec(&FULL_SCALE_SIZES, &[70, 54], &params, seed)
}

/// Turn a fit into a simulation truth: cells whose tested effect has raw
/// p-value at or above `threshold` get that effect set to zero, and the
/// covariance is re-estimated by EM under those constraints.
pub fn spec_from_fit(
    data: &ModelData,
    fit: &FitResult,
    nodes: NodeSet,
    tested: usize,
    threshold: f64,
    em: &EmOptions,
    seed: u64,
) -> Result<(GenerativeSpec, Vec<usize>)> {
    let cov = fit.covariance()?;
    let nc = fit.partition.n_cells();
    if tested >= fit.coefficients.n_covariates() {
        return Err(Error::validation("tested covariate out of range"));
    }
    let zeroed: Vec<usize> = (0..nc)
        .filter(|&c| {
            let t = fit.coefficients.cell_effect(c, tested) / cov.cell_variance(c, tested).sqrt();
            normal_p_value(t) >= threshold
        })
        .collect();
    let (coefficients, u, v) = if zeroed.is_empty() {
        (fit.coefficients.clone(), fit.u.clone(), fit.v.clone())
    } else {
        let mode = if fit.estimator == Estimator::Ols { VMode::CellDiagonal } else { fit.v.mode() };
        let state = if fit.estimator == Estimator::Ols {
            crate::estim::em_init(data, mode, em)?
        } else {
            EmState::from_fit(fit)?
        };
        let opts = EmOptions {
            zero_beta: zeroed.iter().map(|&c| (c, tested)).collect(),
            ..em.clone()
        };
        let refit = fit_em_from(data, state, &opts)?;
        (refit.coefficients, refit.u, refit.v)
    };
    let spec = GenerativeSpec {
        nodes,
        partition: fit.partition.clone(),
        covariates: data.designs.covariates().clone(),
        covariate_names: data.designs.covariate_names().to_vec(),
        coefficients,
        u,
        v,
        tested,
        seed,
    };
    spec.validate()?;
    Ok((spec, zeroed))
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecMeta {
    tested: usize,
    seed: u64,
}

/// Spec directory: a fit directory holding the truth, plus `covariates.csv`
/// and `spec.toml`.
pub fn write_spec(dir: impl AsRef<Path>, spec: &GenerativeSpec) -> Result<()> {
    let dir = dir.as_ref();
    spec.validate()?;
    let fit = FitResult {
        estimator: Estimator::Em,
        coefficients: spec.coefficients.clone(),
        u: spec.u.clone(),
        v: spec.v.clone(),
        loglik_trace: Vec::new(),
        converged: true,
        iterations: 0,
        posterior_gamma: DMatrix::zeros(0, spec.partition.n_cells()),
        partition: spec.partition.clone(),
        covariate_names: spec.covariate_names.clone(),
        gram: spec.covariates.transpose() * &spec.covariates,
        v_floor: Vec::new(),
    };
    write_fit(dir, &fit, &spec.nodes)?;
    write_matrix(dir.join("covariates.csv"), &spec.covariates)?;
    let meta = toml::to_string(&SpecMeta {
        tested: spec.tested,
        seed: spec.seed,
    })
    .map_err(|e| Error::Numerical(e.to_string()))?;
    let path = dir.join("spec.toml");
    std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn read_spec(dir: impl AsRef<Path>) -> Result<GenerativeSpec> {
    let dir = dir.as_ref();
    let (fit, nodes) = read_fit(dir)?;
    let covariates = read_grid(dir.join("covariates.csv"))?;
    let path = dir.join("spec.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SpecMeta = toml::from_str(&text).map_err(|e| Error::parse(&path, 0, e.to_string()))?;
    let spec = GenerativeSpec {
        nodes,
        partition: fit.partition,
        covariates,
        covariate_names: fit.covariate_names,
        coefficients: fit.coefficients,
        u: fit.u,
        v: fit.v,
        tested: meta.tested,
        seed: meta.seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Estimators compared in the studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StudyEstimator {
    Ols,
    GlsDiag,
    GlsBlock,
}

impl StudyEstimator {
    pub const ALL: [StudyEstimator; 3] = [StudyEstimator::Ols, StudyEstimator::GlsDiag, StudyEstimator::GlsBlock];

    /// Fit and return `(estimate, se)` of the tested covariate per cell,
    /// and whether the fit converged.
    pub fn cell_estimates(self, data: &ModelData, tested: usize, em: &EmOptions) -> Result<(Vec<(f64, f64)>, bool)> {
        let fit = match self {
            StudyEstimator::Ols => fit_ols(data)?,
            StudyEstimator::GlsDiag => fit_em(data, VMode::CellDiagonal, em)?,
            StudyEstimator::GlsBlock => fit_em(data, VMode::Block, em)?,
        };
        let cov = fit.covariance()?;
        let est = (0..fit.partition.n_cells())
            .map(|c| (fit.coefficients.cell_effect(c, tested), cov.cell_variance(c, tested).sqrt()))
            .collect();
        Ok((est, fit.converged))
    }
}

impl fmt::Display for StudyEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyEstimator::Ols => "ols",
            StudyEstimator::GlsDiag => "gls-diag",
            StudyEstimator::GlsBlock => "gls-block",
        })
    }
}

impl FromStr for StudyEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ols" => Ok(StudyEstimator::Ols),
            "gls-diag" | "diag" => Ok(StudyEstimator::GlsDiag),
            "gls-block" | "block" => Ok(StudyEstimator::GlsBlock),
            _ => Err(Error::validation(format!("unknown estimator '{s}'"))),
        }
    }
}

/// Replications of one estimator in an [`estimator_study`].
#[derive(Debug, Clone)]
pub struct EstimatorRuns {
    pub estimator: StudyEstimator,
    /// Successful replications: `(replication, estimate per cell, se per cell)`.
    pub runs: Vec<(usize, Vec<f64>, Vec<f64>)>,
    /// Replications whose fit failed, with the error message.
    pub failures: Vec<(usize, String)>,
    /// Successful replications that stopped at the iteration cap.
    pub not_converged: usize,
    /// Total fitting time in seconds.
    pub seconds: f64,
}

impl EstimatorRuns {
    fn column(&self, c: usize, se: bool) -> Vec<f64> {
        self.runs.iter().map(|r| if se { r.2[c] } else { r.1[c] }).collect()
    }

    pub fn estimates(&self, c: usize) -> Vec<f64> {
        self.column(c, false)
    }

    pub fn std_errors(&self, c: usize) -> Vec<f64> {
        self.column(c, true)
    }
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub replications: usize,
    /// True tested-covariate effect per cell.
    pub truth: Vec<f64>,
    pub estimators: Vec<EstimatorRuns>,
}

/// Per-cell summary of one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: usize,
    pub truth: f64,
    pub mean_error: f64,
    /// Standard deviation of the estimates across replications.
    pub empirical_sd: f64,
    /// Quartiles of estimated s.e. / empirical sd.
    pub se_ratio: [f64; 3],
    pub coverage: f64,
    pub n: usize,
}

impl StudyReport {
    pub fn runs(&self, est: StudyEstimator) -> Option<&EstimatorRuns> {
        self.estimators.iter().find(|r| r.estimator == est)
    }

    /// Per-cell bias, s.e. ratio and coverage of `level` intervals.
    pub fn summarize(&self, est: StudyEstimator, level: f64) -> Vec<CellSummary> {
        let Some(runs) = self.runs(est) else { return Vec::new() };
        let z = normal_quantile(level);
        (0..self.truth.len())
            .map(|c| {
                let b = runs.estimates(c);
                let se = runs.std_errors(c);
                let n = b.len();
                let truth = self.truth[c];
                let mean = b.iter().sum::<f64>() / n as f64;
                let sd = (b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
                let mut ratios: Vec<f64> = se.iter().map(|s| s / sd).collect();
                ratios.sort_by(f64::total_cmp);
                let covered = b.iter().zip(&se).filter(|(b, s)| interval(**b, **s, z).contains(truth)).count();
                CellSummary {
                    cell: c,
                    truth,
                    mean_error: mean - truth,
                    empirical_sd: sd,
                    se_ratio: [quantile(&ratios, 0.25), quantile(&ratios, 0.5), quantile(&ratios, 0.75)],
                    coverage: covered as f64 / n as f64,
                    n,
                }
            })
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Repeatedly simulate from `spec` and fit every estimator. Replication
/// `r` draws its data with seed `seed + r`, so results do not depend on the
/// thread count.
pub fn estimator_study(
    spec: &GenerativeSpec,
    estimators: &[StudyEstimator],
    reps: usize,
    seed: u64,
    em: &EmOptions,
) -> Result<StudyReport> {
    if reps < 2 {
        return Err(Error::validation("a study needs at least 2 replications"));
    }
    let sampler = Sampler::new(spec)?;
    let designs = spec.designs()?;
    let layout = spec.partition.layout();
    type Fits = Vec<(std::result::Result<(Vec<(f64, f64)>, bool), String>, f64)>;
    let per_rep: Vec<Fits> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let ys = (0..spec.n_subjects()).map(|m| sampler.draw(m, layout, &mut rng)).collect();
            let data = ModelData::new(designs.clone(), ys);
            estimators
                .iter()
                .map(|est| {
                    let t0 = Instant::now();
                    let out = data
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|d| est.cell_estimates(d, spec.tested, em).map_err(|e| e.to_string()));
                    (out, t0.elapsed().as_secs_f64())
                })
                .collect()
        })
        .collect();
    let estimators = estimators
        .iter()
        .enumerate()
        .map(|(k, &estimator)| {
            let mut runs = EstimatorRuns {
                estimator,
                runs: Vec::new(),
                failures: Vec::new(),
                not_converged: 0,
                seconds: 0.0,
            };
            for (r, fits) in per_rep.iter().enumerate() {
                let (out, secs) = &fits[k];
                runs.seconds += secs;
                match out {
                    Ok((est, conv)) => {
                        if !conv {
                            runs.not_converged += 1;
                        }
                        runs.runs.push((r, est.iter().map(|e| e.0).collect(), est.iter().map(|e| e.1).collect()));
                    }
                    Err(msg) => runs.failures.push((r, msg.clone())),
                }
            }
            runs
        })
        .collect();
    let truth = (0..spec.partition.n_cells())
        .map(|c| spec.coefficients.cell_effect(c, spec.tested))
        .collect();
    Ok(StudyReport {
        replications: reps,
        truth,
        estimators,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// `study_cells.csv` (per-cell summaries), `study_replications.csv` (raw
/// estimates) and `study_summary.toml`.
pub fn write_study(dir: impl AsRef<Path>, report: &StudyReport, part: &CellPartition, level: f64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = part.community_names();
    let cell_ab = |c: usize| {
        let cell = part.cells()[c];
        (names[cell.a].clone(), names[cell.b].clone())
    };

    let path = dir.join("study_cells.csv");
    let io = |e| Error::io(&path, e);
    let mut w = create(&path)?;
    writeln!(w, "estimator,a,b,beta_true,mean_error,empirical_sd,se_ratio_q1,se_ratio_median,se_ratio_q3,coverage,n").map_err(io)?;
    for runs in &report.estimators {
        for s in report.summarize(runs.estimator, level) {
            let (a, b) = cell_ab(s.cell);
            writeln!(
                w,
                "{},{a},{b},{},{},{},{},{},{},{},{}",
                runs.estimator, s.truth, s.mean_error, s.empirical_sd, s.se_ratio[0], s.se_ratio[1], s.se_ratio[2], s.coverage, s.n
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    let path = dir.join("study_replications.csv");
    let io = |e| Error::io(&path, e);
    let mut w = create(&path)?;
    writeln!(w, "estimator,replication,a,b,estimate,se").map_err(io)?;
    for runs in &report.estimators {
        for (r, est, se) in &runs.runs {
            for c in 0..est.len() {
                let (a, b) = cell_ab(c);
                writeln!(w, "{},{r},{a},{b},{},{}", runs.estimator, est[c], se[c]).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;

    #[derive(Serialize)]
    struct EstimatorSummary {
        estimator: String,
        replications_ok: usize,
        failures: usize,
        not_converged: usize,
        seconds: f64,
        coverage: Vec<f64>,
        se_ratio_median: Vec<f64>,
        mean_error: Vec<f64>,
    }
    #[derive(Serialize)]
    struct Summary {
        replications: usize,
        level: f64,
        cells: Vec<String>,
        truth: Vec<f64>,
        estimators: Vec<EstimatorSummary>,
    }
    let summary = Summary {
        replications: report.replications,
        level,
        cells: (0..part.n_cells()).map(|c| part.cell_name(c)).collect(),
        truth: report.truth.clone(),
        estimators: report
            .estimators
            .iter()
            .map(|runs| {
                let s = report.summarize(runs.estimator, level);
                EstimatorSummary {
                    estimator: runs.estimator.to_string(),
                    replications_ok: runs.runs.len(),
                    failures: runs.failures.len(),
                    not_converged: runs.not_converged,
                    seconds: runs.seconds,
                    coverage: s.iter().map(|x| x.coverage).collect(),
                    se_ratio_median: s.iter().map(|x| x.se_ratio[1]).collect(),
                    mean_error: s.iter().map(|x| x.mean_error).collect(),
                }
            })
            .collect(),
    };
    let path = dir.join("study_summary.toml");
    let text = toml::to_string(&summary).map_err(|e| Error::Numerical(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1): the statistic
/// and its asymptotic p-value (with Stephens' small-sample correction).
pub fn ks_uniform(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / nf - v).max(v - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    let sq = nf.sqrt();
    (d, kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d))
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Pooled p-values of one estimator in a [`null_split_study`].
#[derive(Debug, Clone)]
pub struct NullRuns {
    pub estimator: StudyEstimator,
    pub p_values: Vec<f64>,
    /// Bonferroni-significant cells per successful repetition.
    pub bonferroni_rejections: Vec<usize>,
    pub failures: Vec<(usize, String)>,
}

impl NullRuns {
    pub fn ks(&self) -> (f64, f64) {
        ks_uniform(&self.p_values)
    }

    pub fn fraction_below(&self, level: f64) -> f64 {
        self.p_values.iter().filter(|&&p| p < level).count() as f64 / self.p_values.len() as f64
    }

    pub fn mean_bonferroni(&self) -> f64 {
        self.bonferroni_rejections.iter().sum::<usize>() as f64 / self.bonferroni_rejections.len().max(1) as f64
    }

    /// Counts over `bins` equal-width bins of [0, 1].
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins];
        for &p in &self.p_values {
            h[((p * bins as f64) as usize).min(bins - 1)] += 1;
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct NullStudyReport {
    pub repetitions: usize,
    pub n_cells: usize,
    pub estimators: Vec<NullRuns>,
}

impl NullStudyReport {
    pub fn runs(&self, est: StudyEstimator) -> Option<&NullRuns> {
        self.estimators.iter().find(|r| r.estimator == est)
    }
}

/// Random half/half splits of a single group. Each repetition assigns a
/// 0/1 label to the subjects (sizes differing by at most one), fits every
/// estimator with that label as the covariate and pools the cell p-values.
/// The pooled values are dependent, so the KS statistic is a summary rather
/// than a valid test.
pub fn null_split_study(
    data: &ModelData,
    estimators: &[StudyEstimator],
    reps: usize,
    seed: u64,
    em: &EmOptions,
) -> Result<NullStudyReport> {
    let n = data.n_subjects();
    if n < 4 {
        return Err(Error::validation("a split study needs at least 4 subjects"));
    }
    if reps == 0 {
        return Err(Error::validation("a split study needs at least 1 repetition"));
    }
    let nc = data.layout().n_cells();
    let names = vec!["intercept".to_string(), "split".to_string()];
    type Rep = Vec<std::result::Result<Vec<f64>, String>>;
    let per_rep: Vec<Rep> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut label = vec![0.0; n];
            for &i in &order[n / 2..] {
                label[i] = 1.0;
            }
            let x = DMatrix::from_fn(n, 2, |m, j| if j == 0 { 1.0 } else { label[m] });
            let split = data.with_covariates(x, names.clone()).and_then(|d| d.with_mean_model(MeanModel::EdgeEffects));
            estimators
                .iter()
                .map(|est| {
                    let d = split.as_ref().map_err(|e| e.to_string())?;
                    let (cells, _) = est.cell_estimates(d, 1, em).map_err(|e| e.to_string())?;
                    Ok(cells.iter().map(|&(b, se)| normal_p_value(b / se)).collect())
                })
                .collect()
        })
        .collect();
    let estimators = estimators
        .iter()
        .enumerate()
        .map(|(k, &estimator)| {
            let mut runs = NullRuns {
                estimator,
                p_values: Vec::new(),
                bonferroni_rejections: Vec::new(),
                failures: Vec::new(),
            };
            for (r, rep) in per_rep.iter().enumerate() {
                match &rep[k] {
                    Ok(p) => {
                        let adj = adjust(p, Correction::Bonferroni).expect("p-values in range");
                        runs.bonferroni_rejections.push(adj.iter().filter(|&&a| a <= 0.05).count());
                        runs.p_values.extend_from_slice(p);
                    }
                    Err(msg) => runs.failures.push((r, msg.clone())),
                }
            }
            runs
        })
        .collect();
    Ok(NullStudyReport {
        repetitions: reps,
        n_cells: nc,
        estimators,
    })
}

/// `null_pvalues.csv` (pooled p-values), `null_histogram.csv` (20 bins) and
/// `null_summary.toml`.
pub fn write_null_study(dir: impl AsRef<Path>, report: &NullStudyReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("null_pvalues.csv");
    let io = |e| Error::io(&path, e);
    let mut w = create(&path)?;
    writeln!(w, "estimator,index,p").map_err(io)?;
    for runs in &report.estimators {
        for (i, p) in runs.p_values.iter().enumerate() {
            writeln!(w, "{},{i},{p}", runs.estimator).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    let bins = 20;
    let path = dir.join("null_histogram.csv");
    let io = |e| Error::io(&path, e);
    let mut w = create(&path)?;
    writeln!(w, "estimator,lower,upper,count").map_err(io)?;
    for runs in &report.estimators {
        for (b, count) in runs.histogram(bins).iter().enumerate() {
            let lo = b as f64 / bins as f64;
            writeln!(w, "{},{lo},{},{count}", runs.estimator, lo + 1.0 / bins as f64).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    #[derive(Serialize)]
    struct Row {
        estimator: String,
        pooled: usize,
        failures: usize,
        below_005: usize,
        mean_bonferroni_rejections: f64,
        ks_statistic: f64,
        ks_p_value: f64,
    }
    #[derive(Serialize)]
    struct Summary {
        repetitions: usize,
        cells: usize,
        note: &'static str,
        estimators: Vec<Row>,
    }
    let summary = Summary {
        repetitions: report.repetitions,
        cells: report.n_cells,
        note: "pooled p-values are dependent; the KS p-value is descriptive only",
        estimators: report
            .estimators
            .iter()
            .map(|r| {
                let (d, p) = r.ks();
                Row {
                    estimator: r.estimator.to_string(),
                    pooled: r.p_values.len(),
                    failures: r.failures.len(),
                    below_005: r.p_values.iter().filter(|&&p| p < 0.05).count(),
                    mean_bonferroni_rejections: r.mean_bonferroni(),
                    ks_statistic: d,
                    ks_p_value: p,
                }
            })
            .collect(),
    };
    let path = dir.join("null_summary.toml");
    let text = toml::to_string(&summary).map_err(|e| Error::Numerical(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
