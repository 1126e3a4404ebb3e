//! Wald tests for cell and edge effects, confidence intervals and
//! multiple-testing corrections.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::estim::FitResult;
use crate::netdata::{CellPartition, NodeSet};

/// Multiple-testing procedure, with adjusted p-values defined as in R's
/// `p.adjust`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Correction {
    None,
    Bonferroni,
    Holm,
    Hochberg,
    BenjaminiHochberg,
    BenjaminiYekutieli,
}

impl Correction {
    pub const ALL: [Correction; 6] = [
        Correction::None,
        Correction::Bonferroni,
        Correction::Holm,
        Correction::Hochberg,
        Correction::BenjaminiHochberg,
        Correction::BenjaminiYekutieli,
    ];
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correction::None => "none",
            Correction::Bonferroni => "bonferroni",
            Correction::Holm => "holm",
            Correction::Hochberg => "hochberg",
            Correction::BenjaminiHochberg => "bh",
            Correction::BenjaminiYekutieli => "by",
        })
    }
}

impl FromStr for Correction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "none" => Correction::None,
            "bonferroni" => Correction::Bonferroni,
            "holm" => Correction::Holm,
            "hochberg" => Correction::Hochberg,
            "bh" | "fdr" | "benjamini-hochberg" => Correction::BenjaminiHochberg,
            "by" | "benjamini-yekutieli" => Correction::BenjaminiYekutieli,
            _ => return Err(Error::validation(format!("unknown correction '{s}'"))),
        })
    }
}

/// Adjusted p-values for `method`.
pub fn adjust(p: &[f64], method: Correction) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::validation("no p-values to adjust"));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!("p-value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mf = m as f64;
    let mut asc: Vec<usize> = (0..m).collect();
    asc.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    // Step-up procedures: walk from the largest p down, keeping a running
    // minimum of `factor(rank) * p`.
    let step_up = |out: &mut [f64], factor: &dyn Fn(usize) -> f64| {
        let mut run = f64::INFINITY;
        for (rank, &i) in asc.iter().enumerate().rev() {
            run = run.min(factor(rank + 1) * p[i]);
            out[i] = run.min(1.0);
        }
    };
    match method {
        Correction::None => out.copy_from_slice(p),
        Correction::Bonferroni => {
            for (o, v) in out.iter_mut().zip(p) {
                *o = (mf * v).min(1.0);
            }
        }
        Correction::Holm => {
            let mut run = 0.0f64;
            for (rank, &i) in asc.iter().enumerate() {
                run = run.max(((mf - rank as f64) * p[i]).min(1.0));
                out[i] = run;
            }
        }
        Correction::Hochberg => step_up(&mut out, &|k| mf - k as f64 + 1.0),
        Correction::BenjaminiHochberg => step_up(&mut out, &|k| mf / k as f64),
        Correction::BenjaminiYekutieli => {
            let h: f64 = (1..=m).map(|k| 1.0 / k as f64).sum();
            step_up(&mut out, &|k| h * mf / k as f64)
        }
    }
    Ok(out)
}

/// Indices rejected at `level`.
pub fn rejections(p: &[f64], method: Correction, level: f64) -> Result<Vec<usize>> {
    check_level(level)?;
    let adj = adjust(p, method)?;
    Ok((0..p.len()).filter(|&i| adj[i] <= level).collect())
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("level {level} must lie in (0, 1)")))
    }
}

/// Reference distribution for Wald statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Normal,
    /// Student t with `N − p` degrees of freedom.
    StudentT,
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reference::Normal => "normal",
            Reference::StudentT => "t",
        })
    }
}

impl FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "z" => Ok(Reference::Normal),
            "t" | "student" => Ok(Reference::StudentT),
            _ => Err(Error::validation(format!("unknown reference distribution '{s}'"))),
        }
    }
}

struct RefDist {
    t: Option<StudentsT>,
}

impl RefDist {
    fn new(reference: Reference, df: usize) -> Result<Self> {
        let t = match reference {
            Reference::Normal => None,
            Reference::StudentT => {
                if df == 0 {
                    return Err(Error::validation("no residual degrees of freedom for a t reference"));
                }
                Some(StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numerical(e.to_string()))?)
            }
        };
        Ok(Self { t })
    }

    fn two_sided(&self, stat: f64) -> f64 {
        let a = stat.abs();
        match &self.t {
            None => erfc(a / std::f64::consts::SQRT_2),
            Some(t) => 2.0 * t.sf(a),
        }
    }

    fn quantile(&self, prob: f64) -> f64 {
        match &self.t {
            None => statrs::distribution::Normal::standard().inverse_cdf(prob),
            Some(t) => t.inverse_cdf(prob),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TestOptions {
    pub method: Correction,
    pub level: f64,
    pub reference: Reference,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self {
            method: Correction::BenjaminiHochberg,
            level: 0.05,
            reference: Reference::Normal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Cell,
    Edge,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Cell => "cell",
            Family::Edge => "edge",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestRow {
    /// Cell index, or edge index for the edge family.
    pub target: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub family: Family,
    pub covariate: usize,
    pub covariate_name: String,
    pub method: Correction,
    pub level: f64,
    pub reference: Reference,
    pub rows: Vec<TestRow>,
}

impl InferenceReport {
    pub fn p_raw(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.p_raw).collect()
    }

    pub fn n_rejected(&self) -> usize {
        self.rows.iter().filter(|r| r.rejected).count()
    }
}

/// Estimates and standard errors for every target of `family`.
fn estimates(fit: &FitResult, j: usize, family: Family) -> Result<Vec<(f64, f64)>> {
    let p = fit.coefficients.n_covariates();
    if j >= p {
        return Err(Error::validation(format!("covariate {j} out of range ({p} covariates)")));
    }
    let cov = fit.covariance()?;
    let layout = fit.coefficients.layout();
    let out: Vec<(f64, f64)> = match family {
        Family::Cell => (0..layout.n_cells())
            .map(|c| (fit.coefficients.cell_effect(c, j), cov.cell_variance(c, j).sqrt()))
            .collect(),
        Family::Edge => (0..layout.n_edges())
            .map(|e| (fit.coefficients.edge_effect(e, j), cov.edge_variance(e, j).sqrt()))
            .collect(),
    };
    if let Some(i) = out.iter().position(|&(_, se)| !(se > 0.0) || !se.is_finite()) {
        return Err(Error::Numerical(format!("{family} {i} has a zero or undefined standard error")));
    }
    Ok(out)
}

fn report(fit: &FitResult, j: usize, family: Family, opts: &TestOptions) -> Result<InferenceReport> {
    check_level(opts.level)?;
    let est = estimates(fit, j, family)?;
    let df = fit.n_subjects().saturating_sub(fit.coefficients.n_covariates());
    let dist = RefDist::new(opts.reference, df)?;
    let stats: Vec<(f64, f64, f64)> = est
        .iter()
        .map(|&(b, se)| {
            let t = b / se;
            (b, se, t)
        })
        .collect();
    let p_raw: Vec<f64> = stats.iter().map(|s| dist.two_sided(s.2).clamp(0.0, 1.0)).collect();
    let p_adj = adjust(&p_raw, opts.method)?;
    let rows = stats
        .iter()
        .enumerate()
        .map(|(i, &(estimate, std_error, t_stat))| TestRow {
            target: i,
            estimate,
            std_error,
            t_stat,
            p_raw: p_raw[i],
            p_adjusted: p_adj[i],
            rejected: p_adj[i] <= opts.level,
        })
        .collect();
    Ok(InferenceReport {
        family,
        covariate: j,
        covariate_name: fit.covariate_names.get(j).cloned().unwrap_or_default(),
        method: opts.method,
        level: opts.level,
        reference: opts.reference,
        rows,
    })
}

/// Tests of `β_{c,j} = 0`, one row per cell.
pub fn cell_tests(fit: &FitResult, j: usize, opts: &TestOptions) -> Result<InferenceReport> {
    report(fit, j, Family::Cell, opts)
}

/// Tests of `β_{c,j} + η_{e,j} = 0`, one row per edge.
pub fn edge_tests(fit: &FitResult, j: usize, opts: &TestOptions) -> Result<InferenceReport> {
    report(fit, j, Family::Edge, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Two-sided intervals `estimate ± z·se` at confidence `level`.
pub fn confidence_intervals(
    fit: &FitResult,
    j: usize,
    level: f64,
    family: Family,
    reference: Reference,
) -> Result<Vec<Interval>> {
    check_level(level)?;
    let df = fit.n_subjects().saturating_sub(fit.coefficients.n_covariates());
    let z = RefDist::new(reference, df)?.quantile(0.5 + level / 2.0);
    Ok(estimates(fit, j, family)?
        .into_iter()
        .map(|(b, se)| interval(b, se, z))
        .collect())
}

/// `estimate ± z·se`.
pub fn interval(estimate: f64, se: f64, z: f64) -> Interval {
    Interval {
        estimate,
        lower: estimate - z * se,
        upper: estimate + z * se,
    }
}

/// Critical value `z_{1−(1−level)/2}` of the standard normal.
pub fn normal_quantile(level: f64) -> f64 {
    statrs::distribution::Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// Two-sided normal p-value for a Wald statistic.
pub fn normal_p_value(stat: f64) -> f64 {
    erfc(stat.abs() / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Correction,
    pub level: f64,
    pub rejected: usize,
}

/// Number of rejections per method over a grid of levels.
pub fn rejection_sweep(p: &[f64], methods: &[Correction], levels: &[f64]) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for &method in methods {
        let adj = adjust(p, method)?;
        for &level in levels {
            check_level(level)?;
            out.push(SweepRow {
                method,
                level,
                rejected: adj.iter().filter(|&&a| a <= level).count(),
            });
        }
    }
    Ok(out)
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// `cell_tests.csv`: `a,b,covariate,estimate,se,t,p,p_adj,reject`.
pub fn write_cell_tests(path: impl AsRef<Path>, rep: &InferenceReport, part: &CellPartition) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = writer(path)?;
    writeln!(w, "a,b,covariate,estimate,se,t,p,p_adj,reject").map_err(io)?;
    let names = part.community_names();
    for r in &rep.rows {
        let cell = part.cells()[r.target];
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            names[cell.a], names[cell.b], rep.covariate_name, r.estimate, r.std_error, r.t_stat, r.p_raw, r.p_adjusted, r.rejected as u8
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `edge_tests.csv`: `i,j,a,b,covariate,estimate,se,t,p,p_adj,reject`.
pub fn write_edge_tests(
    path: impl AsRef<Path>,
    rep: &InferenceReport,
    part: &CellPartition,
    nodes: &NodeSet,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = writer(path)?;
    writeln!(w, "i,j,a,b,covariate,estimate,se,t,p,p_adj,reject").map_err(io)?;
    let names = part.community_names();
    for r in &rep.rows {
        let (i, k) = part.edges()[r.target];
        let cell = part.cells()[part.edge_cell(r.target)];
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            nodes.ids()[i],
            nodes.ids()[k],
            names[cell.a],
            names[cell.b],
            rep.covariate_name,
            r.estimate,
            r.std_error,
            r.t_stat,
            r.p_raw,
            r.p_adjusted,
            r.rejected as u8
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Which per-cell quantity a matrix file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellQuantity {
    Estimate,
    TStat,
    PRaw,
    PAdjusted,
    /// Estimate where rejected, 0 elsewhere.
    Significant,
}

/// Symmetric community × community grid of a cell-level quantity, with
/// community names as the header row and first column. Empty cells are
/// written as `NA`.
pub fn write_cell_matrix(
    path: impl AsRef<Path>,
    rep: &InferenceReport,
    part: &CellPartition,
    what: CellQuantity,
) -> Result<()> {
    if rep.family != Family::Cell {
        return Err(Error::validation("cell matrix needs a cell-level report"));
    }
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let k = part.n_communities();
    let mut grid = vec![vec![None; k]; k];
    for r in &rep.rows {
        let cell = part.cells()[r.target];
        let v = match what {
            CellQuantity::Estimate => r.estimate,
            CellQuantity::TStat => r.t_stat,
            CellQuantity::PRaw => r.p_raw,
            CellQuantity::PAdjusted => r.p_adjusted,
            CellQuantity::Significant => {
                if r.rejected {
                    r.estimate
                } else {
                    0.0
                }
            }
        };
        grid[cell.a][cell.b] = Some(v);
        grid[cell.b][cell.a] = Some(v);
    }
    let mut w = writer(path)?;
    let names = part.community_names();
    writeln!(w, "community,{}", names.join(",")).map_err(io)?;
    for (a, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map_or_else(|| "NA".to_string(), |x| x.to_string()))
            .collect();
        writeln!(w, "{},{}", names[a], cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `method,level,rejected` rows of a [`rejection_sweep`].
pub fn write_sweep(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = writer(path)?;
    writeln!(w, "method,level,rejected").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{}", r.method, r.level, r.rejected).map_err(io)?;
    }
    w.flush().map_err(io)
}
