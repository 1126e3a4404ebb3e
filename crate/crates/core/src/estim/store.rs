//! Fit directories: `fit.toml` metadata plus plain CSV tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{CoefficientSet, Estimator, FitResult};
use crate::covstruct::{RandomEffectCov, ResidualCov};
use crate::error::{Error, Result};
use crate::netdata::io::{read_grid, read_partition, write_matrix, write_partition};
use crate::netdata::NodeSet;

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct FitMeta {
    version: u32,
    estimator: String,
    v_mode: String,
    n_subjects: usize,
    covariates: Vec<String>,
    edge_covariates: usize,
    converged: bool,
    iterations: usize,
    loglik: Option<f64>,
    v_floor: Vec<f64>,
}

/// Write `fit` into `dir` (created if needed).
pub fn write_fit(dir: impl AsRef<Path>, fit: &FitResult, nodes: &NodeSet) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let part = &fit.partition;
    if nodes.len() != part.n_nodes() {
        return Err(Error::Dimension("node set does not match the fit's partition".into()));
    }
    let meta = FitMeta {
        version: FIT_FORMAT_VERSION,
        estimator: fit.estimator.to_string(),
        v_mode: fit.v.mode().to_string(),
        n_subjects: fit.n_subjects(),
        covariates: fit.covariate_names.clone(),
        edge_covariates: fit.coefficients.edge_covariates(),
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.loglik(),
        v_floor: fit.v_floor.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Numerical(e.to_string()))?;
    let meta_path = dir.join("fit.toml");
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    write_partition(dir.join("partition.csv"), nodes, part, &[])?;

    let cpath = dir.join("coefficients.csv");
    let io = |e| Error::io(&cpath, e);
    let mut w = BufWriter::new(File::create(&cpath).map_err(io)?);
    writeln!(w, "cell_a,cell_b,kind,node_i,node_j,covariate,estimate").map_err(io)?;
    let coef = &fit.coefficients;
    let names = part.community_names();
    let layout = part.layout();
    for c in 0..part.n_cells() {
        let cell = part.cells()[c];
        let (a, b) = (&names[cell.a], &names[cell.b]);
        for (j, cov) in fit.covariate_names.iter().enumerate() {
            writeln!(w, "{a},{b},beta,,,{cov},{}", coef.cell_effect(c, j)).map_err(io)?;
            if j < coef.edge_covariates() && layout.size(c) > 1 {
                for e in layout.range(c) {
                    let (i, k) = part.edges()[e];
                    writeln!(
                        w,
                        "{a},{b},eta,{},{},{cov},{}",
                        nodes.ids()[i],
                        nodes.ids()[k],
                        coef.eta()[(e, j)]
                    )
                    .map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)?;

    write_matrix(dir.join("U.csv"), fit.u.matrix())?;
    fit.v.write(dir.join("V.csv"))?;
    write_matrix(dir.join("gram.csv"), &fit.gram)?;
    write_matrix(dir.join("posterior_gamma.csv"), &fit.posterior_gamma)?;

    let lpath = dir.join("loglik.csv");
    let io = |e| Error::io(&lpath, e);
    let mut w = BufWriter::new(File::create(&lpath).map_err(io)?);
    writeln!(w, "iteration,loglik").map_err(io)?;
    for (i, l) in fit.loglik_trace.iter().enumerate() {
        writeln!(w, "{i},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a fit directory written by [`write_fit`].
pub fn read_fit(dir: impl AsRef<Path>) -> Result<(FitResult, NodeSet)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("fit.toml");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: FitMeta =
        toml::from_str(&text).map_err(|e| Error::parse(&meta_path, 0, e.to_string()))?;
    if meta.version != FIT_FORMAT_VERSION {
        return Err(Error::parse(
            &meta_path,
            0,
            format!("unsupported fit format version {}", meta.version),
        ));
    }
    let estimator = match meta.estimator.as_str() {
        "ols" => Estimator::Ols,
        "gls" => Estimator::Gls,
        "gls-em" => Estimator::Em,
        other => return Err(Error::parse(&meta_path, 0, format!("unknown estimator '{other}'"))),
    };
    let pf = read_partition(dir.join("partition.csv"))?;
    let part = Arc::new(pf.partition);
    let layout = part.layout().clone();
    let p = meta.covariates.len();
    let q = meta.edge_covariates;

    let cpath = dir.join("coefficients.csv");
    let ctext = std::fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let mut beta = DMatrix::from_element(part.n_cells(), p, f64::NAN);
    let mut eta = DMatrix::zeros(layout.n_edges(), q);
    let comm = |s: &str| part.community_names().iter().position(|n| n == s);
    for (ln, line) in ctext.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::parse(&cpath, ln + 1, m.to_string());
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let (a, b) = (comm(f[0]), comm(f[1]));
        let c = match (a, b) {
            (Some(a), Some(b)) => part.cell_index(a, b).ok_or_else(|| bad("empty cell"))?,
            _ => return Err(bad("unknown community")),
        };
        let j = meta
            .covariates
            .iter()
            .position(|n| n == f[5])
            .ok_or_else(|| bad("unknown covariate"))?;
        let val: f64 = f[6].parse().map_err(|_| bad("bad estimate"))?;
        match f[2] {
            "beta" => beta[(c, j)] = val,
            "eta" => {
                let i = pf.nodes.index_of(f[3]).ok_or_else(|| bad("unknown node"))?;
                let k = pf.nodes.index_of(f[4]).ok_or_else(|| bad("unknown node"))?;
                let e = part.edge_index(i, k).ok_or_else(|| bad("bad node pair"))?;
                if part.edge_cell(e) != c || j >= q {
                    return Err(bad("deviation does not belong to this cell"));
                }
                eta[(e, j)] = val;
            }
            _ => return Err(bad("kind must be beta or eta")),
        }
    }
    if beta.iter().any(|v| v.is_nan()) {
        return Err(Error::parse(&cpath, 0, "missing cell effects"));
    }
    let coefficients = CoefficientSet::new(layout.clone(), beta, eta)?;
    let u = RandomEffectCov::new(read_grid(dir.join("U.csv"))?)?;
    let v = ResidualCov::read(dir.join("V.csv"), &layout)?;
    let gram = read_grid(dir.join("gram.csv"))?;
    let mut posterior_gamma = read_grid(dir.join("posterior_gamma.csv"))?;
    if posterior_gamma.nrows() == 0 {
        posterior_gamma = DMatrix::zeros(0, part.n_cells());
    }
    let lpath = dir.join("loglik.csv");
    let ltext = std::fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let loglik_trace = ltext
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .nth(1)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::parse(&lpath, i + 2, "bad log-likelihood row"))
        })
        .collect::<Result<Vec<_>>>()?;
    if gram.nrows() != p || gram.ncols() != p || u.dim() != part.n_cells() {
        return Err(Error::Dimension("fit tables disagree with the metadata".into()));
    }
    let fit = FitResult {
        estimator,
        coefficients,
        u,
        v,
        loglik_trace,
        converged: meta.converged,
        iterations: meta.iterations,
        posterior_gamma,
        partition: part,
        covariate_names: meta.covariates,
        gram,
        v_floor: meta.v_floor,
    };
    Ok((fit, pf.nodes))
}
