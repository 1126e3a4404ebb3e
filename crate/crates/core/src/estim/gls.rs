use nalgebra::DMatrix;

use super::{cross_moment, CoefficientCovariance, CoefficientSet};
use crate::covstruct::StructuredCovariance;
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::netdata::ModelData;

#[derive(Debug, Clone, Copy)]
pub struct GlsOptions {
    /// Stop when the largest coefficient update, relative to the largest
    /// coefficient, falls below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Start from the OLS solution instead of zero.
    pub warm_start: bool,
}

impl Default for GlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 500,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlsFit {
    pub coefficients: CoefficientSet,
    pub covariance: CoefficientCovariance,
    pub sweeps: usize,
}

/// Generalised least squares for a known `Σ`.
///
/// Works on per-edge coefficients `Θ` (`edges × p`), where the normal
/// equations read `Σ⁻¹ (H − Θ S) = 0` with `H = Σ_m y_m x_mᵀ`. Each sweep
/// visits the cells in order and solves the cell's block exactly given the
/// others; the diagonal block `(Σ⁻¹)_cc = V_c⁻¹ − K_cc h_c h_cᵀ` is inverted
/// in closed form, so a sweep never touches a dense edge-sized matrix.
pub fn fit_gls(data: &ModelData, sigma: &StructuredCovariance, opts: GlsOptions) -> Result<GlsFit> {
    let designs = &data.designs;
    if designs.edge_covariates() != designs.n_covariates() {
        return Err(Error::validation("GLS needs edge-level deviations for every covariate"));
    }
    let layout = data.layout();
    if sigma.layout() != layout {
        return Err(Error::Dimension("covariance and data disagree on cells".into()));
    }
    let p = designs.n_covariates();
    let nc = layout.n_cells();
    let gram = designs.gram();
    let s_inv = spd_inverse(&gram).ok_or_else(|| Error::RankDeficient {
        cell: "all".into(),
        detail: "covariate Gram matrix is singular".into(),
    })?;
    let h = cross_moment(data);

    let mut theta = if opts.warm_start {
        &h * &s_inv
    } else {
        DMatrix::zeros(layout.n_edges(), p)
    };
    let mut w = &h - &theta * &gram;
    let k = sigma.k();
    let d = sigma.d();

    let mut s = DMatrix::zeros(nc, p);
    for c in 0..nc {
        update_s(sigma, &w, c, &mut s);
    }

    let mut sweeps = 0;
    loop {
        if sweeps == opts.max_sweeps {
            let gap = relative_change(&w, &s_inv, &theta);
            return Err(Error::NonConvergence {
                iterations: sweeps,
                gap,
            });
        }
        sweeps += 1;
        let mut max_delta = 0.0f64;
        for c in 0..nc {
            let kcc = k[(c, c)];
            let denom = 1.0 - kcc * d[c];
            if !(denom > 0.0) {
                return Err(Error::Numerical(format!("diagonal block of cell {c} is not PD")));
            }
            let kappa = kcc / denom;
            let t = k.row(c) * &s;
            let r = layout.range(c);
            let mut g = w.rows(r.start, r.len()).into_owned();
            for j in 0..p {
                let shift = kappa * s[(c, j)] - (1.0 + kappa * d[c]) * t[j];
                for i in 0..r.len() {
                    g[(i, j)] += shift;
                }
            }
            let delta = &g * &s_inv;
            max_delta = max_delta.max(delta.amax());
            let mut th = theta.rows_mut(r.start, r.len());
            th += &delta;
            let mut wc = w.rows_mut(r.start, r.len());
            wc -= &g;
            update_s(sigma, &w, c, &mut s);
        }
        if max_delta <= opts.tol * theta.amax() || max_delta == 0.0 {
            break;
        }
    }

    let coefficients = CoefficientSet::from_theta(layout.clone(), &theta, p)?;
    let covariance = CoefficientCovariance::new(sigma.clone(), &gram)?;
    Ok(GlsFit {
        coefficients,
        covariance,
        sweeps,
    })
}

fn update_s(sigma: &StructuredCovariance, w: &DMatrix<f64>, c: usize, s: &mut DMatrix<f64>) {
    let r = sigma.layout().range(c);
    let hc = sigma.h(c);
    for j in 0..w.ncols() {
        s[(c, j)] = (0..r.len()).map(|i| hc[i] * w[(r.start + i, j)]).sum();
    }
}

fn relative_change(w: &DMatrix<f64>, s_inv: &DMatrix<f64>, theta: &DMatrix<f64>) -> f64 {
    (w * s_inv).amax() / theta.amax().max(f64::MIN_POSITIVE)
}
