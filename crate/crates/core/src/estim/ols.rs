use nalgebra::DMatrix;

use super::{cross_moment, CoefficientSet, Estimator, FitResult};
use crate::covstruct::{RandomEffectCov, ResidualCov};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::netdata::ModelData;

/// Least-squares coefficients and residual sums of squares per cell.
pub(crate) struct OlsParts {
    pub coef: CoefficientSet,
    pub rss: Vec<f64>,
}

fn singular(detail: &str) -> Error {
    Error::RankDeficient {
        cell: "all".into(),
        detail: detail.into(),
    }
}

pub(crate) fn ols_parts(data: &ModelData) -> Result<OlsParts> {
    let designs = &data.designs;
    let layout = data.layout();
    let x = designs.covariates();
    let n = x.nrows();
    let p = x.ncols();
    let q = designs.edge_covariates();
    let h = cross_moment(data);

    let theta = if q == p {
        let s_inv = spd_inverse(&designs.gram())
            .ok_or_else(|| singular("covariates do not span the coefficient space"))?;
        h * s_inv
    } else {
        // Edge-varying leading covariates, cell-level trailing ones:
        // residualise the trailing block on the leading one, fit the
        // cell-level slopes on cell means, then the edge intercepts.
        let x1 = x.columns(0, q).into_owned();
        let x2 = x.columns(q, p - q).into_owned();
        let s11_inv = spd_inverse(&(x1.transpose() * &x1))
            .ok_or_else(|| singular("edge-level covariates are collinear"))?;
        let b = &s11_inv * x1.transpose() * &x2;
        let x2r = &x2 - &x1 * &b;
        let t_inv = spd_inverse(&(x2r.transpose() * &x2r))
            .ok_or_else(|| singular("cell-level covariates are collinear with edge-level ones"))?;
        let x12 = x1.transpose() * &x2;
        let mut theta = DMatrix::zeros(layout.n_edges(), p);
        for c in 0..layout.n_cells() {
            let r = layout.range(c);
            let inv_n = 1.0 / r.len() as f64;
            let ybar = nalgebra::DVector::from_fn(n, |m, _| {
                data.responses()[m][r.clone()].iter().sum::<f64>() * inv_n
            });
            let slope = &t_inv * (x2r.transpose() * ybar);
            let adj = &x12 * &slope;
            for e in r {
                let h1 = nalgebra::DVector::from_fn(q, |j, _| h[(e, j)] - adj[j]);
                let t1 = &s11_inv * h1;
                for j in 0..q {
                    theta[(e, j)] = t1[j];
                }
                for j in q..p {
                    theta[(e, j)] = slope[j - q];
                }
            }
        }
        theta
    };

    let coef = CoefficientSet::from_theta(layout.clone(), &theta, q)?;
    let mut rss = vec![0.0; layout.n_cells()];
    let mut fitted = vec![0.0; layout.n_edges()];
    for (m, y) in data.responses().iter().enumerate() {
        let xm: Vec<f64> = x.row(m).iter().cloned().collect();
        coef.mean_into(&xm, &mut fitted);
        for (c, acc) in rss.iter_mut().enumerate() {
            for e in layout.range(c) {
                let r = y[e] - fitted[e];
                *acc += r * r;
            }
        }
    }
    Ok(OlsParts { coef, rss })
}

/// Ordinary least squares, cell by cell. The residual covariance is
/// reported as `σ̂²_c I` per cell with `σ̂²_c = RSS_c / (N n_c − k_c)`, where
/// `k_c` counts the cell's coefficients, and `U = 0`.
pub fn fit_ols(data: &ModelData) -> Result<FitResult> {
    let OlsParts { coef, rss } = ols_parts(data)?;
    let designs = &data.designs;
    let layout = data.layout();
    let n = data.n_subjects();
    let mut sigma2 = Vec::with_capacity(layout.n_cells());
    for (c, r) in rss.iter().enumerate() {
        let k = designs.cell_coefficients(c);
        let obs = n * layout.size(c);
        if obs <= k {
            return Err(Error::RankDeficient {
                cell: designs.partition().cell_name(c),
                detail: format!("{obs} observations for {k} coefficients"),
            });
        }
        let s2 = r / (obs - k) as f64;
        if !(s2 > 0.0) {
            return Err(Error::Numerical(format!(
                "cell {} has zero residual variance",
                designs.partition().cell_name(c)
            )));
        }
        sigma2.push(s2);
    }
    Ok(FitResult {
        estimator: Estimator::Ols,
        coefficients: coef,
        u: RandomEffectCov::zeros(layout.n_cells()),
        v: ResidualCov::cell_diagonal(layout.clone(), sigma2)?,
        loglik_trace: Vec::new(),
        converged: true,
        iterations: 0,
        posterior_gamma: DMatrix::zeros(0, layout.n_cells()),
        partition: designs.shared_partition(),
        covariate_names: designs.covariate_names().to_vec(),
        gram: designs.gram(),
        v_floor: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estim::testutil::col_dvec;
    use crate::estim::testutil::*;
    use crate::netdata::{build_partition, DesignMatrices, MeanModel};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn one_edge(ys: &[f64], x: &[f64]) -> ModelData {
        let part = Arc::new(build_partition(&[1, 1]).unwrap());
        let n = ys.len();
        let p = if x.is_empty() { 1 } else { 2 };
        let cov = DMatrix::from_fn(n, p, |m, j| if j == 0 { 1.0 } else { x[m] });
        let names = (0..p).map(|j| format!("x{j}")).collect();
        let d = DesignMatrices::new(part, cov, names, MeanModel::EdgeEffects).unwrap();
        ModelData::new(d, ys.iter().map(|&y| vec![y]).collect()).unwrap()
    }

    #[test]
    fn sample_mean() {
        let fit = fit_ols(&one_edge(&[3.0, 5.0], &[])).unwrap();
        assert_relative_eq!(fit.coefficients.cell_effect(0, 0), 4.0, epsilon = 1e-14);
    }

    #[test]
    fn two_sample_difference() {
        let ys = [1.0, 2.0, 3.0, 7.0, 8.0];
        let g = [0.0, 0.0, 0.0, 1.0, 1.0];
        let fit = fit_ols(&one_edge(&ys, &g)).unwrap();
        assert_relative_eq!(fit.coefficients.cell_effect(0, 1), 7.5 - 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.coefficients.cell_effect(0, 0), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_dense_normal_equations() {
        for seed in 0..10 {
            let data = random_data(seed, &[1, 1, 1, 2, 2], 7, 2, MeanModel::EdgeEffects);
            let xs = dense_stack(&data);
            let k = xs[0].ncols();
            let mut xtx = DMatrix::zeros(k, k);
            let mut xty = nalgebra::DVector::zeros(k);
            for (xm, y) in xs.iter().zip(data.responses()) {
                xtx += xm.transpose() * xm;
                xty += xm.transpose() * col_dvec(y);
            }
            let want = xtx.lu().solve(&xty).unwrap();
            let got = fit_ols(&data).unwrap().coefficients.to_alpha();
            for (g, w) in got.iter().zip(want.iter()) {
                assert_relative_eq!(g, w, epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn reduced_model_matches_dense() {
        for seed in 0..10 {
            let data = random_data(seed, &[1, 1, 1, 2, 2], 9, 3, MeanModel::CellEffects);
            let xs = dense_stack(&data);
            let k = xs[0].ncols();
            assert_eq!(k, data.designs.n_coefficients());
            let mut xtx = DMatrix::zeros(k, k);
            let mut xty = nalgebra::DVector::zeros(k);
            for (xm, y) in xs.iter().zip(data.responses()) {
                xtx += xm.transpose() * xm;
                xty += xm.transpose() * col_dvec(y);
            }
            let want = xtx.lu().solve(&xty).unwrap();
            let got = fit_ols(&data).unwrap().coefficients.to_alpha();
            for (g, w) in got.iter().zip(want.iter()) {
                assert_relative_eq!(g, w, epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let data = random_data(3, &[1, 1, 2, 2, 2], 8, 2, MeanModel::EdgeEffects);
        let fit = fit_ols(&data).unwrap();
        let alpha = col_dvec(&fit.coefficients.to_alpha());
        let layout = data.layout();
        for c in 0..layout.n_cells() {
            let r = layout.range(c);
            let mut g = nalgebra::DVector::zeros(data.designs.cell_coefficients(c));
            let mut off = 0;
            for cc in 0..c {
                off += data.designs.cell_coefficients(cc);
            }
            for (m, y) in data.responses().iter().enumerate() {
                let blk = data.designs.x_block(m, c);
                let a = alpha.rows(off, blk.ncols());
                let res = col_dvec(&y[r.clone()]) - &blk * a;
                g += blk.transpose() * res;
            }
            assert!(g.amax() < 1e-10);
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let part = Arc::new(build_partition(&[1, 1, 2]).unwrap());
        let cov = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let d = DesignMatrices::new(part, cov, vec!["a".into(), "b".into()], MeanModel::EdgeEffects).unwrap();
        let data = ModelData::new(d, vec![vec![0.0, 1.0, 2.0]; 3]).unwrap();
        assert!(matches!(fit_ols(&data), Err(Error::RankDeficient { .. })));
    }
}
