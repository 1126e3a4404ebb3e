//! `Σ = V + Z U Zᵀ` with `V` diagonal or block-diagonal by cell.
//!
//! Solves and log-determinants go through the low-rank identity
//!
//! ```text
//! Σ⁻¹ = V⁻¹ − V⁻¹ Z L (I + Lᵀ Zᵀ V⁻¹ Z L)⁻¹ Lᵀ Zᵀ V⁻¹,   U = L Lᵀ
//! ```
//!
//! so a singular `U` needs no pseudo-inverse. Because `Z` only maps edges to
//! cells, `Zᵀ V⁻¹ Z` is diagonal with entries `1ᵀ V_c⁻¹ 1`, and a solve costs
//! one pass over the edges plus a dense product with the cell-sized matrix
//! `K = L (I + Lᵀ D L)⁻¹ Lᵀ`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{clip_eigenvalues, low_rank_factor, min_eigenvalue, symmetrize};
use crate::netdata::CellLayout;

/// Relative eigenvalue cutoff used when factoring `U`.
pub const U_RANK_CUTOFF: f64 = 1e-10;

/// Sparsity class of the residual covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VMode {
    /// One variance per cell, shared by its edges.
    CellDiagonal,
    /// One variance per edge.
    EdgeDiagonal,
    /// A dense PSD block per cell.
    Block,
}

impl VMode {
    pub fn is_diagonal(self) -> bool {
        self != VMode::Block
    }
}

impl fmt::Display for VMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VMode::CellDiagonal => "cell_diagonal",
            VMode::EdgeDiagonal => "edge_diagonal",
            VMode::Block => "block",
        })
    }
}

impl FromStr for VMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" | "diagonal" | "cell_diagonal" | "cell-diagonal" => Ok(VMode::CellDiagonal),
            "edge_diagonal" | "edge-diagonal" | "edge-diag" => Ok(VMode::EdgeDiagonal),
            "block" | "block_diagonal" | "block-diagonal" => Ok(VMode::Block),
            _ => Err(Error::validation(format!("unknown V mode '{s}'"))),
        }
    }
}

/// Residual covariance `V`.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualCov {
    CellDiagonal { layout: CellLayout, var: Vec<f64> },
    EdgeDiagonal { layout: CellLayout, var: Vec<f64> },
    Block { layout: CellLayout, blocks: Vec<DMatrix<f64>> },
}

impl ResidualCov {
    pub fn cell_diagonal(layout: CellLayout, var: Vec<f64>) -> Result<Self> {
        if var.len() != layout.n_cells() {
            return Err(Error::Dimension(format!(
                "{} variances for {} cells",
                var.len(),
                layout.n_cells()
            )));
        }
        check_variances(&var)?;
        Ok(ResidualCov::CellDiagonal { layout, var })
    }

    pub fn edge_diagonal(layout: CellLayout, var: Vec<f64>) -> Result<Self> {
        if var.len() != layout.n_edges() {
            return Err(Error::Dimension(format!(
                "{} variances for {} edges",
                var.len(),
                layout.n_edges()
            )));
        }
        check_variances(&var)?;
        Ok(ResidualCov::EdgeDiagonal { layout, var })
    }

    /// Blocks are symmetrised; eigenvalues down to `−1e−8` (relative to the
    /// largest) are clipped to zero, anything more negative is an error.
    pub fn block(layout: CellLayout, blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.len() != layout.n_cells() {
            return Err(Error::Dimension(format!(
                "{} blocks for {} cells",
                blocks.len(),
                layout.n_cells()
            )));
        }
        let mut out = Vec::with_capacity(blocks.len());
        for (c, b) in blocks.into_iter().enumerate() {
            let n = layout.size(c);
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::Dimension(format!(
                    "block {c} is {}x{}, cell has {n} edges",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("block {c} has non-finite entries")));
            }
            let b = symmetrize(&b);
            if b.clone().cholesky().is_some() {
                out.push(b);
                continue;
            }
            let scale = b.diagonal().max().abs().max(f64::MIN_POSITIVE);
            let lmin = min_eigenvalue(&b);
            if lmin < -1e-8 * scale {
                return Err(Error::validation(format!(
                    "block {c} is not PSD (eigenvalue {lmin:.3e})"
                )));
            }
            out.push(if lmin < 0.0 { clip_eigenvalues(&b, 0.0) } else { b });
        }
        Ok(ResidualCov::Block { layout, blocks: out })
    }

    pub fn mode(&self) -> VMode {
        match self {
            ResidualCov::CellDiagonal { .. } => VMode::CellDiagonal,
            ResidualCov::EdgeDiagonal { .. } => VMode::EdgeDiagonal,
            ResidualCov::Block { .. } => VMode::Block,
        }
    }

    pub fn layout(&self) -> &CellLayout {
        match self {
            ResidualCov::CellDiagonal { layout, .. }
            | ResidualCov::EdgeDiagonal { layout, .. }
            | ResidualCov::Block { layout, .. } => layout,
        }
    }

    /// Dense `n_c × n_c` block of cell `c`.
    pub fn cell_block(&self, c: usize) -> DMatrix<f64> {
        let n = self.layout().size(c);
        match self {
            ResidualCov::CellDiagonal { var, .. } => DMatrix::from_diagonal_element(n, n, var[c]),
            ResidualCov::EdgeDiagonal { layout, var } => {
                DMatrix::from_diagonal(&DVector::from_column_slice(&var[layout.range(c)]))
            }
            ResidualCov::Block { blocks, .. } => blocks[c].clone(),
        }
    }

    /// Variance of edge `e`.
    pub fn edge_variance(&self, e: usize) -> f64 {
        match self {
            ResidualCov::CellDiagonal { layout, var } => {
                let c = layout.offsets().partition_point(|&o| o <= e) - 1;
                var[c]
            }
            ResidualCov::EdgeDiagonal { var, .. } => var[e],
            ResidualCov::Block { layout, blocks } => {
                let c = layout.offsets().partition_point(|&o| o <= e) - 1;
                let i = e - layout.offsets()[c];
                blocks[c][(i, i)]
            }
        }
    }

    /// Mean edge variance in cell `c`.
    pub fn mean_variance(&self, c: usize) -> f64 {
        match self {
            ResidualCov::CellDiagonal { var, .. } => var[c],
            ResidualCov::EdgeDiagonal { layout, var } => {
                let r = layout.range(c);
                var[r.clone()].iter().sum::<f64>() / r.len() as f64
            }
            ResidualCov::Block { blocks, .. } => blocks[c].trace() / blocks[c].nrows() as f64,
        }
    }

    /// `V b`.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let layout = self.layout();
        match self {
            ResidualCov::CellDiagonal { var, .. } => {
                let mut out = b.to_vec();
                for c in 0..layout.n_cells() {
                    out[layout.range(c)].iter_mut().for_each(|x| *x *= var[c]);
                }
                out
            }
            ResidualCov::EdgeDiagonal { var, .. } => b.iter().zip(var).map(|(x, v)| x * v).collect(),
            ResidualCov::Block { blocks, .. } => {
                let mut out = vec![0.0; b.len()];
                for c in 0..layout.n_cells() {
                    let r = layout.range(c);
                    let y = &blocks[c] * DVector::from_column_slice(&b[r.clone()]);
                    out[r].copy_from_slice(y.as_slice());
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let layout = self.layout();
        let d = layout.n_edges();
        let mut m = DMatrix::zeros(d, d);
        for c in 0..layout.n_cells() {
            let r = layout.range(c);
            m.view_mut((r.start, r.start), (r.len(), r.len()))
                .copy_from(&self.cell_block(c));
        }
        m
    }

    /// Free parameters: used when comparing fits.
    pub fn n_parameters(&self) -> usize {
        let layout = self.layout();
        match self {
            ResidualCov::CellDiagonal { .. } => layout.n_cells(),
            ResidualCov::EdgeDiagonal { .. } => layout.n_edges(),
            ResidualCov::Block { .. } => (0..layout.n_cells())
                .map(|c| layout.size(c) * (layout.size(c) + 1) / 2)
                .sum(),
        }
    }

    /// Text form: a `mode,<mode>` line, then `cell,row,col,value` rows with
    /// cell-local indices (upper triangle for blocks, `row = col = 0` for a
    /// cell-shared variance).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "mode,{}", self.mode()).map_err(io)?;
        writeln!(w, "cell,row,col,value").map_err(io)?;
        let layout = self.layout();
        for c in 0..layout.n_cells() {
            match self {
                ResidualCov::CellDiagonal { var, .. } => {
                    writeln!(w, "{c},0,0,{}", var[c]).map_err(io)?;
                }
                ResidualCov::EdgeDiagonal { var, .. } => {
                    for (i, e) in layout.range(c).enumerate() {
                        writeln!(w, "{c},{i},{i},{}", var[e]).map_err(io)?;
                    }
                }
                ResidualCov::Block { blocks, .. } => {
                    let b = &blocks[c];
                    for i in 0..b.nrows() {
                        for j in i..b.ncols() {
                            writeln!(w, "{c},{i},{j},{}", b[(i, j)]).map_err(io)?;
                        }
                    }
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>, layout: &CellLayout) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        });
        let mode = match lines.next() {
            Some((_, l)) if l.starts_with("mode,") => l[5..].trim().parse::<VMode>()?,
            _ => return Err(Error::parse(path, 1, "expected a mode line")),
        };
        lines.next();
        let mut cell_var = vec![f64::NAN; layout.n_cells()];
        let mut edge_var = vec![f64::NAN; layout.n_edges()];
        let mut blocks: Vec<DMatrix<f64>> = (0..layout.n_cells())
            .map(|c| DMatrix::from_element(layout.size(c), layout.size(c), f64::NAN))
            .collect();
        for (ln, l) in lines {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let bad = |m: &str| Error::parse(path, ln + 1, m.to_string());
            if f.len() != 4 {
                return Err(bad("expected cell,row,col,value"));
            }
            let c: usize = f[0].parse().map_err(|_| bad("bad cell index"))?;
            let i: usize = f[1].parse().map_err(|_| bad("bad row index"))?;
            let j: usize = f[2].parse().map_err(|_| bad("bad column index"))?;
            let v: f64 = f[3].parse().map_err(|_| bad("bad value"))?;
            if c >= layout.n_cells() || i >= layout.size(c) || j >= layout.size(c) {
                return Err(bad("index out of range"));
            }
            match mode {
                VMode::CellDiagonal => cell_var[c] = v,
                VMode::EdgeDiagonal => edge_var[layout.offsets()[c] + i] = v,
                VMode::Block => {
                    blocks[c][(i, j)] = v;
                    blocks[c][(j, i)] = v;
                }
            }
        }
        let missing = || Error::parse(path, 0, "V file does not cover every cell");
        match mode {
            VMode::CellDiagonal => {
                if cell_var.iter().any(|v| v.is_nan()) {
                    return Err(missing());
                }
                Self::cell_diagonal(layout.clone(), cell_var)
            }
            VMode::EdgeDiagonal => {
                if edge_var.iter().any(|v| v.is_nan()) {
                    return Err(missing());
                }
                Self::edge_diagonal(layout.clone(), edge_var)
            }
            VMode::Block => {
                if blocks.iter().any(|b| b.iter().any(|v| v.is_nan())) {
                    return Err(missing());
                }
                Self::block(layout.clone(), blocks)
            }
        }
    }
}

fn check_variances(var: &[f64]) -> Result<()> {
    if let Some(v) = var.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::validation(format!("variance {v} must be finite and >= 0")));
    }
    Ok(())
}

/// Project a dense residual moment matrix onto the sparsity class of `mode`
/// and then onto the PSD cone (eigenvalue clipping at 0). Off-class entries
/// are dropped, which is the Frobenius-nearest matrix in the class.
pub fn project_v(moment: &DMatrix<f64>, layout: &CellLayout, mode: VMode) -> Result<ResidualCov> {
    let d = layout.n_edges();
    if moment.nrows() != d || moment.ncols() != d {
        return Err(Error::Dimension(format!(
            "moment is {}x{}, layout has {d} edges",
            moment.nrows(),
            moment.ncols()
        )));
    }
    let m = symmetrize(moment);
    match mode {
        VMode::CellDiagonal => {
            let var = (0..layout.n_cells())
                .map(|c| {
                    let r = layout.range(c);
                    (r.clone().map(|e| m[(e, e)]).sum::<f64>() / r.len() as f64).max(0.0)
                })
                .collect();
            ResidualCov::cell_diagonal(layout.clone(), var)
        }
        VMode::EdgeDiagonal => {
            ResidualCov::edge_diagonal(layout.clone(), (0..d).map(|e| m[(e, e)].max(0.0)).collect())
        }
        VMode::Block => {
            let blocks = (0..layout.n_cells())
                .map(|c| {
                    let r = layout.range(c);
                    clip_eigenvalues(&m.view((r.start, r.start), (r.len(), r.len())).into_owned(), 0.0)
                })
                .collect();
            ResidualCov::block(layout.clone(), blocks)
        }
    }
}

/// Cell-level random-effect covariance `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectCov(DMatrix<f64>);

impl RandomEffectCov {
    /// Symmetrised; must be PSD up to `1e−8` relative to its largest
    /// eigenvalue.
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != u.ncols() {
            return Err(Error::Dimension(format!("U is {}x{}", u.nrows(), u.ncols())));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("U has non-finite entries"));
        }
        let u = symmetrize(&u);
        let lmin = min_eigenvalue(&u);
        let lmax = -min_eigenvalue(&(-&u));
        if lmin < -1e-8 * lmax.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::validation(format!("U is not PSD (eigenvalue {lmin:.3e})")));
        }
        Ok(Self(u))
    }

    pub fn zeros(cells: usize) -> Self {
        Self(DMatrix::zeros(cells, cells))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Inverse of one cell block of `V`.
#[derive(Debug, Clone)]
enum CellInverse {
    Diagonal(Vec<f64>),
    Dense(Cholesky<f64, Dyn>),
}

/// `Σ = V + Z U Zᵀ` together with the factors used by every solve.
#[derive(Debug, Clone)]
pub struct StructuredCovariance {
    v: ResidualCov,
    u: RandomEffectCov,
    inv: Vec<CellInverse>,
    /// `V_c⁻¹ 1`, stacked over cells.
    h: Vec<f64>,
    /// `1ᵀ V_c⁻¹ 1`.
    d: Vec<f64>,
    logdet_v: f64,
    /// `L (I + Lᵀ D L)⁻¹ Lᵀ`, the posterior covariance of `γ`.
    k: DMatrix<f64>,
    logdet_a: f64,
}

impl StructuredCovariance {
    /// Requires every variance positive and every block positive definite.
    pub fn new(v: ResidualCov, u: RandomEffectCov) -> Result<Self> {
        let layout = v.layout().clone();
        let nc = layout.n_cells();
        if u.dim() != nc {
            return Err(Error::Dimension(format!("U is {0}x{0}, layout has {nc} cells", u.dim())));
        }
        let mut inv = Vec::with_capacity(nc);
        let mut h = vec![0.0; layout.n_edges()];
        let mut d = vec![0.0; nc];
        let mut logdet_v = 0.0;
        for c in 0..nc {
            let r = layout.range(c);
            let n = r.len();
            match &v {
                ResidualCov::Block { blocks, .. } => {
                    let chol = blocks[c].clone().cholesky().ok_or_else(|| {
                        Error::Numerical(format!("V block of cell {c} is not positive definite"))
                    })?;
                    logdet_v += 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
                    let hc = chol.solve(&DVector::from_element(n, 1.0));
                    d[c] = hc.sum();
                    h[r].copy_from_slice(hc.as_slice());
                    inv.push(CellInverse::Dense(chol));
                }
                _ => {
                    let mut iv = Vec::with_capacity(n);
                    for e in r.clone() {
                        let var = v.edge_variance(e);
                        if !(var > 0.0) {
                            return Err(Error::Numerical(format!(
                                "residual variance of edge {e} is {var}"
                            )));
                        }
                        logdet_v += var.ln();
                        iv.push(1.0 / var);
                    }
                    d[c] = iv.iter().sum();
                    h[r].copy_from_slice(&iv);
                    inv.push(CellInverse::Diagonal(iv));
                }
            }
        }
        let l = low_rank_factor(u.matrix(), U_RANK_CUTOFF);
        let rank = l.ncols();
        let (k, logdet_a) = if rank == 0 {
            (DMatrix::zeros(nc, nc), 0.0)
        } else {
            let dl = DMatrix::from_fn(nc, rank, |i, j| d[i] * l[(i, j)]);
            let a = DMatrix::identity(rank, rank) + l.transpose() * dl;
            let chol = symmetrize(&a)
                .cholesky()
                .ok_or_else(|| Error::Numerical("inner Woodbury matrix is not PD".into()))?;
            let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let x = chol.solve(&l.transpose());
            (symmetrize(&(&l * x)), logdet_a)
        };
        Ok(Self {
            v,
            u,
            inv,
            h,
            d,
            logdet_v,
            k,
            logdet_a,
        })
    }

    pub fn v(&self) -> &ResidualCov {
        &self.v
    }

    pub fn u(&self) -> &RandomEffectCov {
        &self.u
    }

    pub fn layout(&self) -> &CellLayout {
        self.v.layout()
    }

    /// Posterior covariance of `γ_m` given `y_m`: `U − U Zᵀ Σ⁻¹ Z U`.
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// `V_c⁻¹ 1` for cell `c`.
    pub fn h(&self, c: usize) -> &[f64] {
        &self.h[self.layout().range(c)]
    }

    /// `1ᵀ V_c⁻¹ 1` for every cell.
    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn logdet_v(&self) -> f64 {
        self.logdet_v
    }

    /// `V_c⁻¹ x` for a cell-local vector.
    pub fn v_solve_cell(&self, c: usize, x: &[f64]) -> Vec<f64> {
        match &self.inv[c] {
            CellInverse::Diagonal(iv) => x.iter().zip(iv).map(|(a, b)| a * b).collect(),
            CellInverse::Dense(chol) => chol.solve(&DVector::from_column_slice(x)).data.into(),
        }
    }

    /// `V_c⁻¹ X` for a cell-local matrix (rows = cell edges).
    pub fn v_solve_cell_matrix(&self, c: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.inv[c] {
            CellInverse::Diagonal(iv) => {
                DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * iv[i])
            }
            CellInverse::Dense(chol) => chol.solve(x),
        }
    }

    /// `V⁻¹ b`.
    pub fn v_solve(&self, b: &[f64]) -> Vec<f64> {
        let layout = self.layout();
        let mut out = vec![0.0; b.len()];
        for c in 0..layout.n_cells() {
            let r = layout.range(c);
            let t = self.v_solve_cell(c, &b[r.clone()]);
            out[r].copy_from_slice(&t);
        }
        out
    }

    /// `Zᵀ b`: per-cell sums.
    pub fn z_t(&self, b: &[f64]) -> Vec<f64> {
        let layout = self.layout();
        (0..layout.n_cells())
            .map(|c| b[layout.range(c)].iter().sum())
            .collect()
    }

    /// `Σ⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.layout().n_edges() {
            return Err(Error::Dimension(format!(
                "vector of length {} for {} edges",
                b.len(),
                self.layout().n_edges()
            )));
        }
        let mut t = self.v_solve(b);
        let w = DVector::from_vec(self.z_t(&t));
        let kw = &self.k * w;
        let layout = self.layout();
        for c in 0..layout.n_cells() {
            let s = kw[c];
            if s != 0.0 {
                for e in layout.range(c) {
                    t[e] -= s * self.h[e];
                }
            }
        }
        Ok(t)
    }

    /// `Σ⁻¹ B`, column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col: Vec<f64> = b.column(j).iter().cloned().collect();
            out.set_column(j, &DVector::from_vec(self.solve(&col)?));
        }
        Ok(out)
    }

    /// `log det Σ = log det V + log det(I + Lᵀ D L)`.
    pub fn logdet(&self) -> f64 {
        self.logdet_v + self.logdet_a
    }

    /// `rᵀ Σ⁻¹ r` together with `w = Zᵀ V⁻¹ r`.
    pub fn quad_form(&self, r: &[f64]) -> (f64, Vec<f64>) {
        let t = self.v_solve(r);
        let q: f64 = r.iter().zip(&t).map(|(a, b)| a * b).sum();
        let w = self.z_t(&t);
        let wv = DVector::from_column_slice(&w);
        (q - wv.dot(&(&self.k * &wv)), w)
    }

    /// Posterior mean `E[γ | r] = K Zᵀ V⁻¹ r` for a residual `r = y − Xα`.
    pub fn posterior_mean(&self, r: &[f64]) -> Vec<f64> {
        let w = DVector::from_vec(self.z_t(&self.v_solve(r)));
        (&self.k * w).data.into()
    }

    /// `Σ b`.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let mut out = self.v.apply(b);
        let zb = DVector::from_vec(self.z_t(b));
        let uzb = self.u.matrix() * zb;
        let layout = self.layout();
        for c in 0..layout.n_cells() {
            for e in layout.range(c) {
                out[e] += uzb[c];
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = self.v.to_dense();
        let layout = self.layout();
        let u = self.u.matrix();
        for c in 0..layout.n_cells() {
            for c2 in 0..layout.n_cells() {
                for e in layout.range(c) {
                    for e2 in layout.range(c2) {
                        m[(e, e2)] += u[(c, c2)];
                    }
                }
            }
        }
        m
    }
}
