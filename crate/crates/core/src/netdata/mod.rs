//! Multi-subject network data: node sets, community partitions and the cell
//! structure they induce, per-subject edge vectors, and the fixed- and
//! random-effect design matrices.
//!
//! A partition of `n` nodes into `K` communities induces up to `K(K+1)/2`
//! cells, one per unordered community pair `(a, b)` with `a <= b`. Every
//! unordered node pair belongs to exactly one cell. Edges are stored in a
//! canonical order: cells row-major over `(a, b)`, and within a cell
//! lexicographically by `(min node, max node)`.

pub mod io;

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ordered list of node identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl NodeSet {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::validation(format!(
                "a network needs at least 2 nodes, got {}",
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate node id '{id}'")));
            }
        }
        Ok(Self { ids, index })
    }

    /// Nodes named `0..n`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// An unordered pair of communities, `a <= b`, as 0-based community indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub a: usize,
    pub b: usize,
}

impl Cell {
    pub fn new(a: usize, b: usize) -> Self {
        if a <= b {
            Cell { a, b }
        } else {
            Cell { a: b, b: a }
        }
    }

    pub fn is_within(&self) -> bool {
        self.a == self.b
    }
}

/// Cell boundaries in the stacked edge vector. Cell `c` occupies
/// `offsets[c]..offsets[c + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLayout {
    offsets: Vec<usize>,
}

impl CellLayout {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &s in sizes {
            if s == 0 {
                return Err(Error::validation("cell layouts cannot contain empty cells"));
            }
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Self { offsets })
    }

    pub fn n_cells(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn size(&self, c: usize) -> usize {
        self.offsets[c + 1] - self.offsets[c]
    }

    pub fn range(&self, c: usize) -> std::ops::Range<usize> {
        self.offsets[c]..self.offsets[c + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Cell index of every edge.
    pub fn edge_cells(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_edges());
        for c in 0..self.n_cells() {
            out.extend(std::iter::repeat_n(c, self.size(c)));
        }
        out
    }
}

/// Node-to-community assignment together with the induced cells and the
/// canonical edge ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPartition {
    labels: Vec<usize>,
    community_names: Vec<String>,
    community_sizes: Vec<usize>,
    cells: Vec<Cell>,
    layout: CellLayout,
    edges: Vec<(usize, usize)>,
    edge_cell: Vec<usize>,
    pair_to_edge: Vec<u32>,
    cell_lookup: Vec<Option<usize>>,
}

const NO_EDGE: u32 = u32::MAX;

impl CellPartition {
    /// Build from 0-based community indices. Every index in `0..names.len()`
    /// must be used by at least one node.
    pub fn from_indices(labels: Vec<usize>, community_names: Vec<String>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::validation("empty label list"));
        }
        let k = community_names.len();
        let mut community_sizes = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::validation(format!(
                    "node {i} has community index {l} but only {k} communities are named"
                )));
            }
            community_sizes[l] += 1;
        }
        if let Some(a) = community_sizes.iter().position(|&s| s == 0) {
            return Err(Error::validation(format!(
                "community '{}' has no nodes",
                community_names[a]
            )));
        }

        let mut cell_lookup = vec![None; k * k];
        let mut cells = Vec::new();
        for a in 0..k {
            for b in a..k {
                let size = cell_size(&community_sizes, a, b);
                if size > 0 {
                    cell_lookup[a * k + b] = Some(cells.len());
                    cell_lookup[b * k + a] = Some(cells.len());
                    cells.push(Cell { a, b });
                }
            }
        }

        let mut per_cell: Vec<Vec<(usize, usize)>> = cells
            .iter()
            .map(|c| Vec::with_capacity(cell_size(&community_sizes, c.a, c.b)))
            .collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let c = cell_lookup[labels[i] * k + labels[j]].expect("nonempty cell");
                per_cell[c].push((i, j));
            }
        }
        let sizes: Vec<usize> = per_cell.iter().map(Vec::len).collect();
        let layout = CellLayout::from_sizes(&sizes)?;

        let mut edges = Vec::with_capacity(layout.n_edges());
        let mut edge_cell = Vec::with_capacity(layout.n_edges());
        let mut pair_to_edge = vec![NO_EDGE; n * n];
        for (c, list) in per_cell.into_iter().enumerate() {
            for (i, j) in list {
                let e = edges.len() as u32;
                pair_to_edge[i * n + j] = e;
                pair_to_edge[j * n + i] = e;
                edges.push((i, j));
                edge_cell.push(c);
            }
        }

        Ok(Self {
            labels,
            community_names,
            community_sizes,
            cells,
            layout,
            edges,
            edge_cell,
            pair_to_edge,
            cell_lookup,
        })
    }

    /// Build from arbitrary community labels (strings). Communities are
    /// ordered numerically when every label parses as a number, otherwise
    /// lexicographically.
    pub fn from_names<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::validation("empty label list"));
        }
        let mut distinct: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
        distinct.sort();
        distinct.dedup();
        let numeric: Option<Vec<f64>> = distinct.iter().map(|s| s.parse::<f64>().ok()).collect();
        if let Some(values) = &numeric {
            if let Some(bad) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::validation(format!(
                    "community label '{}' must be finite and non-negative",
                    distinct[bad]
                )));
            }
            let mut paired: Vec<(f64, String)> = values.iter().cloned().zip(distinct).collect();
            paired.sort_by(|x, y| x.0.total_cmp(&y.0));
            distinct = paired.into_iter().map(|(_, s)| s).collect();
        }
        let pos: HashMap<&str, usize> = distinct
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let idx = labels.iter().map(|s| pos[s.as_ref()]).collect();
        Self::from_indices(idx, distinct)
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn n_communities(&self) -> usize {
        self.community_names.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn community_names(&self) -> &[String] {
        &self.community_names
    }

    pub fn community_sizes(&self) -> &[usize] {
        &self.community_sizes
    }

    /// Nonempty cells in canonical order.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn layout(&self) -> &CellLayout {
        &self.layout
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Node pair of every edge in canonical order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_cell(&self, e: usize) -> usize {
        self.edge_cell[e]
    }

    pub fn cell_size(&self, c: usize) -> usize {
        self.layout.size(c)
    }

    /// Index of the cell for communities `(a, b)`, if nonempty.
    pub fn cell_index(&self, a: usize, b: usize) -> Option<usize> {
        let k = self.n_communities();
        if a >= k || b >= k {
            return None;
        }
        self.cell_lookup[a * k + b]
    }

    /// Canonical edge index of the node pair `(i, j)`, `i != j`.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let n = self.n_nodes();
        if i >= n || j >= n {
            return None;
        }
        match self.pair_to_edge[i * n + j] {
            NO_EDGE => None,
            e => Some(e as usize),
        }
    }

    /// Human-readable cell label such as `(3,5)`.
    pub fn cell_name(&self, c: usize) -> String {
        let cell = self.cells[c];
        format!(
            "({},{})",
            self.community_names[cell.a], self.community_names[cell.b]
        )
    }
}

fn cell_size(sizes: &[usize], a: usize, b: usize) -> usize {
    if a == b {
        sizes[a] * sizes[a].saturating_sub(1) / 2
    } else {
        sizes[a] * sizes[b]
    }
}

/// Partition from integer community labels, relabelled to consecutive
/// indices in ascending label order. A community with a single node has an
/// empty within-cell, which is omitted from the cell list.
pub fn build_partition(labels: &[i64]) -> Result<CellPartition> {
    if labels.is_empty() {
        return Err(Error::validation("empty label list"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l < 0) {
        return Err(Error::validation(format!(
            "community labels must be non-negative, got {bad}"
        )));
    }
    let mut distinct: Vec<i64> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let idx = labels
        .iter()
        .map(|l| distinct.binary_search(l).unwrap())
        .collect();
    CellPartition::from_indices(idx, distinct.iter().map(|l| l.to_string()).collect())
}

/// One subject's symmetric weight matrix and covariate vector (leading 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectNetwork {
    pub id: String,
    weights: DMatrix<f64>,
    covariates: Vec<f64>,
}

impl SubjectNetwork {
    /// Validates symmetry (to 1e-8) and finiteness of off-diagonal entries.
    /// The diagonal is ignored and stored as zero.
    pub fn new(id: impl Into<String>, weights: DMatrix<f64>, covariates: Vec<f64>) -> Result<Self> {
        let id = id.into();
        let n = weights.nrows();
        if weights.ncols() != n {
            return Err(Error::Dimension(format!(
                "subject '{id}': weight matrix is {}x{}",
                n,
                weights.ncols()
            )));
        }
        let mut w = weights;
        for i in 0..n {
            w[(i, i)] = 0.0;
            for j in (i + 1)..n {
                let (x, y) = (w[(i, j)], w[(j, i)]);
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::validation(format!(
                        "subject '{id}': non-finite weight at ({i},{j})"
                    )));
                }
                if (x - y).abs() > 1e-8 {
                    return Err(Error::validation(format!(
                        "subject '{id}': weights ({i},{j})={x} and ({j},{i})={y} differ"
                    )));
                }
                let s = 0.5 * (x + y);
                w[(i, j)] = s;
                w[(j, i)] = s;
            }
        }
        if covariates.is_empty() || covariates[0] != 1.0 {
            return Err(Error::validation(format!(
                "subject '{id}': covariate vector must start with the intercept 1"
            )));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("subject '{id}': non-finite covariate")));
        }
        Ok(Self {
            id,
            weights: w,
            covariates,
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.nrows()
    }
}

/// `N` subjects over a shared node set and partition.
#[derive(Debug, Clone)]
pub struct NetworkPopulation {
    nodes: NodeSet,
    partition: Arc<CellPartition>,
    subjects: Vec<SubjectNetwork>,
    covariate_names: Vec<String>,
}

impl NetworkPopulation {
    pub fn new(
        nodes: NodeSet,
        partition: CellPartition,
        subjects: Vec<SubjectNetwork>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if nodes.len() != partition.n_nodes() {
            return Err(Error::Dimension(format!(
                "{} nodes but partition labels {}",
                nodes.len(),
                partition.n_nodes()
            )));
        }
        if subjects.len() < 2 {
            return Err(Error::validation(format!(
                "need at least 2 subjects, got {}",
                subjects.len()
            )));
        }
        let p = covariate_names.len();
        for s in &subjects {
            if s.n_nodes() != nodes.len() {
                return Err(Error::Dimension(format!(
                    "subject '{}' has {} nodes, expected {}",
                    s.id,
                    s.n_nodes(),
                    nodes.len()
                )));
            }
            if s.covariates().len() != p {
                return Err(Error::Dimension(format!(
                    "subject '{}' has {} covariates, expected {p}",
                    s.id,
                    s.covariates().len()
                )));
            }
        }
        Ok(Self {
            nodes,
            partition: Arc::new(partition),
            subjects,
            covariate_names,
        })
    }

    pub fn nodes(&self) -> &NodeSet {
        &self.nodes
    }

    pub fn partition(&self) -> &CellPartition {
        &self.partition
    }

    pub fn subjects(&self) -> &[SubjectNetwork] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Same subjects under a different partition of the same nodes.
    pub fn with_partition(&self, partition: CellPartition) -> Result<Self> {
        Self::new(
            self.nodes.clone(),
            partition,
            self.subjects.clone(),
            self.covariate_names.clone(),
        )
    }

    /// Subset of subjects, in the given order.
    pub fn select_subjects(&self, idx: &[usize]) -> Result<Self> {
        let subjects = idx.iter().map(|&i| self.subjects[i].clone()).collect();
        Self::new(
            self.nodes.clone(),
            (*self.partition).clone(),
            subjects,
            self.covariate_names.clone(),
        )
    }

    /// Replace every subject's covariate vector.
    pub fn with_covariates(&self, names: Vec<String>, covariates: Vec<Vec<f64>>) -> Result<Self> {
        if covariates.len() != self.subjects.len() {
            return Err(Error::Dimension("one covariate vector per subject".into()));
        }
        let subjects = self
            .subjects
            .iter()
            .zip(covariates)
            .map(|(s, x)| SubjectNetwork::new(s.id.clone(), s.weights.clone(), x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.nodes.clone(), (*self.partition).clone(), subjects, names)
    }
}

/// Stacked edge-weight vector `y_m` in canonical edge order.
pub fn vectorize(weights: &DMatrix<f64>, partition: &CellPartition) -> Result<Vec<f64>> {
    let n = partition.n_nodes();
    if weights.nrows() != n || weights.ncols() != n {
        return Err(Error::Dimension(format!(
            "matrix is {}x{} but partition has {n} nodes",
            weights.nrows(),
            weights.ncols()
        )));
    }
    Ok(partition.edges().iter().map(|&(i, j)| weights[(i, j)]).collect())
}

/// Inverse of [`vectorize`]: symmetric matrix with zero diagonal.
pub fn devectorize(y: &[f64], partition: &CellPartition) -> Result<DMatrix<f64>> {
    if y.len() != partition.n_edges() {
        return Err(Error::Dimension(format!(
            "edge vector has length {} but partition has {} edges",
            y.len(),
            partition.n_edges()
        )));
    }
    let n = partition.n_nodes();
    let mut w = DMatrix::zeros(n, n);
    for (&(i, j), &v) in partition.edges().iter().zip(y) {
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    Ok(w)
}

/// Fisher's z-transform `½ log((1 + r) / (1 − r))` of a correlation.
pub fn fisher_z(r: f64) -> Result<f64> {
    if !(r.abs() < 1.0) {
        return Err(Error::validation(format!(
            "Fisher transform needs |r| < 1, got {r}"
        )));
    }
    Ok(r.atanh())
}

/// Which covariates carry edge-level deviations `η`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanModel {
    /// Every covariate has a cell effect plus sum-to-zero edge deviations.
    #[default]
    EdgeEffects,
    /// Only the intercept varies by edge; other covariates act at cell level.
    CellEffects,
}

/// Fixed- and random-effect designs. `Z` and the block-diagonal `X_m` are
/// kept implicit (they are `Σn_ab` wide); dense forms are available for
/// small instances.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    partition: Arc<CellPartition>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    edge_covariates: usize,
}

impl DesignMatrices {
    pub fn new(
        partition: Arc<CellPartition>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        model: MeanModel,
    ) -> Result<Self> {
        let p = covariates.ncols();
        if p == 0 || covariate_names.len() != p {
            return Err(Error::Dimension(format!(
                "{} covariate names for {p} covariate columns",
                covariate_names.len()
            )));
        }
        if covariates.nrows() < 2 {
            return Err(Error::validation("need at least 2 subjects"));
        }
        let edge_covariates = match model {
            MeanModel::EdgeEffects => p,
            MeanModel::CellEffects => 1,
        };
        Ok(Self {
            partition,
            covariates,
            covariate_names,
            edge_covariates,
        })
    }

    pub fn partition(&self) -> &CellPartition {
        &self.partition
    }

    pub fn shared_partition(&self) -> Arc<CellPartition> {
        Arc::clone(&self.partition)
    }

    pub fn layout(&self) -> &CellLayout {
        self.partition.layout()
    }

    /// `N × p` covariate matrix, one row `x_mᵀ` per subject.
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_subjects(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Number of leading covariates with edge-level deviations.
    pub fn edge_covariates(&self) -> usize {
        self.edge_covariates
    }

    pub fn mean_model(&self) -> MeanModel {
        if self.edge_covariates == self.n_covariates() {
            MeanModel::EdgeEffects
        } else {
            MeanModel::CellEffects
        }
    }

    /// `Σ_m x_m x_mᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.covariates.transpose() * &self.covariates
    }

    /// Number of `α` columns of cell `c`: `p` cell effects plus `q` deviations
    /// for every edge but the last.
    pub fn cell_coefficients(&self, c: usize) -> usize {
        self.n_covariates() + self.edge_covariates * (self.partition.cell_size(c) - 1)
    }

    pub fn n_coefficients(&self) -> usize {
        (0..self.partition.n_cells())
            .map(|c| self.cell_coefficients(c))
            .sum()
    }

    /// Dense `Z`: `Σn_ab × n_cells`, one 1 per row.
    pub fn z_dense(&self) -> DMatrix<f64> {
        let part = &self.partition;
        let mut z = DMatrix::zeros(part.n_edges(), part.n_cells());
        for e in 0..part.n_edges() {
            z[(e, part.edge_cell(e))] = 1.0;
        }
        z
    }

    /// Dense per-cell block `X^{ab}_m`. Row `i < n_ab − 1` carries `x_mᵀ`
    /// in the cell-effect columns and in the columns of deviation `i`; the
    /// last row carries `−x_mᵀ` in every deviation column.
    pub fn x_block(&self, m: usize, c: usize) -> DMatrix<f64> {
        let p = self.n_covariates();
        let q = self.edge_covariates;
        let nc = self.partition.cell_size(c);
        let x = self.covariates.row(m);
        let mut blk = DMatrix::zeros(nc, self.cell_coefficients(c));
        for i in 0..nc {
            for j in 0..p {
                blk[(i, j)] = x[j];
            }
            if nc == 1 {
                continue;
            }
            if i + 1 < nc {
                for j in 0..q {
                    blk[(i, p + q * i + j)] = x[j];
                }
            } else {
                for k in 0..nc - 1 {
                    for j in 0..q {
                        blk[(i, p + q * k + j)] = -x[j];
                    }
                }
            }
        }
        blk
    }

    /// Dense block-diagonal `X_m`.
    pub fn x_dense(&self, m: usize) -> DMatrix<f64> {
        let part = &self.partition;
        let mut x = DMatrix::zeros(part.n_edges(), self.n_coefficients());
        let mut col = 0;
        for c in 0..part.n_cells() {
            let blk = self.x_block(m, c);
            let r = part.layout().range(c);
            x.view_mut((r.start, col), (blk.nrows(), blk.ncols()))
                .copy_from(&blk);
            col += blk.ncols();
        }
        x
    }
}

/// Designs together with the stacked responses `y_m`; the input to every
/// estimator.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub designs: DesignMatrices,
    responses: Vec<Vec<f64>>,
}

impl ModelData {
    pub fn new(designs: DesignMatrices, responses: Vec<Vec<f64>>) -> Result<Self> {
        if responses.len() != designs.n_subjects() {
            return Err(Error::Dimension(format!(
                "{} response vectors for {} subjects",
                responses.len(),
                designs.n_subjects()
            )));
        }
        let d = designs.partition().n_edges();
        if let Some(bad) = responses.iter().position(|y| y.len() != d) {
            return Err(Error::Dimension(format!(
                "subject {bad}: response length {} but {d} edges",
                responses[bad].len()
            )));
        }
        Ok(Self { designs, responses })
    }

    pub fn from_population(pop: &NetworkPopulation, model: MeanModel) -> Result<Self> {
        let designs = build_designs_with(pop, model)?;
        let responses = pop
            .subjects()
            .iter()
            .map(|s| vectorize(s.weights(), pop.partition()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(designs, responses)
    }

    pub fn responses(&self) -> &[Vec<f64>] {
        &self.responses
    }

    pub fn n_subjects(&self) -> usize {
        self.responses.len()
    }

    pub fn partition(&self) -> &CellPartition {
        self.designs.partition()
    }

    pub fn layout(&self) -> &CellLayout {
        self.designs.layout()
    }

    /// Same responses re-indexed under another partition of the same nodes.
    pub fn repartition(&self, partition: Arc<CellPartition>) -> Result<Self> {
        let old = self.partition();
        if partition.n_nodes() != old.n_nodes() {
            return Err(Error::Dimension("partitions cover different node sets".into()));
        }
        let map: Vec<usize> = partition
            .edges()
            .iter()
            .map(|&(i, j)| old.edge_index(i, j).expect("complete edge set"))
            .collect();
        let responses = self
            .responses
            .iter()
            .map(|y| map.iter().map(|&e| y[e]).collect())
            .collect();
        let designs = DesignMatrices::new(
            partition,
            self.designs.covariates.clone(),
            self.designs.covariate_names.clone(),
            self.designs.mean_model(),
        )?;
        Self::new(designs, responses)
    }

    /// Same responses under a different mean model.
    pub fn with_mean_model(&self, model: MeanModel) -> Result<Self> {
        let designs = DesignMatrices::new(
            self.designs.shared_partition(),
            self.designs.covariates.clone(),
            self.designs.covariate_names.clone(),
            model,
        )?;
        Self::new(designs, self.responses.clone())
    }

    /// Same responses with a new covariate matrix.
    pub fn with_covariates(&self, covariates: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let designs = DesignMatrices::new(
            self.designs.shared_partition(),
            covariates,
            names,
            self.designs.mean_model(),
        )?;
        Self::new(designs, self.responses.clone())
    }

    /// Subset of subjects.
    pub fn select_subjects(&self, idx: &[usize]) -> Result<Self> {
        let cov = self.designs.covariates.select_rows(idx.iter());
        let responses = idx.iter().map(|&i| self.responses[i].clone()).collect();
        let designs = DesignMatrices::new(
            self.designs.shared_partition(),
            cov,
            self.designs.covariate_names.clone(),
            self.designs.mean_model(),
        )?;
        Self::new(designs, responses)
    }

    /// Back to matrix form.
    pub fn to_population(&self, nodes: NodeSet, ids: &[String]) -> Result<NetworkPopulation> {
        let subjects = self
            .responses
            .iter()
            .enumerate()
            .map(|(m, y)| {
                SubjectNetwork::new(
                    ids.get(m).cloned().unwrap_or_else(|| format!("s{m}")),
                    devectorize(y, self.partition())?,
                    self.designs.covariates.row(m).iter().cloned().collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkPopulation::new(
            nodes,
            self.partition().clone(),
            subjects,
            self.designs.covariate_names.clone(),
        )
    }
}

pub fn build_designs(pop: &NetworkPopulation) -> Result<DesignMatrices> {
    build_designs_with(pop, MeanModel::EdgeEffects)
}

pub fn build_designs_with(pop: &NetworkPopulation, model: MeanModel) -> Result<DesignMatrices> {
    let n = pop.n_subjects();
    let p = pop.n_covariates();
    let x = DMatrix::from_fn(n, p, |m, j| pop.subjects()[m].covariates()[j]);
    DesignMatrices::new(
        Arc::clone(&pop.partition),
        x,
        pop.covariate_names().to_vec(),
        model,
    )
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn vectorize_round_trip(labels in prop::collection::vec(0i64..4, 2..9), seed in 0u64..1000) {
            let p = build_partition(&labels).unwrap();
            let n = labels.len();
            prop_assert_eq!(p.n_edges(), n * (n - 1) / 2);
            let w = DMatrix::from_fn(n, n, |i, j| {
                if i == j { 0.0 } else { ((i.min(j) * 31 + i.max(j) * 7) as f64 + seed as f64).sin() }
            });
            let y = vectorize(&w, &p).unwrap();
            prop_assert_eq!(devectorize(&y, &p).unwrap(), w);
            let mut seen = vec![false; n * n];
            for &(i, j) in p.edges() {
                prop_assert!(i < j);
                prop_assert!(!seen[i * n + j]);
                seen[i * n + j] = true;
            }
            for c in 0..p.n_cells() {
                let cell = p.cells()[c];
                let s = p.community_sizes();
                let want = if cell.a == cell.b { s[cell.a] * (s[cell.a] - 1) / 2 } else { s[cell.a] * s[cell.b] };
                prop_assert_eq!(p.cell_size(c), want);
                let r = p.layout().range(c);
                prop_assert!(p.edges()[r].windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
