//! Per-microphone KNN graphs over clean RTF features and the attachment of
//! noisy query nodes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rtf::RtfFeature;

pub const DEFAULT_K: usize = 5;

/// Clean features of `N` positions: for every non-reference microphone row an
/// `N x d` matrix, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    ids: Vec<usize>,
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureBank {
    pub fn new(ids: Vec<usize>, features: &[RtfFeature]) -> Result<Self> {
        if ids.len() != features.len() || ids.is_empty() {
            return Err(Error::Shape(format!(
                "{} ids for {} feature sets",
                ids.len(),
                features.len()
            )));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate position id in bank".into()));
        }
        let (rows, dim) = (features[0].rows(), features[0].dim());
        if features.iter().any(|f| f.rows() != rows || f.dim() != dim) {
            return Err(Error::Shape("feature sets differ in shape".into()));
        }
        let data = features.iter().flat_map(|f| f.data().iter().copied()).collect();
        Ok(Self { ids, rows, dim, data })
    }

    /// Bank from raw node-major values `[node][row][d]`.
    pub fn from_raw(ids: Vec<usize>, rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * rows * dim || ids.is_empty() {
            return Err(Error::Shape(format!(
                "{} values for {} nodes x {rows} rows x {dim}",
                data.len(),
                ids.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite bank entry".into()));
        }
        Ok(Self { ids, rows, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Non-reference microphone count.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn feature(&self, node: usize, row: usize) -> &[f64] {
        let start = (node * self.rows + row) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn index_of(&self, id: usize) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| *x == id)
            .ok_or(Error::UnknownPosition(id))
    }

    /// Copy without the given nodes.
    pub fn without(&self, excluded: &[usize]) -> FeatureBank {
        let keep: Vec<usize> = (0..self.len()).filter(|i| !excluded.contains(i)).collect();
        let stride = self.rows * self.dim;
        FeatureBank {
            ids: keep.iter().map(|i| self.ids[*i]).collect(),
            rows: self.rows,
            dim: self.dim,
            data: keep
                .iter()
                .flat_map(|i| self.data[i * stride..(i + 1) * stride].iter().copied())
                .collect(),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest candidates by (distance, position id).
fn nearest(
    bank: &FeatureBank,
    row: usize,
    query: &[f64],
    k: usize,
    skip: impl Fn(usize) -> bool,
) -> Vec<(usize, f64)> {
    let mut cands: Vec<(usize, f64)> = (0..bank.len())
        .filter(|j| !skip(*j))
        .map(|j| (j, squared_distance(query, bank.feature(j, row))))
        .collect();
    cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(bank.ids[a.0].cmp(&bank.ids[b.0])));
    cands.truncate(k);
    cands.into_iter().map(|(j, d2)| (j, d2.sqrt())).collect()
}

/// Directed KNN graph per microphone row: `neighbors[row][node]` lists the
/// node's `k` in-neighbors (bank indices), nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<Vec<usize>>>,
}

impl ManifoldGraph {
    pub fn neighbors(&self, row: usize, node: usize) -> &[usize] {
        &self.neighbors[row][node]
    }
}

/// Exhaustive Euclidean KNN over each microphone's clean features; ties go to
/// the smaller position id.
pub fn build_knn_graph(bank: &FeatureBank, k: usize) -> Result<ManifoldGraph> {
    if k == 0 || k >= bank.len() {
        return Err(Error::InvalidInput(format!(
            "K = {k} needs 0 < K < {} bank nodes",
            bank.len()
        )));
    }
    let neighbors = (0..bank.rows())
        .map(|row| {
            (0..bank.len())
                .into_par_iter()
                .map(|i| {
                    nearest(bank, row, bank.feature(i, row), k, |j| j == i)
                        .into_iter()
                        .map(|(j, _)| j)
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ManifoldGraph { k, neighbors })
}

/// A query node's in-neighbors for each microphone row. `None` marks the
/// query itself (used only by the self-neighbor ablation).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAttachment {
    pub query: RtfFeature,
    pub neighbors: Vec<Vec<Option<usize>>>,
    pub distances: Vec<Vec<f64>>,
}

impl QueryAttachment {
    /// Each row's only neighbor is the query itself.
    pub fn self_only(query: RtfFeature) -> Self {
        let rows = query.rows();
        Self {
            query,
            neighbors: vec![vec![None]; rows],
            distances: vec![vec![0.0]; rows],
        }
    }

    /// Neighbor feature vectors of `row` keyed by position id, ascending. The
    /// query itself carries id `usize::MAX`.
    pub fn neighbor_features<'a>(&'a self, bank: &'a FeatureBank, row: usize) -> Vec<(usize, &'a [f64])> {
        let mut out: Vec<(usize, &[f64])> = self.neighbors[row]
            .iter()
            .map(|n| match n {
                Some(i) => (bank.ids()[*i], bank.feature(*i, row)),
                None => (usize::MAX, self.query.row(row)),
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn check_query(bank: &FeatureBank, query: &RtfFeature) -> Result<()> {
    if query.dim() != bank.dim() || query.rows() != bank.rows() {
        return Err(Error::Shape(format!(
            "query {}x{} vs bank {}x{}",
            query.rows(),
            query.dim(),
            bank.rows(),
            bank.dim()
        )));
    }
    Ok(())
}

/// Connects a noisy query to its `k` nearest clean nodes per microphone.
pub fn attach_query(bank: &FeatureBank, query: &RtfFeature, k: usize) -> Result<QueryAttachment> {
    attach_excluding(bank, query, k, None)
}

fn attach_excluding(bank: &FeatureBank, query: &RtfFeature, k: usize, excluded: Option<usize>) -> Result<QueryAttachment> {
    check_query(bank, query)?;
    let available = bank.len() - excluded.is_some() as usize;
    if k == 0 || k > available {
        return Err(Error::InvalidInput(format!(
            "K = {k} needs 0 < K <= {available} candidates"
        )));
    }
    let mut neighbors = Vec::with_capacity(bank.rows());
    let mut distances = Vec::with_capacity(bank.rows());
    for row in 0..bank.rows() {
        let found = nearest(bank, row, query.row(row), k, |j| Some(j) == excluded);
        neighbors.push(found.iter().map(|(j, _)| Some(*j)).collect());
        distances.push(found.iter().map(|(_, d)| *d).collect());
    }
    Ok(QueryAttachment {
        query: query.clone(),
        neighbors,
        distances,
    })
}

/// Training example for position `position_id`: its clean node leaves the
/// candidate set and the noisy features attach to the remaining nodes.
pub fn leave_one_out(bank: &FeatureBank, position_id: usize, noisy: &RtfFeature, k: usize) -> Result<QueryAttachment> {
    let idx = bank.index_of(position_id)?;
    attach_excluding(bank, noisy, k, Some(idx))
}

/// The clean graph with `position_id` removed, as seen by a leave-one-out
/// example. Bank indices in the result refer to the reduced bank.
pub fn leave_one_out_graph(bank: &FeatureBank, position_id: usize, k: usize) -> Result<(FeatureBank, ManifoldGraph)> {
    let idx = bank.index_of(position_id)?;
    let reduced = bank.without(&[idx]);
    let graph = build_knn_graph(&reduced, k)?;
    Ok((reduced, graph))
}
