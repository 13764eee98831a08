//! K-nearest-neighbor pixel graphs and their normalized propagation matrices.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{CsrMatrix, Real, Tensor};

/// Which coordinates enter the KNN distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// The pixel's spectral vector only.
    #[default]
    Spectral,
    /// The spectral vector with `(row, col) · spatial_weight` appended.
    SpectralSpatial,
}

/// Operator used to propagate node features in a graph convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// `L_sym = I − D^(−1/2) A D^(−1/2)`.
    #[default]
    Laplacian,
    /// `D̃^(−1/2) (A + I) D̃^(−1/2)` with `D̃ = D + I`.
    RenormAdjacency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
    pub feature_space: FeatureSpace,
    pub spatial_weight: f64,
    /// Node count above which the graph is built per contiguous block of pixels.
    pub max_nodes: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { k: 10, feature_space: FeatureSpace::Spectral, spatial_weight: 1.0, max_nodes: 65_536 }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("graph k must be at least 1".into()));
        }
        if self.max_nodes <= self.k {
            return Err(Error::Config(format!("graph max_nodes {} must exceed k = {}", self.max_nodes, self.k)));
        }
        if !self.spatial_weight.is_finite() || self.spatial_weight < 0.0 {
            return Err(Error::Config("spatial_weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Undirected pixel graph with cached degree-normalized operators.
#[derive(Clone, Debug)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    neighbors: Vec<Vec<usize>>,
    adjacency: CsrMatrix,
    degrees: Vec<usize>,
    laplacian: Arc<CsrMatrix>,
}

impl KnnGraph {
    /// Builds a graph from an explicit undirected edge list. `k` is recorded
    /// as metadata only.
    pub fn from_edges(n: usize, k: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(dim_err!("edge ({a}, {b}) outside {n} nodes"));
            }
            if a == b {
                return Err(Error::Data(format!("self-loop on node {a}")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let entries: Vec<(usize, usize, Real)> =
            neighbors.iter().enumerate().flat_map(|(i, list)| list.iter().map(move |&j| (i, j, 1.0))).collect();
        let adjacency = CsrMatrix::from_triplets(n, n, &entries)?;
        let degrees: Vec<usize> = neighbors.iter().map(Vec::len).collect();
        let laplacian = Arc::new(laplacian_from_parts(&neighbors, &degrees)?);
        Ok(KnnGraph { n, k, neighbors, adjacency, degrees, laplacian })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Sorted neighbor list `N(i)` (self excluded).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `N(i) ∪ {i}`, sorted.
    pub fn closed_neighborhood(&self, i: usize) -> Vec<usize> {
        let mut v = self.neighbors[i].clone();
        let at = v.partition_point(|&j| j < i);
        v.insert(at, i);
        v
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn laplacian(&self) -> &Arc<CsrMatrix> {
        &self.laplacian
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.degrees.iter().sum::<usize>() / 2
    }

    /// The propagation matrix used by graph convolutions.
    pub fn propagation(&self, kind: Propagation) -> Arc<CsrMatrix> {
        match kind {
            Propagation::Laplacian => Arc::clone(&self.laplacian),
            Propagation::RenormAdjacency => {
                let scale: Vec<Real> = self.degrees.iter().map(|&d| 1.0 / ((d + 1) as Real).sqrt()).collect();
                let mut entries = Vec::with_capacity(self.adjacency.nnz() + self.n);
                for i in 0..self.n {
                    entries.push((i, i, scale[i] * scale[i]));
                    for &j in &self.neighbors[i] {
                        entries.push((i, j, scale[i] * scale[j]));
                    }
                }
                Arc::new(CsrMatrix::from_triplets(self.n, self.n, &entries).expect("in range"))
            }
        }
    }
}

fn laplacian_from_parts(neighbors: &[Vec<usize>], degrees: &[usize]) -> Result<CsrMatrix> {
    let n = neighbors.len();
    if let Some(i) = degrees.iter().position(|&d| d == 0) {
        return Err(Error::Data(format!("node {i} is isolated; the normalized Laplacian needs degree ≥ 1")));
    }
    let mut entries = Vec::with_capacity(n + degrees.iter().sum::<usize>());
    for i in 0..n {
        entries.push((i, i, 1.0));
        for &j in &neighbors[i] {
            let dd = (degrees[i] * degrees[j]) as Real;
            entries.push((i, j, -1.0 / dd.sqrt()));
        }
    }
    CsrMatrix::from_triplets(n, n, &entries)
}

/// `L_sym = I − D^(−1/2) A D^(−1/2)` of a graph.
pub fn sym_normalized_laplacian(graph: &KnnGraph) -> Result<CsrMatrix> {
    laplacian_from_parts(&graph.neighbors, &graph.degrees)
}

/// Exact sparse-dense product.
pub fn spmv(mat: &CsrMatrix, x: &Tensor) -> Result<Tensor> {
    mat.matmul_dense(x)
}

/// Per-pixel feature rows for graph construction from an M×N×B raster.
pub fn graph_features(raster: &Tensor, cfg: &GraphConfig) -> Result<Tensor> {
    let (m, n, b) = match *raster.shape() {
        [m, n, b] => (m, n, b),
        ref s => return Err(dim_err!("expected an M×N×B raster, got {:?}", s)),
    };
    match cfg.feature_space {
        FeatureSpace::Spectral => raster.reshape([m * n, b]),
        FeatureSpace::SpectralSpatial => {
            let w = cfg.spatial_weight as Real;
            let mut out = Vec::with_capacity(m * n * (b + 2));
            for (p, px) in raster.data().chunks(b).enumerate() {
                out.extend_from_slice(px);
                out.push((p / n) as Real * w);
                out.push((p % n) as Real * w);
            }
            Tensor::new([m * n, b + 2], out)
        }
    }
}

/// Directed k-nearest neighbors of `query` within `rows`, by squared
/// Euclidean distance with ties broken toward the lower node index.
fn k_nearest(data: &[Real], d: usize, rows: std::ops::Range<usize>, query: usize, k: usize) -> Vec<usize> {
    let q = &data[query * d..(query + 1) * d];
    let mut cand: Vec<(Real, usize)> = rows
        .filter(|&j| j != query)
        .map(|j| {
            let dist = data[j * d..(j + 1) * d].iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<Real>();
            (dist, j)
        })
        .collect();
    let order =
        |a: &(Real, usize), b: &(Real, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Builds the symmetrized KNN graph over the rows of an n×d feature matrix.
///
/// Each node selects its `k` nearest distinct nodes; an undirected edge is kept
/// when either endpoint selected the other. When `n` exceeds `cfg.max_nodes`
/// the rows are split into contiguous blocks of near-equal size and neighbors
/// are searched within each block only.
pub fn build_knn_graph(features: &Tensor, cfg: &GraphConfig) -> Result<KnnGraph> {
    cfg.validate()?;
    let (n, d) = features.dims2()?;
    if d == 0 {
        return Err(dim_err!("graph features need at least one column"));
    }
    if n <= cfg.k {
        return Err(Error::Config(format!("KNN graph with k = {} needs more than {} nodes, got {n}", cfg.k, cfg.k)));
    }
    let data = features.data();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite feature value at pixel {} (column {})", pos / d, pos % d)));
    }
    let blocks = n.div_ceil(cfg.max_nodes);
    let mut edges = Vec::with_capacity(n * cfg.k);
    for b in 0..blocks {
        let rows = (b * n / blocks)..((b + 1) * n / blocks);
        if rows.len() <= cfg.k {
            return Err(Error::Config(format!("graph block of {} nodes is too small for k = {}", rows.len(), cfg.k)));
        }
        for i in rows.clone() {
            for j in k_nearest(data, d, rows.clone(), i, cfg.k) {
                edges.push((i.min(j), i.max(j)));
            }
        }
    }
    if blocks > 1 {
        log::info!("built KNN graph over {n} nodes in {blocks} blocks");
    }
    KnnGraph::from_edges(n, cfg.k, &edges)
}
