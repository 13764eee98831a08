//! The network's building blocks: graph convolution, graph neighbor max-pooling,
//! second-order pooling over pixels and over graph neighborhoods, and the
//! convolutional block used by the spatial streams.
//!
//! Layers are lightweight descriptors. Their tensors live in a [`ParamStore`]
//! under the layer's name, and every forward pass goes through a [`Forward`]
//! context so that the same code serves training, inference and gradient checks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::KnnGraph;
use crate::params::{glorot_uniform, init_batch_norm, Forward, ParamKind, ParamStore};
use crate::tensor::{CsrMatrix, Real, Tape, Tensor, Var};

/// Negative slope of the fusion head's leaky ReLU.
pub const LEAKY_SLOPE: Real = 0.01;

/// One graph convolution: batch-normalize the node features, propagate them
/// with the graph operator, then apply a dense map with a bias shared by all nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl GraphConvLayer {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        GraphConvLayer { name: name.into(), c_in, c_out }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let w = glorot_uniform(&[self.c_in, self.c_out], self.c_in, self.c_out, rng);
        store.insert(format!("{}.weight", self.name), ParamKind::Weight, w);
        store.insert(format!("{}.bias", self.name), ParamKind::Bias, Tensor::zeros([self.c_out]));
        init_batch_norm(store, &format!("{}.bn", self.name), self.c_in);
    }

    pub fn forward(&self, fwd: &mut Forward<'_, '_>, h: Var, propagation: &Arc<CsrMatrix>) -> Result<Var> {
        let (n, c) = dims2(fwd.tape, h)?;
        if n != propagation.rows() {
            return Err(dim_err!("graph convolution: {n} feature rows but the graph has {} nodes", propagation.rows()));
        }
        if c != self.c_in {
            return Err(dim_err!("graph convolution `{}` expects {} channels, got {c}", self.name, self.c_in));
        }
        let normed = fwd.batch_norm(&format!("{}.bn", self.name), h, 1)?;
        let spread = fwd.tape.spmv(propagation, normed)?;
        let w = fwd.param(&format!("{}.weight", self.name))?;
        let b = fwd.param(&format!("{}.bias", self.name))?;
        let z = fwd.tape.matmul(spread, w)?;
        fwd.tape.add_bias(z, b)
    }
}

/// Neighbor max-pooling: row `r` of the output is the elementwise maximum of
/// `h` over the closed neighborhood of `nodes[r]`.
pub fn graph_neighbor_maxpool(tape: &mut Tape, h: Var, graph: &KnnGraph, nodes: &[usize]) -> Result<Var> {
    check_rows(tape, h, graph)?;
    let groups = closed_neighborhoods(graph, nodes)?;
    tape.group_max_rows(h, &groups)
}

/// Closed neighborhoods `N(i) ∪ {i}` of the given nodes.
pub fn closed_neighborhoods(graph: &KnnGraph, nodes: &[usize]) -> Result<Vec<Vec<usize>>> {
    nodes
        .iter()
        .map(|&i| {
            if i >= graph.n() {
                Err(dim_err!("node {i} is outside a graph of {} nodes", graph.n()))
            } else {
                Ok(graph.closed_neighborhood(i))
            }
        })
        .collect()
}

/// A second-order statistic of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderDescriptor {
    /// Unscaled Gram matrix `HᵀH`.
    pub raw: Tensor,
    /// `raw / m` after elementwise signed square root.
    pub matrix: Tensor,
    /// Row-major flattening of `matrix`.
    pub vectorized: Tensor,
}

/// Second-order pooling of the rows of an m×c matrix.
pub fn sop(h_first: &Tensor) -> Result<SecondOrderDescriptor> {
    let (m, c) = h_first.dims2()?;
    if m == 0 {
        return Err(Error::Contract("second-order pooling needs at least one row".into()));
    }
    let raw = h_first.transpose()?.matmul(h_first)?;
    let mut tape = Tape::new();
    let x = tape.constant(h_first.clone());
    let out = tape.local_second_order(x, &Arc::new(vec![(0..m).collect()]))?;
    let vectorized = tape.value(out).reshape([c * c])?;
    let matrix = vectorized.reshape([c, c])?;
    Ok(SecondOrderDescriptor { raw, matrix, vectorized })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsopMode {
    /// One descriptor for the whole graph.
    Global,
    /// One descriptor per node, pooled over its closed neighborhood.
    #[default]
    PerNode,
}

/// Graph second-order pooling.
///
/// `Global` yields a 1×f² row. `PerNode` yields one f² row per entry of `nodes`.
pub fn gsop(tape: &mut Tape, h: Var, graph: &KnnGraph, mode: GsopMode, nodes: &[usize]) -> Result<Var> {
    check_rows(tape, h, graph)?;
    let groups = match mode {
        GsopMode::Global => vec![(0..graph.n()).collect()],
        GsopMode::PerNode => closed_neighborhoods(graph, nodes)?,
    };
    tape.local_second_order(h, &Arc::new(groups))
}

/// Every node of the graph, in order.
pub fn all_nodes(graph: &KnnGraph) -> Vec<usize> {
    (0..graph.n()).collect()
}

/// Convolution, batch normalization, stride-1 max-pooling and ReLU over an
/// H×W×C raster. The convolution carries no bias because normalization follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub pool: usize,
}

impl ConvBlock {
    pub fn new(name: impl Into<String>, kernel: usize, c_in: usize, c_out: usize) -> Self {
        ConvBlock { name: name.into(), kernel, c_in, c_out, pool: 2 }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let k = self.kernel;
        let fan_in = k * k * self.c_in;
        let fan_out = k * k * self.c_out;
        let w = glorot_uniform(&[k, k, self.c_in, self.c_out], fan_in, fan_out, rng);
        store.insert(format!("{}.weight", self.name), ParamKind::Weight, w);
        init_batch_norm(store, &format!("{}.bn", self.name), self.c_out);
    }

    pub fn forward(&self, fwd: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        Ok(self.forward_many(fwd, &[x])?.remove(0))
    }

    /// Applies the block to several rasters of equal depth with one set of
    /// normalization statistics pooled over all of them.
    pub fn forward_many(&self, fwd: &mut Forward<'_, '_>, xs: &[Var]) -> Result<Vec<Var>> {
        let w = fwd.param(&format!("{}.weight", self.name))?;
        let convs = xs.iter().map(|&x| fwd.tape.conv2d(x, w)).collect::<Result<Vec<_>>>()?;
        let normed = batch_norm_stacked(fwd, &format!("{}.bn", self.name), &convs)?;
        normed
            .into_iter()
            .map(|y| {
                let y = fwd.tape.maxpool2d_same(y, self.pool)?;
                fwd.tape.relu(y)
            })
            .collect()
    }
}

/// Batch normalization over the channel axis of several H×W×C rasters at once.
/// The rasters are stacked along their first axis for the statistics and split
/// again afterwards.
pub fn batch_norm_stacked(fwd: &mut Forward<'_, '_>, prefix: &str, xs: &[Var]) -> Result<Vec<Var>> {
    if xs.len() == 1 {
        return Ok(vec![fwd.batch_norm(prefix, xs[0], 2)?]);
    }
    let heights: Vec<usize> = xs.iter().map(|&x| fwd.tape.value(x).shape()[0]).collect();
    let stacked = fwd.tape.concat(xs, 0)?;
    let normed = fwd.batch_norm(prefix, stacked, 2)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(xs.len());
    for h in heights {
        out.push(fwd.tape.slice(normed, 0, start, h)?);
        start += h;
    }
    Ok(out)
}

/// A dense map over the last axis of an n×c matrix, optionally with a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub bias: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, bias: bool) -> Self {
        Dense { name: name.into(), c_in, c_out, bias }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let w = glorot_uniform(&[self.c_in, self.c_out], self.c_in, self.c_out, rng);
        store.insert(format!("{}.weight", self.name), ParamKind::Weight, w);
        if self.bias {
            store.insert(format!("{}.bias", self.name), ParamKind::Bias, Tensor::zeros([self.c_out]));
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let w = fwd.param(&format!("{}.weight", self.name))?;
        let y = fwd.tape.matmul(x, w)?;
        if self.bias {
            let b = fwd.param(&format!("{}.bias", self.name))?;
            fwd.tape.add_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Pixel indices of the (2r+1)×(2r+1) window around each query pixel of an
/// m×n raster, clipped at the borders, in row-major order.
pub fn patch_groups(m: usize, n: usize, radius: usize, pixels: &[usize]) -> Result<Vec<Vec<usize>>> {
    pixels
        .iter()
        .map(|&p| {
            if p >= m * n {
                return Err(dim_err!("pixel {p} is outside a {m}×{n} raster"));
            }
            let (r, c) = (p / n, p % n);
            let rows = r.saturating_sub(radius)..(r + radius + 1).min(m);
            let cols = c.saturating_sub(radius)..(c + radius + 1).min(n);
            Ok(rows.flat_map(|i| cols.clone().map(move |j| i * n + j)).collect())
        })
        .collect()
}

fn dims2(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    match tape.value(v).shape() {
        &[a, b] => Ok((a, b)),
        s => Err(dim_err!("expected a matrix, got shape {s:?}")),
    }
}

fn check_rows(tape: &Tape, h: Var, graph: &KnnGraph) -> Result<()> {
    let (n, _) = dims2(tape, h)?;
    if n != graph.n() {
        return Err(dim_err!("{n} feature rows but the graph has {} nodes", graph.n()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_clip_at_borders() {
        let g = patch_groups(4, 5, 1, &[0, 7, 19]).unwrap();
        assert_eq!(g[0], vec![0, 1, 5, 6]);
        assert_eq!(g[1], vec![1, 2, 3, 6, 7, 8, 11, 12, 13]);
        assert_eq!(g[2], vec![13, 14, 18, 19]);
        assert!(patch_groups(4, 5, 1, &[20]).is_err());
    }

    #[test]
    fn sop_raw_product_matches_hand_computation() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let d = sop(&h).unwrap();
        assert_eq!(d.raw.data(), &[10.0, 14.0, 14.0, 20.0]);
        assert_eq!(d.matrix.shape(), &[2, 2]);
        assert_eq!(d.vectorized.data(), d.matrix.data());
    }
}
