use hsinet::gradcheck::{random_tensor, rng};
use hsinet::graph::{build_knn_graph, spmv, GraphConfig, KnnGraph};
use hsinet::tensor::{CsrMatrix, Real, Tensor};
use rand::Rng;

fn dist2(f: &Tensor, a: usize, b: usize) -> Real {
    f.row(a).iter().zip(f.row(b)).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Brute-force directed top-k with the (distance, index) tie rule.
fn oracle_topk(f: &Tensor, i: usize, k: usize) -> Vec<usize> {
    let n = f.shape()[0];
    let mut all: Vec<(Real, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist2(f, i, j), j)).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

fn cfg(k: usize) -> GraphConfig {
    GraphConfig { k, ..GraphConfig::default() }
}

#[test]
fn neighbors_are_closer_than_non_neighbors() {
    let f = random_tensor(&[50, 8], &mut rng(11));
    let g = build_knn_graph(&f, &cfg(5)).unwrap();
    for i in 0..50 {
        let picked = oracle_topk(&f, i, 5);
        let worst_pick = picked.iter().map(|&j| dist2(&f, i, j)).fold(0.0, Real::max);
        for j in (0..50).filter(|j| *j != i && !picked.contains(j)) {
            assert!(worst_pick <= dist2(&f, i, j));
        }
        for &j in &picked {
            assert!(g.has_edge(i, j));
        }
    }
}

#[test]
fn symmetrization_is_mutual_or() {
    for seed in 0..5 {
        let f = random_tensor(&[40, 3], &mut rng(seed));
        let g = build_knn_graph(&f, &cfg(4)).unwrap();
        let topk: Vec<Vec<usize>> = (0..40).map(|i| oracle_topk(&f, i, 4)).collect();
        for i in 0..40 {
            assert!(g.neighbors(i).len() >= 4);
            assert!(!g.has_edge(i, i));
            for j in 0..40 {
                let expected = i != j && (topk[i].contains(&j) || topk[j].contains(&i));
                assert_eq!(g.has_edge(i, j), expected, "({i},{j})");
                assert_eq!(g.adjacency().get(i, j), if expected { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn construction_is_deterministic() {
    let f = random_tensor(&[60, 5], &mut rng(3));
    let a = build_knn_graph(&f, &cfg(6)).unwrap();
    let b = build_knn_graph(&f, &cfg(6)).unwrap();
    assert_eq!(a.adjacency(), b.adjacency());
    assert_eq!(a.laplacian(), b.laplacian());
}

#[test]
fn laplacian_symmetry_diagonal_and_rayleigh_bounds() {
    let mut r = rng(99);
    for graph_seed in 0..20u64 {
        let n = r.gen_range(20..=200);
        let k = r.gen_range(1..=10);
        let f = random_tensor(&[n, 6], &mut rng(graph_seed));
        let g = build_knn_graph(&f, &cfg(k)).unwrap();
        let l = g.laplacian();
        assert!(l.asymmetry() <= 1e-12);
        for i in 0..n {
            assert_eq!(l.get(i, i), 1.0);
        }
        for _ in 0..100 {
            let x = random_tensor(&[n, 1], &mut r);
            let lx = spmv(l, &x).unwrap();
            let quad: Real = x.data().iter().zip(lx.data()).map(|(a, b)| a * b).sum();
            let norm: Real = x.data().iter().map(|v| v * v).sum();
            assert!(quad >= -1e-9 && quad <= 2.0 * norm + 1e-9, "graph {graph_seed}: {quad} vs {norm}");
        }
    }
}

#[test]
fn spmv_matches_dense_product() {
    let mut r = rng(5);
    for _ in 0..20 {
        let entries: Vec<(usize, usize, Real)> =
            (0..60).map(|_| (r.gen_range(0..20), r.gen_range(0..20), r.gen_range(-1.0..1.0))).collect();
        let m = CsrMatrix::from_triplets(20, 20, &entries).unwrap();
        let x = random_tensor(&[20, 3], &mut r);
        let dense = m.to_dense().matmul(&x).unwrap();
        assert!(spmv(&m, &x).unwrap().max_abs_diff(&dense) < 1e-12);
    }
    for n in [8, 33, 64] {
        let f = random_tensor(&[n, 4], &mut r);
        let g = build_knn_graph(&f, &cfg(3)).unwrap();
        let x = random_tensor(&[n, 5], &mut r);
        let dense = g.laplacian().to_dense().matmul(&x).unwrap();
        assert!(spmv(g.laplacian(), &x).unwrap().max_abs_diff(&dense) < 1e-12);
    }
}

#[test]
fn spmv_rejects_shape_mismatch() {
    let g = KnnGraph::from_edges(3, 1, &[(0, 1), (1, 2)]).unwrap();
    assert!(spmv(g.laplacian(), &Tensor::zeros([4, 1])).is_err());
}
