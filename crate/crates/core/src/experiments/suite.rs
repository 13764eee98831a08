use std::sync::Arc;

use crate::error::Result;
use crate::gradcheck::{check, check_seeds, random_away_from_zero, random_distinct, random_tensor, rng, CheckReport};
use crate::graph::{build_knn_graph, GraphConfig, KnnGraph};
use crate::layers::{all_nodes, graph_neighbor_maxpool, gsop, GraphConvLayer, GsopMode, LEAKY_SLOPE};
use crate::model::{cross_entropy_loss, fuse_and_classify, ConvSpec, ModelConfig, ModelState, StreamOutputs};
use crate::params::{Forward, Mode, ParamStore};
use crate::tensor::{BnMode, Real};

/// Seeds every check in the suite runs over.
pub const SUITE_SEEDS: std::ops::Range<u64> = 0..20;

fn random_graph(n: usize, k: usize, seed: u64) -> Result<KnnGraph> {
    let f = random_tensor(&[n, 3], &mut rng(seed ^ 0x5eed));
    build_knn_graph(&f, &GraphConfig { k, ..GraphConfig::default() })
}

fn fusion_model() -> Result<ModelState> {
    let cfg = ModelConfig {
        g_widths: vec![4],
        c_blocks: vec![ConvSpec { kernel: 1, channels: 3 }],
        n_extractor: ConvSpec { kernel: 1, channels: 2 },
        n_projection: 3,
        s_projection: 2,
        fusion_channels: vec![6, 5],
        ..ModelConfig::default()
    };
    ModelState::new(cfg, 2, 3, 17)
}

/// Finite-difference checks of every differentiable operation the model uses,
/// from the tensor primitives up to the fusion head and the loss.
pub fn standard_suite() -> Result<Vec<CheckReport>> {
    let seeds = || SUITE_SEEDS;
    let mut out = Vec::new();

    out.push(check_seeds("matmul", seeds(), |seed| {
        let mut r = rng(seed);
        let a = random_tensor(&[4, 3], &mut r).requires_grad(true);
        let b = random_tensor(&[3, 5], &mut r).requires_grad(true);
        check(&[a, b], seed, |tape, v| tape.matmul(v[0], v[1]))
    })?);
    out.push(check_seeds("conv2d", seeds(), |seed| {
        let mut r = rng(seed);
        let x = random_tensor(&[5, 4, 3], &mut r).requires_grad(true);
        let k = random_tensor(&[3, 3, 3, 2], &mut r).requires_grad(true);
        check(&[x, k], seed, |tape, v| tape.conv2d(v[0], v[1]))
    })?);
    out.push(check_seeds("maxpool2d", seeds(), |seed| {
        let x = random_distinct(&[6, 6, 2], &mut rng(seed)).requires_grad(true);
        check(&[x], seed, |tape, v| tape.maxpool2d_same(v[0], 2))
    })?);
    out.push(check_seeds("batch_norm/train", seeds(), |seed| {
        let mut r = rng(seed);
        let x = random_tensor(&[4, 3, 5], &mut r).requires_grad(true);
        let g = random_away_from_zero(&[3], &mut r).requires_grad(true);
        let b = random_tensor(&[3], &mut r).requires_grad(true);
        check(&[x, g, b], seed, |tape, v| Ok(tape.batch_norm(v[0], v[1], v[2], 1, BnMode::Train)?.0))
    })?);
    out.push(check_seeds("batch_norm/eval", seeds(), |seed| {
        let mut r = rng(seed);
        let x = random_tensor(&[6, 4], &mut r).requires_grad(true);
        let g = random_away_from_zero(&[4], &mut r).requires_grad(true);
        let b = random_tensor(&[4], &mut r).requires_grad(true);
        let mean = random_tensor(&[4], &mut r).into_data();
        let var: Vec<Real> = random_tensor(&[4], &mut r).data().iter().map(|v| v.abs() + 0.5).collect();
        check(&[x, g, b], seed, |tape, v| {
            Ok(tape.batch_norm(v[0], v[1], v[2], 1, BnMode::Eval { mean: &mean, var: &var })?.0)
        })
    })?);
    out.push(check_seeds("relu", seeds(), |seed| {
        let x = random_away_from_zero(&[4, 5], &mut rng(seed)).requires_grad(true);
        check(&[x], seed, |tape, v| tape.relu(v[0]))
    })?);
    out.push(check_seeds("leaky_relu", seeds(), |seed| {
        let x = random_away_from_zero(&[4, 5], &mut rng(seed)).requires_grad(true);
        check(&[x], seed, |tape, v| tape.leaky_relu(v[0], LEAKY_SLOPE))
    })?);
    out.push(check_seeds("softmax", seeds(), |seed| {
        let x = random_tensor(&[3, 4, 2], &mut rng(seed)).requires_grad(true);
        check(&[x], seed, |tape, v| tape.softmax(v[0], 1))
    })?);

    out.push(check_seeds("graph_conv", seeds(), |seed| {
        let g = random_graph(8, 2, seed)?;
        let layer = GraphConvLayer::new("gc", 3, 4);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng(seed));
        let mut r = rng(seed + 1000);
        let inputs = [
            random_tensor(&[8, 3], &mut r).requires_grad(true),
            random_tensor(&[3, 4], &mut r).requires_grad(true),
            random_tensor(&[4], &mut r).requires_grad(true),
            random_tensor(&[3], &mut r).requires_grad(true),
        ];
        check(&inputs, seed, |tape, v| {
            let mut fwd = Forward::new(tape, &store, Mode::Train);
            fwd.bind("gc.weight", v[1]);
            fwd.bind("gc.bias", v[2]);
            fwd.bind("gc.bn.gamma", v[3]);
            layer.forward(&mut fwd, v[0], g.laplacian())
        })
    })?);
    out.push(check_seeds("graph_neighbor_maxpool", seeds(), |seed| {
        let g = random_graph(10, 3, seed)?;
        let h = random_distinct(&[10, 3], &mut rng(seed)).requires_grad(true);
        check(&[h], seed, |tape, v| graph_neighbor_maxpool(tape, v[0], &g, &all_nodes(&g)))
    })?);
    out.push(check_seeds("sop", seeds(), |seed| {
        let h = random_tensor(&[6, 3], &mut rng(seed)).requires_grad(true);
        let group = Arc::new(vec![(0..6).collect()]);
        check(&[h], seed, |tape, v| tape.local_second_order(v[0], &group))
    })?);
    for (name, mode) in [("gsop/global", GsopMode::Global), ("gsop/per_node", GsopMode::PerNode)] {
        out.push(check_seeds(name, seeds(), |seed| {
            let g = random_graph(7, 2, seed)?;
            let h = random_tensor(&[7, 3], &mut rng(seed)).requires_grad(true);
            check(&[h], seed, |tape, v| gsop(tape, v[0], &g, mode, &all_nodes(&g)))
        })?);
    }

    let model = fusion_model()?;
    let widths: Vec<usize> = model.config.stream_widths().iter().map(|(_, w)| *w).collect();
    let fc0 = model.params.get("fuse.fc0.weight")?.shape().to_vec();
    out.push(check_seeds("fusion_head", seeds(), |seed| {
        let mut r = rng(seed);
        let mut inputs: Vec<_> = widths.iter().map(|&w| random_tensor(&[8, w], &mut r).requires_grad(true)).collect();
        inputs.push(random_tensor(&fc0, &mut r).requires_grad(true));
        check(&inputs, seed, |tape, v| {
            let mut fwd = Forward::new(tape, &model.params, Mode::Train);
            fwd.bind("fuse.fc0.weight", v[4]);
            let streams =
                StreamOutputs { h_g: Some(v[0]), h_c: Some(v[1]), h_n: Some(v[2]), h_s: Some(v[3]), n_sop: None };
            fuse_and_classify(&mut fwd, &model, &streams)
        })
    })?);
    out.push(check_seeds("cross_entropy", seeds(), |seed| {
        let mut r = rng(seed);
        let logits = random_tensor(&[6, 4], &mut r).requires_grad(true);
        let targets: Vec<Option<usize>> = (0..6).map(|i| (i != 2).then_some((i + seed as usize) % 4)).collect();
        check(&[logits], seed, |tape, v| cross_entropy_loss(tape, v[0], &targets))
    })?);
    Ok(out)
}
