use hsinet::error::Error;
use hsinet::gradcheck::{check, check_seeds, random_tensor, rng};
use hsinet::graph::GraphConfig;
use hsinet::layers::patch_groups;
use hsinet::model::{
    cross_entropy_loss, forward, forward_full, predict, run_c_stream, run_g_stream, run_n_stream, run_s_stream,
    Checkpoint, ModelConfig, ModelState, Scene, StreamsEnabled,
};
use hsinet::params::{Forward, Mode};
use hsinet::tensor::{signed_sqrt, Real, Tape, Tensor, SIGNED_SQRT_EPS};

fn config(k: usize) -> ModelConfig {
    ModelConfig { knn: GraphConfig { k, ..GraphConfig::default() }, ..ModelConfig::default() }
}

fn scene(m: usize, n: usize, b: usize, k: usize, seed: u64) -> Scene {
    Scene::build(random_tensor(&[m, n, b], &mut rng(seed)), &config(k)).unwrap()
}

fn value(tape: &Tape, v: hsinet::Var) -> Tensor {
    tape.value(v).clone()
}

#[test]
fn logits_are_n_by_p_for_every_stream_subset() {
    let sc = scene(5, 5, 4, 3, 1);
    for mask in 1u8..16 {
        let streams = StreamsEnabled { g: mask & 1 != 0, c: mask & 2 != 0, n: mask & 4 != 0, s: mask & 8 != 0 };
        let cfg = ModelConfig { streams, ..config(3) };
        let widths: usize = [(streams.g, 32), (streams.c, 128), (streams.n, 128), (streams.s, 256)]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, w)| w)
            .sum();
        assert_eq!(cfg.fusion_width(), widths);
        let model = ModelState::new(cfg, 4, 3, 2).unwrap();
        assert_eq!(model.params.get("fuse.fc0.weight").unwrap().shape(), &[widths, 512]);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
        let out = forward(&mut fwd, &model, &[&sc], &[(0..25).collect()]).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[25, 3], "streams {streams:?}");
    }
}

#[test]
fn c_only_fusion_is_128_wide_and_softmax_rows_sum_to_one() {
    let cfg = ModelConfig { streams: StreamsEnabled { g: false, c: true, n: false, s: false }, ..config(3) };
    assert_eq!(cfg.fusion_width(), 128);
    let model = ModelState::new(cfg, 4, 3, 2).unwrap();
    let sc = scene(5, 5, 4, 3, 3);
    let logits = predict(&model, &sc, &(0..25).collect::<Vec<_>>(), 7).unwrap();
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let p = tape.softmax(l, 1).unwrap();
    for r in 0..25 {
        let s: Real = tape.value(p).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn configuration_errors() {
    let none =
        ModelConfig { streams: StreamsEnabled { g: false, c: false, n: false, s: false }, ..ModelConfig::default() };
    assert!(matches!(ModelState::new(none, 4, 3, 0), Err(Error::Config(_))));
    assert!(matches!(ModelState::new(ModelConfig::default(), 4, 1, 0), Err(Error::Config(_))));
    let model = ModelState::new(config(3), 5, 3, 0).unwrap();
    let sc = scene(4, 4, 4, 3, 1);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
    assert!(matches!(forward(&mut fwd, &model, &[&sc], &[vec![0]]), Err(Error::Dimension(_))));
}

fn log_softmax_oracle(row: &[Real], t: usize) -> Real {
    let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
    lse - row[t]
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros([1, 2]));
    for t in 0..2 {
        let loss = cross_entropy_loss(&mut tape, l, &[Some(t)]).unwrap();
        assert!((tape.value(loss).item().unwrap() - std::f64::consts::LN_2 as Real).abs() < 1e-12);
    }
    let peaked = tape.constant(Tensor::new([1, 3], vec![-50.0, 50.0, -50.0]).unwrap());
    let loss = cross_entropy_loss(&mut tape, peaked, &[Some(1)]).unwrap();
    assert!(tape.value(loss).item().unwrap() < 1e-40);

    let logits = random_tensor(&[10, 4], &mut rng(5));
    let targets: Vec<Option<usize>> = (0..10).map(|i| if i % 3 == 2 { None } else { Some(i % 4) }).collect();
    let lv = tape.constant(logits.clone());
    let loss = cross_entropy_loss(&mut tape, lv, &targets).unwrap();
    let labeled: Vec<(usize, usize)> = targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).collect();
    let oracle =
        labeled.iter().map(|&(i, t)| log_softmax_oracle(logits.row(i), t)).sum::<Real>() / labeled.len() as Real;
    assert!((tape.value(loss).item().unwrap() - oracle).abs() < 1e-10);

    assert!(matches!(cross_entropy_loss(&mut tape, lv, &[None; 10]), Err(Error::Contract(_))));
}

#[test]
fn full_forward_is_finite_and_deterministic() {
    let sc = scene(8, 8, 8, 10, 7);
    let query: Vec<usize> = (0..64).collect();
    let targets: Vec<Option<usize>> = (0..64).map(|i| if i % 2 == 0 { Some(i % 3) } else { None }).collect();
    let run = || {
        let model = ModelState::new(ModelConfig::default(), 8, 3, 11).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
        let (out, loss) = forward_full(&mut fwd, &model, &sc, &query, &targets).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[64, 3]);
        tape.value(loss).item().unwrap()
    };
    let a = run();
    assert!(a.is_finite());
    assert_eq!(a, run());
}

#[test]
fn g_stream_shape_and_gradient() {
    let cfg = config(4);
    let model = ModelState::new(cfg.clone(), 6, 3, 1).unwrap();
    let sc = scene(5, 5, 6, 4, 2);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
    let h = run_g_stream(&mut fwd, &model, &sc).unwrap();
    assert_eq!(tape.value(h).shape(), &[25, 32]);

    let small = scene(3, 3, 4, 3, 9);
    let g_only = ModelConfig { streams: StreamsEnabled { g: true, c: false, n: false, s: false }, ..config(3) };
    let model = ModelState::new(g_only, 4, 3, 1).unwrap();
    let report = check_seeds("g_stream", 0..20, |seed| {
        let w = random_tensor(&[4, 64], &mut rng(seed)).requires_grad(true);
        check(&[w], seed, |tape, v| {
            let mut fwd = Forward::new(tape, &model.params, Mode::Train);
            fwd.bind("trunk.gc0.weight", v[0]);
            let h = run_g_stream(&mut fwd, &model, &small)?;
            fwd.tape.sum_all(h)
        })
    })
    .unwrap();
    assert!(report.passed() && report.checked > 0, "{report:?}");
}

#[test]
fn c_stream_shape_translation_and_zero_kernels() {
    let model = ModelState::new(config(3), 8, 3, 4).unwrap();
    let sc = scene(8, 8, 8, 3, 5);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
    let h = run_c_stream(&mut fwd, &model, &sc).unwrap();
    assert_eq!(tape.value(h).shape(), &[64, 128]);

    let (m, n, b) = (6, 12, 3);
    let model = ModelState::new(config(3), b, 3, 6).unwrap();
    let x = random_tensor(&[m, n, b], &mut rng(7));
    let mut shifted = random_tensor(&[m, n, b], &mut rng(8));
    for r in 0..m {
        for c in 0..n - 1 {
            for k in 0..b {
                shifted.data_mut()[(r * n + c + 1) * b + k] = x.at(&[r, c, k]);
            }
        }
    }
    let run = |raster: Tensor| {
        let sc = Scene::build(raster, &config(3)).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
        let h = run_c_stream(&mut fwd, &model, &sc).unwrap();
        value(&tape, h)
    };
    let (a, s) = (run(x), run(shifted));
    // Two 3×3 convolutions reach 2 pixels left; convolutions plus three
    // high-side 2×2 pools reach 5 pixels right.
    for r in 0..m {
        for c in 2..=n - 7 {
            assert_eq!(a.row(r * n + c), s.row(r * n + c + 1), "pixel ({r},{c})");
        }
    }

    let mut zeroed = ModelState::new(config(3), 8, 3, 4).unwrap();
    for i in 0..3 {
        let w = zeroed.params.get_mut(&format!("c.block{i}.weight")).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &zeroed.params, Mode::Train);
    let h = run_c_stream(&mut fwd, &zeroed, &sc).unwrap();
    let h = value(&tape, h);
    for r in 1..64 {
        assert_eq!(h.row(r), h.row(0));
    }
}

#[test]
fn n_stream_matches_patch_loop_and_is_symmetric() {
    let model = ModelState::new(config(3), 3, 3, 12).unwrap();
    let sc = scene(7, 7, 3, 3, 13);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
    let out = forward(&mut fwd, &model, &[&sc], &[(0..49).collect()]).unwrap();
    let sop = value(fwd.tape, out.streams.n_sop.unwrap());
    assert_eq!(value(fwd.tape, out.streams.h_n.unwrap()).shape(), &[49, 128]);

    let x = fwd.tape.constant(sc.raster().clone());
    let feat = model.config.n_extractor_block(3).forward(&mut fwd, x).unwrap();
    let feat = fwd.batch_norm("n.bn", feat, 2).unwrap();
    let feat = value(fwd.tape, feat).reshape([49, 32]).unwrap();
    let f = 32;
    for p in 0..49 {
        let patch = patch_groups(7, 7, 2, &[p]).unwrap().remove(0);
        let mut acc = vec![0.0 as Real; f * f];
        for &j in &patch {
            let row = feat.row(j);
            for a in 0..f {
                for b in 0..f {
                    acc[a * f + b] += row[a] * row[b];
                }
            }
        }
        let inv = 1.0 / patch.len() as Real;
        let row = sop.row(p);
        for a in 0..f {
            for b in 0..f {
                assert!((row[a * f + b] - signed_sqrt(acc[a * f + b] * inv, SIGNED_SQRT_EPS)).abs() <= 1e-12);
                assert!((row[a * f + b] - row[b * f + a]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn n_stream_is_constant_on_interior_of_constant_raster() {
    let model = ModelState::new(config(3), 2, 3, 14).unwrap();
    let sc = Scene::build(Tensor::full([12, 12, 2], 0.7), &config(3)).unwrap();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
    let h = run_n_stream(&mut fwd, &model, &sc).unwrap();
    let h = value(&tape, h);
    // Patch radius 2 plus the extractor's reach of 1 left and 2 right.
    let interior: Vec<usize> = (3..=7).flat_map(|r| (3..=7).map(move |c| r * 12 + c)).collect();
    for &p in &interior {
        assert_eq!(h.row(p), h.row(interior[0]));
    }
}

#[test]
fn s_stream_matches_neighborhood_oracle() {
    let model = ModelState::new(config(2), 3, 3, 15).unwrap();
    let sc = scene(2, 3, 3, 2, 16);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
    let hs = run_s_stream(&mut fwd, &model, &sc).unwrap();
    let hs = value(fwd.tape, hs);
    assert_eq!(hs.shape(), &[6, 256]);

    let x = fwd.tape.constant(sc.raster().reshape([6, 3]).unwrap());
    let layers = model.config.trunk_layers("trunk", 3);
    let prop = sc.graph().laplacian().clone();
    let h0 = layers[0].forward(&mut fwd, x, &prop).unwrap();
    let h0 = fwd.tape.relu(h0).unwrap();
    let h1 = layers[1].forward(&mut fwd, h0, &prop).unwrap();
    let proj = model.config.s_projection_layer().forward(&mut fwd, h1).unwrap();
    let proj = value(fwd.tape, proj);
    for i in 0..6 {
        let hood = sc.graph().closed_neighborhood(i);
        let mut acc = [0.0 as Real; 256];
        for &j in &hood {
            let r = proj.row(j);
            for a in 0..16 {
                for b in 0..16 {
                    acc[a * 16 + b] += r[a] * r[b];
                }
            }
        }
        let inv = 1.0 / hood.len() as Real;
        for (k, v) in acc.iter().enumerate() {
            assert!((hs.row(i)[k] - signed_sqrt(v * inv, SIGNED_SQRT_EPS)).abs() <= 1e-12);
        }
    }

    let flat = Scene::build(Tensor::full([3, 3, 3], 0.25), &config(2)).unwrap();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
    let hs = run_s_stream(&mut fwd, &model, &flat).unwrap();
    let hs = value(&tape, hs);
    for r in 1..9 {
        assert_eq!(hs.row(r), hs.row(0));
    }
}

#[test]
fn every_enabled_stream_receives_gradient() {
    let model = ModelState::new(config(4), 5, 3, 21).unwrap();
    let sc = scene(6, 6, 5, 4, 22);
    let query: Vec<usize> = vec![0, 7, 14, 21, 28, 35, 5];
    let targets: Vec<Option<usize>> = query.iter().map(|&p| Some(p % 3)).collect();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train);
    let (_, loss) = forward_full(&mut fwd, &model, &sc, &query, &targets).unwrap();
    let bound: Vec<(String, hsinet::Var)> = fwd.bound().map(|(n, v)| (n.to_string(), v)).collect();
    tape.backward(loss).unwrap();
    for prefix in ["trunk.", "c.", "n.", "s.", "fuse."] {
        let nonzero = bound
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .any(|(_, v)| tape.grad(*v).is_some_and(|g| g.iter().any(|x| *x != 0.0)));
        assert!(nonzero, "no gradient reaches `{prefix}`");
    }
}

#[test]
fn disabling_a_stream_removes_its_parameters() {
    let full = ModelState::new(ModelConfig::default(), 8, 4, 0).unwrap();
    for (stream, prefix) in [("c", "c."), ("n", "n."), ("s", "s.")] {
        let cfg = ModelConfig { streams: StreamsEnabled::without(stream).unwrap(), ..ModelConfig::default() };
        let cut = ModelState::new(cfg.clone(), 8, 4, 0).unwrap();
        assert_eq!(cut.parameter_count_with_prefix(prefix), 0);
        let fusion_delta = (full.config.fusion_width() - cfg.fusion_width()) * 512;
        assert_eq!(
            full.parameter_count() - cut.parameter_count(),
            full.parameter_count_with_prefix(prefix) + fusion_delta,
            "stream {stream}"
        );
    }
    let no_gs =
        ModelConfig { streams: StreamsEnabled { g: false, c: true, n: true, s: false }, ..ModelConfig::default() };
    assert_eq!(ModelState::new(no_gs, 8, 4, 0).unwrap().parameter_count_with_prefix("trunk."), 0);
    let independent = ModelConfig { shared_trunk: false, ..ModelConfig::default() };
    let m = ModelState::new(independent, 8, 4, 0).unwrap();
    assert_eq!(m.parameter_count_with_prefix("g.trunk."), m.parameter_count_with_prefix("s.trunk."));
    assert_eq!(m.parameter_count_with_prefix("trunk."), 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = ModelState::new(config(3), 5, 4, 31).unwrap();
    let mut bytes = Vec::new();
    Checkpoint::from_model(&model).write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"MSHC");
    let back = Checkpoint::read_from(bytes.as_slice()).unwrap().to_model().unwrap();
    assert_eq!(back, model);
    let mut again = Vec::new();
    Checkpoint::from_model(&back).write_to(&mut again).unwrap();
    assert_eq!(bytes, again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mshc");
    model.save(&path).unwrap();
    assert_eq!(ModelState::load(&path).unwrap(), model);

    let err = Checkpoint::read_from(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");

    let mut other = Checkpoint::from_model(&model);
    other.header.model.g_widths = vec![16, 32];
    assert!(matches!(other.to_model(), Err(Error::Mismatch(_))));
}

#[test]
fn chunked_prediction_matches_single_pass() {
    let model = ModelState::new(config(3), 4, 3, 41).unwrap();
    let sc = scene(6, 5, 4, 3, 42);
    let pixels: Vec<usize> = (0..30).collect();
    let whole = predict(&model, &sc, &pixels, 1000).unwrap();
    let chunked = predict(&model, &sc, &pixels, 7).unwrap();
    assert_eq!(whole.shape(), &[30, 3]);
    assert!(whole.max_abs_diff(&chunked) < 1e-12);

    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
    let out = forward(&mut fwd, &model, &[&sc], &[pixels.clone()]).unwrap();
    assert!(tape.value(out.logits).max_abs_diff(&whole) < 1e-12);
}

#[test]
fn patch_scenes_share_one_forward() {
    let model = ModelState::new(config(3), 4, 3, 51).unwrap();
    let a = scene(5, 5, 4, 3, 52);
    let b = scene(5, 5, 4, 3, 53);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval);
    let both = forward(&mut fwd, &model, &[&a, &b], &[vec![12], vec![3, 4]]).unwrap();
    let both = value(fwd.tape, both.logits);
    let alone_a = predict(&model, &a, &[12], 8).unwrap();
    let alone_b = predict(&model, &b, &[3, 4], 8).unwrap();
    assert!((0..3).all(|c| (both.at(&[0, c]) - alone_a.at(&[0, c])).abs() < 1e-12));
    assert!((0..3).all(|c| (both.at(&[1, c]) - alone_b.at(&[0, c])).abs() < 1e-12));
    assert!((0..3).all(|c| (both.at(&[2, c]) - alone_b.at(&[1, c])).abs() < 1e-12));
}
