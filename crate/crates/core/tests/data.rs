use std::path::Path;

use hsinet::data::{
    compare_with_table, filter_bands, generate_synthetic, load_cube, load_envi, load_labels_and_split, normalize,
    parse_band_list, save_cube, save_labels, save_split, CubeFormat, HsiCube, LabelMap, Normalization, SplitTable,
    SyntheticSpec, INDIAN_PINES, INDIAN_PINES_NOISY_BANDS, PAVIA_UNIVERSITY,
};
use hsinet::gradcheck::rng;
use hsinet::{Error, Real, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_cube(m: usize, n: usize, b: usize, seed: u64) -> HsiCube {
    let mut r = rng(seed);
    let data = (0..m * n * b).map(|_| r.gen_range(-5.0f32..5.0) as Real).collect();
    HsiCube::new(Tensor::new([m, n, b], data).unwrap(), "random").unwrap()
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn hsc1_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.hsc1");
    let mut cube = random_cube(4, 5, 3, 7);
    cube.class_names = vec!["a".into(), "b".into()];
    save_cube(&cube, &path).unwrap();
    let back = load_cube(&path, CubeFormat::Hsc1).unwrap();
    let bits = |c: &HsiCube| c.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(back.values().shape(), &[4, 5, 3]);
    assert_eq!(bits(&back), bits(&cube));
    assert_eq!(back.class_names, cube.class_names);

    // Saving what was loaded reproduces the file byte for byte.
    let again = dir.path().join("again.hsc1");
    save_cube(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn hsc1_payload_is_band_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.hsc1");
    let data: Vec<Real> = (0..2 * 2 * 3).map(|v| v as Real).collect();
    save_cube(&HsiCube::new(Tensor::new([2, 2, 3], data).unwrap(), "t").unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let start = bytes.iter().skip(5).position(|&c| c == b'\n').unwrap() + 6;
    let floats: Vec<f32> = bytes[start..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    // Band 0 of the four pixels first, then band 1, then band 2.
    assert_eq!(floats, vec![0., 3., 6., 9., 1., 4., 7., 10., 2., 5., 8., 11.]);
}

#[test]
fn truncated_payload_names_expected_and_actual_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.hsc1");
    save_cube(&random_cube(4, 5, 3, 1), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
    match load_cube(&path, CubeFormat::Hsc1) {
        Err(Error::Format(msg)) => {
            assert!(msg.contains("240 bytes"), "{msg}");
            assert!(msg.contains("234 bytes"), "{msg}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn nan_payload_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cube.hsc1");
    save_cube(&random_cube(2, 2, 2, 1), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_cube(&path, CubeFormat::Hsc1), Err(Error::Data(_))));
}

#[test]
fn envi_u16_fixture_matches_hand_written_values() {
    let cube = load_cube(fixture("tiny_u16.hdr"), CubeFormat::EnviBsq).unwrap();
    assert_eq!(cube.values().shape(), &[2, 2, 2]);
    // Band 1 holds 1..4 and band 2 holds 100, 200, 300, 65535 in row-major pixel order.
    assert_eq!(cube.spectrum(0), &[1.0, 100.0]);
    assert_eq!(cube.spectrum(1), &[2.0, 200.0]);
    assert_eq!(cube.spectrum(2), &[3.0, 300.0]);
    assert_eq!(cube.spectrum(3), &[4.0, 65535.0]);
}

#[test]
fn envi_rejects_unsupported_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let header = dir.path().join("x.hdr");
    let payload = fixture("tiny_u16.img");
    let base = std::fs::read_to_string(fixture("tiny_u16.hdr")).unwrap();
    for (from, to) in [
        ("interleave = bsq", "interleave = bil"),
        ("byte order = 0", "byte order = 1"),
        ("data type = 12", "data type = 5"),
    ] {
        std::fs::write(&header, base.replace(from, to)).unwrap();
        assert!(matches!(load_envi(&header, Some(&payload)), Err(Error::Format(_))), "{to}");
    }
    std::fs::write(&header, base.replace("samples = 2", "samples = 3")).unwrap();
    assert!(matches!(load_envi(&header, Some(&payload)), Err(Error::Format(_))));
}

#[test]
fn noisy_band_removal_leaves_200_bands() {
    let cube = random_cube(2, 3, 220, 2);
    let remove = parse_band_list(INDIAN_PINES_NOISY_BANDS).unwrap();
    assert_eq!(remove.len(), 20);
    let out = filter_bands(&cube, &remove).unwrap();
    assert_eq!(out.bands(), 200);
    assert_eq!(out.band_mask.iter().filter(|m| **m).count(), 200);
    assert!(!out.band_mask[103] && !out.band_mask[219] && out.band_mask[102]);
    // Order preserved: band 109 (index 108) is now at index 103.
    assert_eq!(out.spectrum(4)[103], cube.spectrum(4)[108]);
}

#[test]
fn band_filter_edge_cases() {
    let cube = random_cube(2, 2, 4, 3);
    assert_eq!(filter_bands(&cube, &[]).unwrap(), cube);
    assert!(matches!(filter_bands(&cube, &[1, 2, 3, 4]), Err(Error::Config(_))));
    assert!(matches!(filter_bands(&cube, &[2, 2]), Err(Error::Config(_))));
    assert!(matches!(filter_bands(&cube, &[0]), Err(Error::Config(_))));
    assert!(matches!(filter_bands(&cube, &[5]), Err(Error::Config(_))));
    let once = filter_bands(&cube, &[2]).unwrap();
    assert!(matches!(filter_bands(&once, &[2]), Err(Error::Config(_))));
    assert!(parse_band_list("3-1").is_err());
    assert!(parse_band_list("a").is_err());
    assert_eq!(parse_band_list(" 1, 3-4 ").unwrap(), vec![1, 3, 4]);
}

proptest! {
    #[test]
    fn disjoint_band_removals_commute(seed in 0u64..1000, split in proptest::collection::vec(0u8..3, 12)) {
        let cube = random_cube(2, 2, 12, seed);
        let a: Vec<usize> = (1..=12).filter(|&i| split[i - 1] == 1).collect();
        let b: Vec<usize> = (1..=12).filter(|&i| split[i - 1] == 2).collect();
        prop_assume!(a.len() + b.len() < 12);
        let ab = filter_bands(&filter_bands(&cube, &a).unwrap(), &b).unwrap();
        let ba = filter_bands(&filter_bands(&cube, &b).unwrap(), &a).unwrap();
        prop_assert_eq!(&ab, &ba);
        let both: Vec<usize> = a.iter().chain(&b).copied().collect();
        prop_assert_eq!(&ab, &filter_bands(&cube, &both).unwrap());
    }

    #[test]
    fn zscore_bands_have_unit_statistics(seed in 0u64..1000) {
        let cube = normalize(&random_cube(5, 6, 4, seed), Normalization::PerBandZscore);
        let n = cube.pixels() as f64;
        for k in 0..4 {
            let vals: Vec<f64> = (0..cube.pixels()).map(|p| cube.spectrum(p)[k] as f64).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn normalization_examples() {
    let data = vec![7.0, 10.0, 7.0, 20.0, 7.0, 30.0];
    let cube = HsiCube::new(Tensor::new([1, 3, 2], data).unwrap(), "t").unwrap();
    let z = normalize(&cube, Normalization::PerBandZscore);
    assert!((0..3).all(|p| z.spectrum(p)[0] == 0.0));
    let mm = normalize(&cube, Normalization::Minmax01);
    assert_eq!(mm.spectrum(1)[1], 0.5);
    assert_eq!((mm.spectrum(0)[1], mm.spectrum(2)[1]), (0.0, 1.0));
    assert!((0..3).all(|p| mm.spectrum(p)[0] == 0.0));
    assert_eq!(normalize(&cube, Normalization::None), cube);
}

/// A label map realizing a table's per-class counts, plus one unlabeled row.
fn table_fixture(table: &SplitTable) -> LabelMap {
    let cols = 100;
    let labeled: usize = table.classes.iter().map(|(_, a, b)| a + b).sum();
    let rows = labeled.div_ceil(cols) + 1;
    let mut grid = vec![0u16; rows * cols];
    let (mut train, mut test) = (vec![false; rows * cols], vec![false; rows * cols]);
    let mut p = 0;
    for (c, (_, tr, te)) in table.classes.iter().enumerate() {
        for i in 0..tr + te {
            grid[p] = c as u16 + 1;
            if i < *tr {
                train[p] = true
            } else {
                test[p] = true
            }
            p += 1;
        }
    }
    let names = table.classes.iter().map(|(n, _, _)| n.to_string()).collect();
    LabelMap::new(rows, cols, grid, names, train, test).unwrap()
}

#[test]
fn split_files_reproduce_table_totals() {
    let dir = tempfile::tempdir().unwrap();
    for (table, totals) in [(&INDIAN_PINES, (695, 9671)), (&PAVIA_UNIVERSITY, (3921, 42776))] {
        assert_eq!(table.totals(), totals);
        let map = table_fixture(table);
        let (lp, sp) = (dir.path().join("labels.hsl1"), dir.path().join("split.hsl1"));
        save_labels(&lp, map.rows, map.cols, &map.grid, &map.class_names).unwrap();
        save_split(&sp, &map).unwrap();
        let back = load_labels_and_split(&lp, &sp).unwrap();
        assert_eq!(back, map);
        let counts = back.split_counts();
        let sums = counts.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
        assert_eq!(sums, totals);
        assert!(compare_with_table(&back, table).is_empty());
        assert_eq!(SplitTable::by_name(table.name).unwrap().name, table.name);
    }
    assert_eq!(SplitTable::by_name("houston_2013").unwrap().totals(), (2832, 12197));
}

#[test]
fn table_comparison_reports_differences() {
    let mut map = table_fixture(&INDIAN_PINES);
    let first = map.train_pixels()[0];
    map.train_mask[first] = false;
    let diffs = compare_with_table(&map, &INDIAN_PINES);
    assert_eq!(diffs.len(), 1);
    assert!(diffs[0].contains("Alfalfa"), "{}", diffs[0]);
}

#[test]
fn label_map_invariants_are_enforced() {
    let names = vec!["a".to_string(), "b".to_string()];
    let grid = vec![1, 2, 2, 0];
    let ok = |train: [bool; 4], test: [bool; 4]| {
        LabelMap::new(2, 2, grid.clone(), names.clone(), train.to_vec(), test.to_vec())
    };
    assert!(ok([true, true, false, false], [false, false, true, false]).is_ok());
    assert!(matches!(ok([true, false, false, false], [true, false, false, false]), Err(Error::Data(_))));
    assert!(matches!(ok([false, false, false, true], [false; 4]), Err(Error::Data(_))));
    let too_high = LabelMap::new(2, 2, vec![1, 3, 2, 0], names.clone(), vec![false; 4], vec![false; 4]);
    assert!(matches!(too_high, Err(Error::Data(_))));
    let empty_class = LabelMap::new(2, 2, vec![1, 1, 0, 0], names.clone(), vec![false; 4], vec![false; 4]);
    assert!(matches!(empty_class, Err(Error::Data(_))));
    let no_train = ok([false; 4], [true, true, false, false]).unwrap();
    assert!(matches!(no_train.require_nonempty_training(), Err(Error::Data(_))));
}

#[test]
fn split_files_with_bad_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (lp, sp) = (dir.path().join("l"), dir.path().join("s"));
    let map = table_fixture(&INDIAN_PINES);
    save_split(&sp, &map).unwrap();
    let mut grid = map.grid.clone();
    grid[0] = 17;
    save_labels(&lp, map.rows, map.cols, &grid, &map.class_names).unwrap();
    assert!(matches!(load_labels_and_split(&lp, &sp), Err(Error::Data(_))));
    save_labels(&lp, map.rows, map.cols + 1, &vec![1; map.rows * (map.cols + 1)], &map.class_names).unwrap();
    assert!(load_labels_and_split(&lp, &sp).is_err());
}

#[test]
fn split_partitions_labeled_pixels() {
    let (_, labels) = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let hist = labels.histogram();
    for (c, (tr, te)) in labels.split_counts().into_iter().enumerate() {
        assert_eq!(tr + te, hist[c]);
        let frac = tr as f64 / hist[c] as f64;
        assert!((frac - 0.2).abs() <= 0.5 / hist[c] as f64 + 1e-12, "class {c}: {tr}/{}", hist[c]);
    }
    assert_eq!(hist.iter().sum::<usize>(), labels.pixels());
}

#[test]
fn noiseless_pixels_equal_their_signature() {
    let spec = SyntheticSpec { noise_sigma: 0.0, seed: 3, ..SyntheticSpec::default() };
    let (cube, labels) = generate_synthetic(&spec).unwrap();
    for p in 0..cube.pixels() {
        let first = labels.grid.iter().position(|&c| c == labels.grid[p]).unwrap();
        assert_eq!(cube.spectrum(p), cube.spectrum(first));
    }
    let given: Vec<Vec<f64>> = (0..4).map(|c| (0..8).map(|k| c as f64 + 0.1 * k as f64).collect()).collect();
    let spec = SyntheticSpec { noise_sigma: 0.0, signatures: Some(given.clone()), ..SyntheticSpec::default() };
    let (cube, labels) = generate_synthetic(&spec).unwrap();
    for p in 0..cube.pixels() {
        let sig: Vec<Real> = given[labels.grid[p] as usize - 1].iter().map(|&v| v as Real).collect();
        assert_eq!(cube.spectrum(p), sig.as_slice());
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SyntheticSpec { seed: 11, ..SyntheticSpec::default() };
    let (a, la) = generate_synthetic(&spec).unwrap();
    let (b, lb) = generate_synthetic(&spec).unwrap();
    let bits = |c: &HsiCube| c.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(la, lb);
    let (c, _) = generate_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

/// Per-class mean spectra over the training pixels.
fn class_means(cube: &HsiCube, labels: &LabelMap) -> Vec<Vec<Real>> {
    let b = cube.bands();
    let mut sums = vec![vec![0.0; b]; labels.classes()];
    let mut counts = vec![0; labels.classes()];
    for p in labels.train_pixels() {
        let c = labels.grid[p] as usize - 1;
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(cube.spectrum(p)) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= *n as Real);
    }
    sums
}

#[test]
fn nearest_centroid_separates_the_synthetic_classes() {
    for seed in 0..5 {
        let (cube, labels) = generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() }).unwrap();
        let centroids = class_means(&cube, &labels);
        let nearest = |p: usize| {
            let d = |c: &Vec<Real>| c.iter().zip(cube.spectrum(p)).map(|(a, b)| (a - b) * (a - b)).sum::<Real>();
            (0..centroids.len()).min_by(|&i, &j| d(&centroids[i]).total_cmp(&d(&centroids[j]))).unwrap()
        };
        for p in labels.test_pixels() {
            assert_eq!(nearest(p) + 1, labels.grid[p] as usize, "seed {seed}, pixel {p}");
        }
    }
}

#[test]
fn impossible_layouts_fail_with_a_generation_error() {
    let crowded = SyntheticSpec {
        rows: 4,
        cols: 4,
        classes: 3,
        radius_min: 10.0,
        radius_max: 12.0,
        max_retries: 20,
        ..SyntheticSpec::default()
    };
    assert!(matches!(generate_synthetic(&crowded), Err(Error::Generation(_))));
    let packed = SyntheticSpec { bands: 1, classes: 10, max_retries: 20, ..SyntheticSpec::default() };
    assert!(matches!(generate_synthetic(&packed), Err(Error::Generation(_))));
    let same = SyntheticSpec { signatures: Some(vec![vec![0.0; 8]; 4]), ..SyntheticSpec::default() };
    assert!(matches!(generate_synthetic(&same), Err(Error::Config(_))));
    assert!(matches!(
        generate_synthetic(&SyntheticSpec { classes: 1, ..SyntheticSpec::default() }),
        Err(Error::Config(_))
    ));
}
