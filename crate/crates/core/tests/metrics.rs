use hsinet::data::LabelMap;
use hsinet::gradcheck::rng;
use hsinet::metrics::{confusion, default_palette, encode_ppm, export_map, oa_aa_kappa, ConfusionMatrix};
use hsinet::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
    ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

#[test]
fn hand_computed_two_class_report() {
    let r = oa_aa_kappa(&cm(&[&[50, 10], &[5, 35]])).unwrap();
    assert!((r.oa - 0.85).abs() < 1e-15);
    assert!((r.per_class[0].unwrap() - 50.0 / 60.0).abs() < 1e-15);
    assert!((r.per_class[1].unwrap() - 0.875).abs() < 1e-15);
    assert!((r.aa - 0.8541666666666666).abs() < 1e-15);
    // p_e = (60·55 + 40·45) / 10000 = 0.51
    assert!((r.kappa - (0.85 - 0.51) / 0.49).abs() < 1e-14);
    assert!((r.kappa - 0.693877551).abs() < 1e-9);
}

#[test]
fn diagonal_and_uniform_matrices() {
    let r = oa_aa_kappa(&cm(&[&[4, 0, 0], &[0, 7, 0], &[0, 0, 1]])).unwrap();
    assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
    let r = oa_aa_kappa(&cm(&[&[25, 25], &[25, 25]])).unwrap();
    assert_eq!((r.oa, r.kappa), (0.5, 0.0));
}

#[test]
fn degenerate_and_empty_matrices() {
    // A single populated class: p_e = 1.
    let r = oa_aa_kappa(&cm(&[&[9, 0], &[0, 0]])).unwrap();
    assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
    assert_eq!(r.per_class, vec![Some(1.0), None]);
    assert_eq!(r.undefined_classes(), vec![1]);
    let r = oa_aa_kappa(&cm(&[&[0, 3], &[0, 0]])).unwrap();
    assert_eq!((r.oa, r.aa), (0.0, 0.0));
    assert!(matches!(oa_aa_kappa(&ConfusionMatrix::new(3)), Err(Error::Contract(_))));
    assert!(ConfusionMatrix::from_counts(vec![vec![1, 2], vec![3]]).is_err());
}

#[test]
fn report_serializes_with_the_expected_keys() {
    let r = oa_aa_kappa(&cm(&[&[50, 10], &[5, 35]])).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["aa", "counts", "kappa", "oa", "per_class"]);
    assert_eq!(v["counts"], serde_json::json!([[50, 10], [5, 35]]));
}

fn small_labels() -> LabelMap {
    let names = vec!["a".into(), "b".into(), "c".into()];
    let grid = vec![1, 2, 3, 0, 1, 2];
    LabelMap::new(
        2,
        3,
        grid,
        names,
        vec![true, false, false, false, false, false],
        vec![false, true, true, false, true, true],
    )
    .unwrap()
}

#[test]
fn confusion_examples() {
    let labels = small_labels();
    let c = confusion(&[1, 2, 3, 0, 1, 2], &labels, &labels.test_mask).unwrap();
    assert_eq!(c.rows(), &[vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    let single = vec![false, true, false, false, false, false];
    let c = confusion(&[0, 3, 0, 0, 0, 0], &labels, &single).unwrap();
    assert_eq!(c.total(), 1);
    assert_eq!(c.get(1, 2), 1);
    assert!(matches!(confusion(&[1, 4, 3, 0, 1, 2], &labels, &labels.test_mask), Err(Error::Contract(_))));
    assert!(matches!(confusion(&[1, 0, 3, 0, 1, 2], &labels, &labels.test_mask), Err(Error::Contract(_))));
    let unlabeled = vec![false, false, false, true, false, false];
    assert!(matches!(confusion(&[1; 6], &labels, &unlabeled), Err(Error::Contract(_))));
}

#[test]
fn confusion_matches_a_double_loop() {
    let mut r = rng(4);
    for _ in 0..20 {
        let p = r.gen_range(2..6);
        let truth: Vec<u16> = (0..100).map(|i| if i < p { i as u16 + 1 } else { r.gen_range(0..=p as u16) }).collect();
        let names = (0..p).map(|c| format!("c{c}")).collect();
        let mask: Vec<bool> = truth.iter().map(|&t| t > 0 && r.gen_bool(0.7)).collect();
        let labels = LabelMap::new(10, 10, truth.clone(), names, vec![false; 100], mask.clone()).unwrap();
        let pred: Vec<u16> = (0..100).map(|_| r.gen_range(1..=p as u16)).collect();
        let c = confusion(&pred, &labels, &mask).unwrap();
        for t in 1..=p as u16 {
            for q in 1..=p as u16 {
                let mut n = 0;
                for i in 0..100 {
                    if mask[i] && truth[i] == t && pred[i] == q {
                        n += 1;
                    }
                }
                assert_eq!(c.get(t as usize - 1, q as usize - 1), n);
            }
        }
        assert_eq!(c.total() as usize, mask.iter().filter(|m| **m).count());
    }
}

fn arb_matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2usize..7).prop_flat_map(|p| proptest::collection::vec(proptest::collection::vec(0u64..40, p), p))
}

proptest! {
    #[test]
    fn scores_are_invariant_under_class_permutation(counts in arb_matrix(), seed in 0u64..1000) {
        let a = ConfusionMatrix::from_counts(counts.clone()).unwrap();
        prop_assume!(a.total() > 0);
        let p = counts.len();
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut rng(seed));
        let permuted = (0..p).map(|i| (0..p).map(|j| counts[perm[i]][perm[j]]).collect()).collect();
        let ra = oa_aa_kappa(&a).unwrap();
        let rb = oa_aa_kappa(&ConfusionMatrix::from_counts(permuted).unwrap()).unwrap();
        prop_assert_eq!(ra.oa.to_bits(), rb.oa.to_bits());
        prop_assert_eq!(ra.aa.to_bits(), rb.aa.to_bits());
        prop_assert_eq!(ra.kappa.to_bits(), rb.kappa.to_bits());
    }

    #[test]
    fn oa_is_the_row_weighted_mean_and_kappa_is_bounded(counts in arb_matrix()) {
        let c = ConfusionMatrix::from_counts(counts).unwrap();
        prop_assume!(c.total() > 0);
        let r = oa_aa_kappa(&c).unwrap();
        let t = c.total() as f64;
        let weighted: f64 = (0..c.classes())
            .filter_map(|k| r.per_class[k].map(|a| a * c.row_sum(k) as f64 / t))
            .sum();
        prop_assert!((weighted - r.oa).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.oa) && (0.0..=1.0).contains(&r.aa));
        prop_assert!((-1.0..=1.0).contains(&r.kappa), "kappa {}", r.kappa);
    }
}

#[test]
fn ppm_bytes_match_a_hand_assembled_image() {
    let palette = [[0, 0, 0], [255, 0, 0], [0, 0, 255]];
    let bytes = encode_ppm(&[1, 2, 0, 1], 2, 2, &palette).unwrap();
    let mut expected = b"P6\n2 2\n255\n".to_vec();
    expected.extend([255, 0, 0, 0, 0, 255, 0, 0, 0, 255, 0, 0]);
    assert_eq!(bytes, expected);
    assert!(matches!(encode_ppm(&[3, 0, 0, 0], 2, 2, &palette), Err(Error::Contract(_))));
}

#[test]
fn unlabeled_maps_are_black_and_exports_are_deterministic() {
    let palette = default_palette(16);
    assert_eq!(palette.len(), 17);
    assert_eq!(palette[0], [0, 0, 0]);
    let bytes = encode_ppm(&[0; 12], 3, 4, &palette).unwrap();
    assert!(bytes[b"P6\n4 3\n255\n".len()..].iter().all(|&b| b == 0));

    let dir = tempfile::tempdir().unwrap();
    let map: Vec<u16> = (0..20).map(|i| (i % 5) as u16).collect();
    export_map(&map, 4, 5, &default_palette(4), dir.path().join("a.ppm")).unwrap();
    export_map(&map, 4, 5, &default_palette(4), dir.path().join("b.ppm")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.ppm")).unwrap(), std::fs::read(dir.path().join("b.ppm")).unwrap());
    assert!(matches!(export_map(&map, 4, 5, &palette, dir.path().join("missing/x.ppm")), Err(Error::Io { .. })));
}
