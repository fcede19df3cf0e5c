//! Confusion-matrix scores and corpus statistics against brute-force counts.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2seg::data::stats::{cmcc, connected_components, corpus_stats};
use t2seg::data::{ConfusionMatrix, MaskImage, IGNORE};
use t2seg::par::Exec;

#[test]
fn scores_match_pixel_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..100 {
        let n = 2 + case % 11;
        let (pred, truth) = common::random_mask_pair(&mut rng, 8, n);
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(&pred, &truth).unwrap();
        let want = common::brute_scores(pred.labels(), truth.labels(), n);
        assert_eq!(cm.pixel_accuracy().unwrap(), want.acc, "case {case}");
        assert_eq!(cm.iou_per_class(), want.iou, "case {case}");
        assert_eq!(cm.miou().unwrap(), want.miou, "case {case}");
    }
}

#[test]
fn cmcc_matches_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 6;
    let masks: Vec<MaskImage> = (0..50).map(|_| common::blob_mask(&mut rng, 24, n)).collect();
    for m in &masks {
        for c in 1..n as u8 {
            assert_eq!(connected_components(m, c), common::union_find_components(m, c));
        }
    }
    for c in 1..n as u8 {
        assert_eq!(cmcc(&masks, c).ok(), common::oracle_cmcc(&masks, c), "class {c}");
    }
}

#[test]
fn diagonal_touching_pixels_are_one_component() {
    let mut m = MaskImage::filled(4, 4, 0);
    m.set(0, 0, 1);
    m.set(1, 1, 1);
    m.set(3, 3, 1);
    assert_eq!(connected_components(&m, 1), 2);
}

#[test]
fn all_ignored_truth_is_undefined() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&MaskImage::filled(2, 2, 0), &MaskImage::filled(2, 2, IGNORE)).unwrap();
    assert!(cm.pixel_accuracy().is_err());
    assert!(cm.miou().is_err());
}

fn matrix(n: usize, counts: Vec<u64>) -> ConfusionMatrix {
    ConfusionMatrix::from_counts(n, counts).unwrap()
}

fn counts(n: usize) -> impl Strategy<Value = Vec<u64>> {
    proptest::collection::vec(0u64..1000, n * n)
}

fn mask(size: usize) -> impl Strategy<Value = MaskImage> {
    proptest::collection::vec(0u8..4, size * size).prop_map(move |v| MaskImage::new(size, size, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_commutative_and_associative(a in counts(4), b in counts(4), c in counts(4)) {
        let (a, b, c) = (matrix(4, a), matrix(4, b), matrix(4, c));
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        let mut ba = b.clone();
        ba.merge(&a).unwrap();
        prop_assert_eq!(&ab, &ba);
        let mut ab_c = ab.clone();
        ab_c.merge(&c).unwrap();
        let mut bc = b.clone();
        bc.merge(&c).unwrap();
        let mut a_bc = a.clone();
        a_bc.merge(&bc).unwrap();
        prop_assert_eq!(ab_c, a_bc);
    }

    #[test]
    fn parallel_accumulation_matches_sequential(seed in any::<u64>(), images in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(MaskImage, MaskImage)> = (0..images).map(|_| common::random_mask_pair(&mut rng, 8, 5)).collect();
        let mut sequential = ConfusionMatrix::new(5);
        for (p, t) in &pairs {
            sequential.accumulate(p, t).unwrap();
        }
        let parts = Exec::Parallel.map(&pairs, |(p, t)| {
            let mut cm = ConfusionMatrix::new(5);
            cm.accumulate(p, t).unwrap();
            cm
        });
        let mut merged = ConfusionMatrix::new(5);
        for part in &parts {
            merged.merge(part).unwrap();
        }
        prop_assert_eq!(merged, sequential);
    }

    #[test]
    fn components_are_translation_invariant(m in mask(6), dx in 0usize..5, dy in 0usize..5) {
        let mut shifted = MaskImage::filled(12, 12, 0);
        for y in 0..6 {
            for x in 0..6 {
                shifted.set(x + dx, y + dy, m.get(x, y));
            }
        }
        for c in 1..4u8 {
            prop_assert_eq!(connected_components(&m, c), connected_components(&shifted, c));
        }
    }

    #[test]
    fn mask_png_round_trip(labels in proptest::collection::vec(any::<u8>(), 1..200), width in 1usize..20) {
        let height = labels.len().div_ceil(width);
        let mut labels = labels;
        labels.resize(width * height, 0);
        let m = MaskImage::new(width, height, labels).unwrap();
        prop_assert_eq!(MaskImage::decode_png(&m.encode_png().unwrap()).unwrap(), m);
    }

    #[test]
    fn pixel_ratios_sum_to_one(seed in any::<u64>(), count in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks: Vec<MaskImage> = (0..count).map(|_| common::blob_mask(&mut rng, 16, 6)).collect();
        masks[0].set(0, 0, 1);
        let total: f64 = corpus_stats(&masks, 6).unwrap().iter().map(|s| s.pixel_ratio).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }
}
