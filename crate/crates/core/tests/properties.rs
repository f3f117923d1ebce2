mod common;

use cacon::augment::{
    augment_view, make_triplet, AgeGroup, AugmentConfig, IdentityAgeTransform, Image, SourceImage,
};
use cacon::io::manifest::{parse_manifest, write_manifest, Split, SubjectRecord};
use cacon::loss::{batch_loss, nt_xent_triplet, sim_matrix, EmbeddingBatch, Temperature, Views};
use cacon::numerics::{ctns, Tensor};
use cacon::seed;
use proptest::prelude::*;
use rand::Rng;

fn rows_strategy(max_b: usize, views: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_b, 2usize..=8).prop_flat_map(move |(b, d)| {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero row", |r| {
                r.iter().map(|x| x * x).sum::<f64>() > 1e-3
            }),
            b * views,
        )
    })
}

fn loss_of(rows: &[Vec<f64>], views: Views, tau: f64) -> f64 {
    let z = Tensor::from_rows(rows).unwrap();
    batch_loss(&EmbeddingBatch::new(z, views).unwrap(), Temperature::new(tau).unwrap()).unwrap()
}

fn image_strategy() -> impl Strategy<Value = Image> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, h * w * 3).prop_map(move |px| Image::new(h, w, px).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_positive_row_scaling(
        rows in rows_strategy(4, 3),
        scales in prop::collection::vec(0.01f64..100.0, 12),
    ) {
        let before = loss_of(&rows, Views::Triplet, 0.1);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .zip(scales.iter().cycle())
            .map(|(r, s)| r.iter().map(|x| x * s).collect())
            .collect();
        prop_assert!((loss_of(&scaled, Views::Triplet, 0.1) - before).abs() < 1e-6);
    }

    #[test]
    fn loss_is_invariant_to_reordering_sources(rows in rows_strategy(4, 3), key in any::<u64>()) {
        let b = rows.len() / 3;
        let mut perm: Vec<usize> = (0..b).collect();
        let mut rng = seed::rng(key, &[]);
        for i in (1..b).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = (0..3)
            .flat_map(|v| perm.iter().map(move |&p| v * b + p))
            .map(|r| rows[r].clone())
            .collect();
        let a = loss_of(&rows, Views::Triplet, 0.2);
        prop_assert!((loss_of(&permuted, Views::Triplet, 0.2) - a).abs() < 1e-10);
    }

    #[test]
    fn triplet_anchor_loss_is_non_negative(rows in rows_strategy(4, 3), tau in 0.05f64..2.0) {
        let s = sim_matrix(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for r in 0..rows.len() {
            prop_assert!(nt_xent_triplet(r, &s, Temperature::new(tau).unwrap()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn dropping_the_third_block_matches_the_pair_oracle(rows in rows_strategy(4, 3)) {
        let b = rows.len() / 3;
        let pair_rows = rows[..2 * b].to_vec();
        let ours = loss_of(&pair_rows, Views::Pair, 0.1);
        prop_assert!((ours - common::brute_batch_loss(&pair_rows, 2, 0.1)).abs() < 1e-10);
    }

    #[test]
    fn ctns_round_trip_is_bit_exact(
        dims in prop::collection::vec(1usize..5, 0..4),
        key in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let mut rng = seed::rng(key, &[]);
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let t = Tensor::new(dims, data).unwrap();
        let back: Tensor<f32> = ctns::decode(&ctns::encode(&t).unwrap()).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augmented_views_stay_in_range_and_keep_size(img in image_strategy(), key in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let out = augment_view(&img, &cfg, &mut seed::rng(key, &[])).unwrap();
        prop_assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn triplets_are_a_pure_function_of_image_and_seed(img in image_strategy(), key in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let src = SourceImage { index: 0, image: &img };
        let a = make_triplet(src, &cfg, &IdentityAgeTransform, &mut seed::rng(key, &[])).unwrap();
        let b = make_triplet(src, &cfg, &IdentityAgeTransform, &mut seed::rng(key, &[])).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_strength_augmentation_is_identity(img in image_strategy(), key in any::<u64>()) {
        let out = augment_view(&img, &AugmentConfig::identity(), &mut seed::rng(key, &[])).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn manifest_round_trip(
        rows in prop::collection::vec((any::<u64>(), 0u32..120, 0usize..3, "[a-z]{1,8}"), 0..20),
    ) {
        let records: Vec<SubjectRecord> = rows
            .into_iter()
            .map(|(s, a, k, p)| SubjectRecord {
                subject_id: s,
                age: a,
                split: [Split::Train, Split::Test, Split::Finetune][k],
                path: format!("{p}.ctns"),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        prop_assert_eq!(parse_manifest(&text, None).unwrap(), records);
    }
}

#[test]
fn sampled_age_groups_are_uniform() {
    let img = Image::filled(4, 4, [0.5; 3]);
    let cfg = AugmentConfig::default();
    let mut counts = [0usize; 8];
    let mut rng = seed::rng(9, &[]);
    let n = 10_000;
    for i in 0..n {
        let src = SourceImage { index: i, image: &img };
        let t = make_triplet(src, &cfg, &IdentityAgeTransform, &mut rng).unwrap();
        counts[t.age_group.index() as usize] += 1;
    }
    let p = 1.0 / 8.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (g, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - n as f64 * p).abs() <= 3.0 * sigma,
            "group {g}: {c} of {n}"
        );
    }
    assert_eq!(AgeGroup::from_age(39.0).index(), 7);
}
