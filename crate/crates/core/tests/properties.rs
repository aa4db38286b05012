use proptest::prelude::*;

use emoe_core::cli::checkpoint::{Checkpoint, CheckpointKind};
use emoe_core::engine::eu_from_members;
use emoe_core::experiments::stats::{jt_null_counts, jt_statistic, quartile_sizes, quartile_split, welch_t_test};
use emoe_core::math::{softmax, Tensor};
use emoe_core::unet::Geometry;

fn pairs(groups: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for k in 0..groups.len() {
        for l in k + 1..groups.len() {
            for &a in &groups[k] {
                for &b in &groups[l] {
                    s += if a < b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
    }
    s
}

fn group() -> impl Strategy<Value = Vec<f64>> {
    // small integer grid so ties are common
    prop::collection::vec((-4i32..5).prop_map(f64::from), 1..7)
}

fn members() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 1usize..10).prop_flat_map(|(m, d)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), m))
}

fn tensors(v: &[Vec<f64>]) -> Vec<Tensor> {
    v.iter().map(|x| Tensor::from_vec(x.clone()).unwrap()).collect()
}

fn binomial(n: u64, k: u64) -> i128 {
    (0..k).fold(1i128, |acc, i| acc * (n - i) as i128 / (i + 1) as i128)
}

proptest! {
    #[test]
    fn quartiles_partition_in_order(scores in prop::collection::vec(-1e3f64..1e3, 4..200)) {
        let q = quartile_split(&scores).unwrap();
        let sizes = quartile_sizes(scores.len());
        for (k, &size) in sizes.iter().enumerate() {
            prop_assert_eq!(q.iter().filter(|&&v| v == k).count(), size);
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    prop_assert!(q[i] <= q[j]);
                }
            }
        }
    }

    #[test]
    fn jt_matches_pair_enumeration(groups in prop::collection::vec(group(), 2..6)) {
        prop_assert_eq!(jt_statistic(&groups).unwrap(), pairs(&groups));
        let reversed: Vec<Vec<f64>> = groups.iter().rev().cloned().collect();
        let total: usize = (0..groups.len())
            .flat_map(|k| (k + 1..groups.len()).map(move |l| (k, l)))
            .map(|(k, l)| groups[k].len() * groups[l].len())
            .sum();
        prop_assert_eq!(jt_statistic(&groups).unwrap() + jt_statistic(&reversed).unwrap(), total as f64);
    }

    #[test]
    fn jt_null_counts_are_a_symmetric_distribution(sizes in prop::collection::vec(1usize..6, 2..5)) {
        let counts = jt_null_counts(&sizes);
        let n: usize = sizes.iter().sum();
        let mut left = n as u64;
        let mut multinomial = 1i128;
        for &m in &sizes {
            multinomial *= binomial(left, m as u64);
            left -= m as u64;
        }
        prop_assert_eq!(counts.iter().sum::<i128>(), multinomial);
        let rev: Vec<i128> = counts.iter().rev().copied().collect();
        prop_assert_eq!(counts, rev);
    }

    #[test]
    fn eu_ignores_member_order_and_shift(v in members(), shift in -5.0f64..5.0, rot in 0usize..6) {
        let base = eu_from_members(&tensors(&v)).unwrap();
        prop_assert!(base >= 0.0);
        let mut rotated = v.clone();
        let r = rot % rotated.len();
        rotated.rotate_left(r);
        prop_assert!((eu_from_members(&tensors(&rotated)).unwrap() - base).abs() <= 1e-12 * (1.0 + base));
        let shifted: Vec<Vec<f64>> = v.iter().map(|m| m.iter().map(|x| x + shift).collect()).collect();
        prop_assert!((eu_from_members(&tensors(&shifted)).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
    }

    #[test]
    fn welch_directions_are_complementary(
        a in prop::collection::vec(-5.0f64..5.0, 2..30),
        b in prop::collection::vec(-5.0f64..5.0, 2..30),
    ) {
        let ab = welch_t_test(&a, &b).unwrap().p_value;
        let ba = welch_t_test(&b, &a).unwrap().p_value;
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab + ba - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let p = softmax(&logits).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn checkpoints_round_trip(
        data in prop::collection::vec(prop::collection::vec(any::<f64>(), 1..20), 0..5),
        strings in prop::collection::vec("\\PC{0,12}", 0..3),
        flip in any::<prop::sample::Index>(),
    ) {
        let ckpt = Checkpoint {
            kind: CheckpointKind::Expert,
            geometry: Geometry::default(),
            strings,
            tensors: tensors(&data),
        };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "p".as_ref()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        let mut bad = bytes;
        let i = flip.index(bad.len());
        bad[i] ^= 0x40;
        prop_assert!(Checkpoint::from_bytes(&bad, "p".as_ref()).is_err());
    }
}
