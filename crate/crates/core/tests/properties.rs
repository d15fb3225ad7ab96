// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use emocircuit::canon;
use emocircuit::eval::{fs_score, hit_rate, EmotionWheel};
use emocircuit::numerics::kernels;
use proptest::prelude::*;

fn wheels(maps: Vec<Vec<u8>>) -> Vec<EmotionWheel> {
    maps.into_iter()
        .enumerate()
        .map(|(w, cores)| {
            let mut mapping: BTreeMap<String, String> =
                cores.iter().enumerate().map(|(i, c)| (format!("k{i}"), format!("c{c}"))).collect();
            mapping.insert("label".into(), format!("c{}", cores[0]));
            EmotionWheel { wheel_id: format!("w{w}"), mapping }
        })
        .collect()
}

proptest! {
    #[test]
    fn float_format_round_trips_to_ten_digits(x in -1e300f64..1e300) {
        let s = canon::format_float(x);
        let y: f64 = s.parse().unwrap();
        prop_assert!((x - y).abs() <= 1e-9 * x.abs());
        prop_assert_eq!(canon::format_float(y), s);
    }

    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-700.0f64..700.0, 1..64)) {
        let mut r = row.clone();
        kernels::softmax_in_place(&mut r);
        let s: f64 = r.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(r.iter().all(|p| p.is_finite() && *p >= 0.0));
    }

    #[test]
    fn hit_rate_is_multiple_of_wheel_count(
        maps in prop::collection::vec(prop::collection::vec(0u8..4, 6), 1..6),
        picks in prop::collection::btree_set(0usize..8, 0..8),
    ) {
        let ws = wheels(maps);
        let pred: BTreeSet<String> = picks.iter().map(|i| format!("k{i}")).collect();
        let h = hit_rate(&pred, "label", &ws).unwrap();
        let k = h * ws.len() as f64;
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((k - k.round()).abs() < 1e-12);
    }

    #[test]
    fn fs_is_symmetric_and_bounded(
        maps in prop::collection::vec(prop::collection::vec(0u8..4, 6), 1..6),
        a in prop::collection::btree_set(0usize..6, 0..6),
        b in prop::collection::btree_set(0usize..6, 0..6),
    ) {
        let ws = wheels(maps);
        let to = |s: &BTreeSet<usize>| s.iter().map(|i| format!("k{i}")).collect::<BTreeSet<String>>();
        let (pa, pb) = (to(&a), to(&b));
        let ab = fs_score(&pa, &pb, &ws).unwrap().fs;
        let ba = fs_score(&pb, &pa, &ws).unwrap().fs;
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        if !pa.is_empty() {
            prop_assert!((fs_score(&pa, &pa, &ws).unwrap().fs - 1.0).abs() < 1e-12);
        }
    }
}
