mod common;

use proptest::prelude::*;
use trajsim::augment::{masked_len, point_mask, point_shift, simplify_dp_indices, truncate};
use trajsim::eval::{hr_at_k, mean_rank_embeddings, r_a_at_b, split_odd_even};
use trajsim::geo::{project, unproject, Point, Trajectory};
use trajsim::grid::derived_rng;
use trajsim::io::{parse_dataset, to_canonical_string, Format};
use trajsim::measures::{frechet_discrete, hausdorff};
use trajsim::search::{build_ivf, knn_flat, knn_ivf, EmbeddingStore};

fn traj_strategy(min: usize, max: usize) -> impl Strategy<Value = Trajectory> {
    prop::collection::vec((0.0f64..2000.0, 0.0f64..2000.0), min..=max)
        .prop_map(|v| Trajectory::new("p", v.into_iter().map(|(x, y)| Point::new(x, y)).collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mercator_round_trips(lon in -179.9f64..179.9, lat in -84.0f64..84.0) {
        let (l2, p2) = unproject(project(lon, lat).unwrap());
        prop_assert!((l2 - lon).abs() < 1e-9 && (p2 - lat).abs() < 1e-9);
    }

    #[test]
    fn canonical_text_is_a_fixed_point(t in traj_strategy(2, 30)) {
        let once = to_canonical_string(&[t]);
        let back = parse_dataset(&once, Format::A);
        prop_assert!(back.errors.is_empty());
        prop_assert_eq!(to_canonical_string(&back.trajectories), once);
    }

    #[test]
    fn mask_keeps_order_and_exact_count(t in traj_strategy(2, 80), rho in 0.05f64..0.95, seed in 0u64..1000) {
        prop_assume!(masked_len(t.len(), rho) >= 2);
        let out = point_mask(&t, rho, &mut derived_rng(seed, 0)).unwrap();
        prop_assert_eq!(out.len(), masked_len(t.len(), rho).min(t.len()));
        let mut j = 0;
        for p in &out.points {
            while t.points[j] != *p { j += 1; }
            j += 1;
        }
    }

    #[test]
    fn truncation_is_contiguous(t in traj_strategy(2, 80), rho in 0.05f64..0.95, seed in 0u64..1000) {
        prop_assume!(rho * t.len() as f64 >= 1.0);
        let out = truncate(&t, rho, &mut derived_rng(seed, 0)).unwrap();
        let start = t.points.iter().position(|p| *p == out.points[0]).unwrap();
        prop_assert_eq!(&t.points[start..start + out.len()], &out.points[..]);
    }

    #[test]
    fn shift_is_bounded(t in traj_strategy(2, 40), rho_m in 1.0f64..500.0, seed in 0u64..1000) {
        let out = point_shift(&t, rho_m, 0.5, &mut derived_rng(seed, 0)).unwrap();
        for (a, b) in t.points.iter().zip(&out.points) {
            prop_assert!((a.x - b.x).abs() <= rho_m + 1e-9 && (a.y - b.y).abs() <= rho_m + 1e-9);
        }
    }

    #[test]
    fn simplification_keeps_endpoints_sorted(t in traj_strategy(2, 60), eps in 0.0f64..500.0) {
        let idx = simplify_dp_indices(&t.points, eps);
        prop_assert_eq!(idx[0], 0);
        prop_assert_eq!(*idx.last().unwrap(), t.len() - 1);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(idx, common::dp_recursive(&t.points, eps));
    }

    #[test]
    fn measures_are_symmetric_metrics(a in traj_strategy(1, 15), b in traj_strategy(1, 15)) {
        let h = hausdorff(&a.points, &b.points).unwrap();
        prop_assert!((h - hausdorff(&b.points, &a.points).unwrap()).abs() < 1e-9);
        prop_assert_eq!(hausdorff(&a.points, &a.points).unwrap(), 0.0);
        let f = frechet_discrete(&a.points, &b.points).unwrap();
        prop_assert!((f - frechet_discrete(&b.points, &a.points).unwrap()).abs() < 1e-9);
        prop_assert_eq!(frechet_discrete(&a.points, &a.points).unwrap(), 0.0);
    }

    #[test]
    fn odd_even_interleave_reconstructs(t in traj_strategy(4, 50)) {
        let (a, b) = split_odd_even(&t);
        let mut merged = Vec::new();
        for i in 0..a.len() {
            merged.push(a.points[i]);
            if i < b.len() { merged.push(b.points[i]); }
        }
        prop_assert_eq!(merged, t.points);
    }

    #[test]
    fn knn_sorted_unique_and_ivf_partitions(seed in 0u64..500, n in 5usize..120, k in 1usize..15) {
        let mut r = common::rng(seed);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..4).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect()).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("{i}")).collect();
        let store = EmbeddingStore::from_rows(ids, &rows).unwrap();
        let q = &rows[0];
        let flat = knn_flat(&store, q, k).unwrap();
        prop_assert!(flat.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
        let uniq: std::collections::HashSet<_> = flat.hits.iter().map(|h| h.id.clone()).collect();
        prop_assert_eq!(uniq.len(), flat.hits.len());
        prop_assert_eq!(flat.clamped, k >= n);

        let kc = (n as f64).sqrt().ceil() as usize;
        let idx = build_ivf(&store, kc, 10, &mut derived_rng(seed, 1)).unwrap();
        let mut all: Vec<usize> = idx.lists.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(knn_ivf(&idx, &store, q, k, kc).unwrap(), flat);
    }

    #[test]
    fn mean_rank_depends_only_on_ordering(seed in 0u64..500, scale in 0.1f32..10.0, shift in -5.0f32..5.0) {
        let mut r = common::rng(seed);
        let q: Vec<Vec<f32>> = (0..5).map(|_| (0..3).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect()).collect();
        let d: Vec<Vec<f32>> = (0..20).map(|_| (0..3).map(|_| rand::Rng::random_range(&mut r, -1.0f32..1.0)).collect()).collect();
        let ids: Vec<String> = (0..20).map(|i| format!("{i:02}")).collect();
        let truth = [0, 3, 7, 11, 19];
        let base = mean_rank_embeddings(&q, &d, &ids, &truth).unwrap();
        // a common affine map of every vector scales all L1 distances uniformly
        let map = |v: &Vec<Vec<f32>>| v.iter().map(|r| r.iter().map(|x| x * scale.max(0.5).round() + shift.round()).collect()).collect::<Vec<Vec<f32>>>();
        prop_assert_eq!(base, mean_rank_embeddings(&map(&q), &map(&d), &ids, &truth).unwrap());
        prop_assert!(base >= 1.0 && base <= 20.0);
    }

    #[test]
    fn hit_ratios_bounded(seed in 0u64..500, k in 1usize..30) {
        use rand::seq::SliceRandom;
        let mut r = common::rng(seed);
        let mut a: Vec<usize> = (0..30).collect();
        let mut b = a.clone();
        a.shuffle(&mut r);
        b.shuffle(&mut r);
        let h = hr_at_k(&a, &b, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert_eq!(hr_at_k(&a, &a, k).unwrap(), 1.0);
        let r5 = r_a_at_b(&a, &b, 5, 20).unwrap();
        prop_assert!((0.0..=1.0).contains(&r5));
    }
}
