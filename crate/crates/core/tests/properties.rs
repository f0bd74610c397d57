use osmcaa::loss::{wcl_forward, LossConfig};
use osmcaa::mining::{
    combine_weights, construct_pairs, osm_negative_score, osm_positive_score, Mode,
};
use osmcaa::numerics::{l2_normalize_rows, norm, pairwise_distances};
use osmcaa::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn far_from_zero(m: &Matrix) -> bool {
    (0..m.rows()).all(|i| norm(m.row(i)) > 1e-3)
}

fn labels_strategy() -> impl Strategy<Value = Vec<usize>> {
    (2usize..5, 1usize..4).prop_map(|(c, k)| {
        (0..c)
            .flat_map(|class| std::iter::repeat_n(class, k))
            .collect()
    })
}

proptest! {
    #[test]
    fn distances_obey_triangle_inequality(m in matrix(6, 4)) {
        let d = pairwise_distances(&m).unwrap();
        for i in 0..6 {
            prop_assert_eq!(d.get(i, i), 0.0);
            for j in 0..6 {
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                for k in 0..6 {
                    prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalization_is_idempotent(m in matrix(5, 3)) {
        prop_assume!(far_from_zero(&m));
        let once = l2_normalize_rows(&m).unwrap();
        let twice = l2_normalize_rows(&once).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() < 1e-14);
        }
        for i in 0..5 {
            prop_assert!((norm(once.row(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn osm_scores_stay_in_range(d in 0.0f64..2.0, sigma in 0.05f64..3.0, alpha in 0.05f64..3.0) {
        let sp = osm_positive_score(d, sigma);
        let sn = osm_negative_score(d, alpha);
        // Underflows to exactly 0 for distances far beyond the bandwidth.
        prop_assert!((0.0..=1.0).contains(&sp));
        prop_assert!(osm_positive_score(d + 0.1, sigma) <= sp);
        prop_assert!(osm_negative_score(d + 0.1, alpha) <= sn);
        prop_assert!((0.0..=alpha).contains(&sn));
        if d >= alpha {
            prop_assert_eq!(sn, 0.0);
        }
    }

    #[test]
    fn pair_sets_partition_all_pairs(labels in labels_strategy()) {
        let m = labels.len();
        let pairs = construct_pairs(&labels);
        prop_assert_eq!(pairs.len(), m * (m - 1) / 2);
        prop_assert!(pairs.positives.iter().all(|&(i, j)| i < j && labels[i] == labels[j]));
        prop_assert!(pairs.negatives.iter().all(|&(i, j)| i < j && labels[i] != labels[j]));
    }

    #[test]
    fn combined_weights_respect_mode(
        labels in labels_strategy(),
        seed_scores in prop::collection::vec(0.0f64..1.0, 64),
    ) {
        let pairs = construct_pairs(&labels);
        let take = |n: usize, off: usize| -> Vec<f64> {
            (0..n).map(|i| seed_scores[(i + off) % seed_scores.len()]).collect()
        };
        let s_pos = take(pairs.positives.len(), 0);
        let s_neg = take(pairs.negatives.len(), 7);
        let a_img: Vec<f64> = take(labels.len(), 13).into_iter().map(|a| a.max(1e-6)).collect();

        let base = combine_weights(s_pos.clone(), s_neg.clone(), a_img.clone(), &pairs, Mode::Baseline);
        prop_assert!(base.w_pos.iter().chain(&base.w_neg).all(|&w| w == 1.0));

        let osm = combine_weights(s_pos.clone(), s_neg.clone(), a_img.clone(), &pairs, Mode::Osm);
        prop_assert_eq!(&osm.w_pos, &s_pos);
        prop_assert_eq!(&osm.w_neg, &s_neg);

        let full = combine_weights(s_pos, s_neg, a_img.clone(), &pairs, Mode::OsmCaa);
        for (idx, &(i, j)) in pairs.positives.iter().enumerate() {
            let a = a_img[i].min(a_img[j]);
            prop_assert_eq!(full.a_pair_pos[idx], a);
            prop_assert!(full.w_pos[idx] <= full.s_pos[idx]);
        }
    }

    #[test]
    fn loss_is_affine_in_lambda(m in matrix(6, 3), lambda in 0.0f64..1.0) {
        prop_assume!(far_from_zero(&m));
        let f = l2_normalize_rows(&m).unwrap();
        let d = pairwise_distances(&f).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let pairs = construct_pairs(&labels);
        let w = combine_weights(vec![1.0; 3], vec![1.0; 12], vec![1.0; 6], &pairs, Mode::Baseline);
        let at = |lambda: f64| wcl_forward(&d, &w, &pairs, &LossConfig { lambda, ..LossConfig::default() });
        let mixed = at(lambda);
        let expected = (1.0 - lambda) * at(0.0).loss_total + lambda * at(1.0).loss_total;
        prop_assert!((mixed.loss_total - expected).abs() < 1e-12);
    }
}
