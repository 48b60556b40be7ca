use itosr_core::dataset::{load_dataset, save_dataset, Encoding, FeatureDataset};
use itosr_core::matrix::Matrix;
use itosr_core::metrics::auroc;
use itosr_core::pipeline::balance_counts;
use itosr_core::sampling::{
    compute_threshold_stats, group_scores, knn_consistency_filter, Group, PseudoLabelGrouping,
    ThresholdStats,
};
use proptest::prelude::*;

fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e6f32..1e6f32, n).prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn dataset() -> impl Strategy<Value = FeatureDataset> {
    (1usize..6, 2usize..5, 0usize..12, 0usize..12).prop_flat_map(|(d, c, extra, n_test)| {
        let n_train = c + extra;
        (
            f32_values(n_train * d),
            // Every known class appears at least once.
            prop::collection::vec(1..=c as u32, extra).prop_map(move |mut v| {
                v.extend(1..=c as u32);
                v
            }),
            f32_values(n_test * d),
            prop::option::of(prop::collection::vec(1..=c as u32 + 1, n_test)),
        )
            .prop_map(move |(x, y, xt, truth)| {
                FeatureDataset::new(
                    Matrix::from_vec(n_train, d, x).unwrap(),
                    y,
                    Matrix::from_vec(n_test, d, xt).unwrap(),
                    truth,
                    c,
                )
                .unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips_bitwise(ds in dataset(), binary in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("train"), dir.path().join("test"));
        let enc = if binary { Encoding::Binary } else { Encoding::Text };
        save_dataset(&ds, &a, &b, enc).unwrap();
        let back = load_dataset(&a, &b).unwrap();
        prop_assert_eq!(back, ds);
    }
}

fn grouping_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<u32>, f64, f64, f64)> {
    (1usize..80, 2usize..7).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(1..=c as u32, n),
            0.0f64..1.0,
            0.0f64..0.3,
            0.01f64..5.0,
        )
    })
}

proptest! {
    #[test]
    fn grouping_is_a_partition_matching_thresholds((s, labels, mu, delta, alpha) in grouping_inputs()) {
        let c = *labels.iter().max().unwrap() as usize;
        let stats = ThresholdStats { mu, delta, alpha };
        let g = group_scores(&s, &labels, &stats, c);
        let (k, u, und) = g.counts();
        prop_assert_eq!(k + u + und, s.len());
        for i in 0..s.len() {
            let expect = if s[i] > mu + alpha * delta {
                Group::Known
            } else if s[i] < mu - alpha * delta {
                Group::Unknown
            } else {
                Group::Undetermined
            };
            prop_assert_eq!(g.groups[i], expect);
            prop_assert_eq!(g.tentative[i] == c as u32 + 1, expect == Group::Unknown);
        }
    }

    #[test]
    fn raising_alpha_only_widens_the_band(
        (s, labels, mu, delta, alpha) in grouping_inputs(),
        extra in 0.0f64..3.0,
    ) {
        let c = *labels.iter().max().unwrap() as usize;
        let narrow = group_scores(&s, &labels, &ThresholdStats { mu, delta, alpha }, c);
        let wide = group_scores(&s, &labels, &ThresholdStats { mu, delta, alpha: alpha + extra }, c);
        for (a, b) in narrow.groups.iter().zip(&wide.groups) {
            if *a == Group::Undetermined {
                prop_assert_eq!(*b, Group::Undetermined);
            }
        }
    }

    #[test]
    fn threshold_stats_match_two_pass(v in prop::collection::vec(-10.0f64..10.0, 2..50)) {
        let st = compute_threshold_stats(&v, 2.5).unwrap();
        let n = v.len() as f64;
        let mut m = 0.0;
        for x in &v {
            m += x;
        }
        m /= n;
        let mut var = 0.0;
        for x in &v {
            var += (x - m) * (x - m);
        }
        prop_assert!((st.mu - m).abs() < 1e-12);
        prop_assert!((st.delta - (var / n).sqrt()).abs() < 1e-12);
    }
}

/// Grouping over `n` points in `d` dims. Continuous coordinates make equal
/// distances a measure-zero event.
fn knn_inputs() -> impl Strategy<Value = (Matrix, PseudoLabelGrouping, usize)> {
    (4usize..40, 1usize..4, 2usize..5).prop_flat_map(|(n, d, c)| {
        (
            prop::collection::vec(-10.0f64..10.0, n * d),
            prop::collection::vec(0u8..3, n),
            prop::collection::vec(1..=c as u32, n),
            1..n,
        )
            .prop_map(move |(data, tags, labels, k)| {
                let groups: Vec<Group> = tags
                    .iter()
                    .map(|t| match t {
                        0 => Group::Known,
                        1 => Group::Unknown,
                        _ => Group::Undetermined,
                    })
                    .collect();
                let tentative = groups
                    .iter()
                    .zip(&labels)
                    .map(|(g, &l)| {
                        if *g == Group::Unknown {
                            c as u32 + 1
                        } else {
                            l
                        }
                    })
                    .collect();
                let grouping = PseudoLabelGrouping {
                    groups,
                    tentative,
                    confidence: vec![0.5; n],
                    c,
                };
                (Matrix::from_vec(n, d, data).unwrap(), grouping, k)
            })
    })
}

fn permute(m: &Matrix, g: &PseudoLabelGrouping, perm: &[usize]) -> (Matrix, PseudoLabelGrouping) {
    let pm = m.select_rows(perm);
    let pg = PseudoLabelGrouping {
        groups: perm.iter().map(|&i| g.groups[i]).collect(),
        tentative: perm.iter().map(|&i| g.tentative[i]).collect(),
        confidence: perm.iter().map(|&i| g.confidence[i]).collect(),
        c: g.c,
    };
    (pm, pg)
}

proptest! {
    #[test]
    fn filter_is_permutation_invariant(
        (m, g, k, perm) in knn_inputs().prop_flat_map(|(m, g, k)| {
            let n = g.len();
            (Just(m), Just(g), Just(k), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        }),
    ) {
        let base = knn_consistency_filter(&g, &m, k).unwrap();
        let (pm, pg) = permute(&m, &g, &perm);
        let moved = knn_consistency_filter(&pg, &pm, k).unwrap();
        let mut mapped: Vec<(usize, u32)> = moved
            .indices
            .iter()
            .zip(&moved.labels)
            .map(|(&i, &l)| (perm[i], l))
            .collect();
        mapped.sort_unstable();
        let expect: Vec<(usize, u32)> = base.indices.iter().copied().zip(base.labels.iter().copied()).collect();
        prop_assert_eq!(mapped, expect);
    }

    #[test]
    fn filter_is_scale_invariant((m, g, k) in knn_inputs(), scale in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0])) {
        let mut scaled = m.clone();
        scaled.map_inplace(|v| v * scale);
        prop_assert_eq!(
            knn_consistency_filter(&g, &m, k).unwrap(),
            knn_consistency_filter(&g, &scaled, k).unwrap()
        );
    }

    #[test]
    fn filter_selects_only_grouped_rows((m, g, k) in knn_inputs()) {
        let sel = knn_consistency_filter(&g, &m, k).unwrap();
        prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
        for (&i, &l) in sel.indices.iter().zip(&sel.labels) {
            prop_assert!(g.groups[i] != Group::Undetermined);
            prop_assert_eq!(l, g.tentative[i]);
        }
    }
}

fn pairwise_auroc(s: &[f64], known: &[bool]) -> f64 {
    let mut num = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for i in 0..s.len() {
        if known[i] {
            np += 1;
        } else {
            nn += 1;
        }
    }
    for i in 0..s.len() {
        for j in 0..s.len() {
            if known[i] && !known[j] {
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / (np as f64 * nn as f64)
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 4.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, k)| {
                k.iter().any(|&x| x) && k.iter().any(|&x| !x)
            })
    })
}

proptest! {
    #[test]
    fn auroc_equals_pairwise((s, k) in scored()) {
        prop_assert_eq!(auroc(&s, &k).unwrap(), pairwise_auroc(&s, &k));
    }

    #[test]
    fn auroc_invariant_under_monotone_map((s, k) in scored()) {
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v + 1.0).exp()).collect();
        prop_assert_eq!(auroc(&s, &k).unwrap(), auroc(&mapped, &k).unwrap());
    }

    #[test]
    fn auroc_flips_with_labels((s, k) in scored()) {
        let flipped: Vec<bool> = k.iter().map(|x| !x).collect();
        let a = auroc(&s, &k).unwrap();
        let b = auroc(&s, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balance_equalises_totals(
        hists in (2usize..9).prop_flat_map(|c| (
            prop::collection::vec(0usize..200, c),
            prop::collection::vec(0usize..200, c),
        ))
    ) {
        let (train, sel) = hists;
        let targets = balance_counts(&train, &sel);
        let totals: Vec<usize> = (0..train.len()).map(|i| train[i] + sel[i] + targets[i]).collect();
        prop_assert!(totals.iter().all(|&t| t == totals[0]));
        prop_assert_eq!(totals[0], (0..train.len()).map(|i| train[i] + sel[i]).max().unwrap());
    }
}
