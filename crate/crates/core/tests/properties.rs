//! Property tests for module invariants not covered by the acceptance suite.

use std::collections::BTreeSet;

use proptest::prelude::*;

use evpr::descriptors::{
    accumulate_image, describe_window_set, AccumulationMode, Descriptor, DescriptorKind,
    DescriptorParams, DescriptorSequence, SadParams, SequenceSource,
};
use evpr::distance::{build_distance_matrix, member_label, DistanceMatrix, MatrixKind, Metric};
use evpr::ensemble::{
    combine, cross_window_members, enumerate_weight_grid, majority_vote, weight_search,
    EnsembleRule, DEFAULT_WEIGHT_GRID,
};
use evpr::evaluation::{precision_at_full_recall, GroundTruth, GtPair};
use evpr::events::{
    filter_bursts, remove_hot_pixels, Event, EventStream, Polarity, SensorGeometry,
};
use evpr::windowing::{build_window_set, sample_grid, split_fixed_count, CountSpec};

fn stream_strategy(max_events: usize) -> impl Strategy<Value = EventStream> {
    (1u16..12, 1u16..12)
        .prop_flat_map(move |(w, h)| {
            // A few "hot" coordinates are drawn more often than the rest.
            let hot = (0..w, 0..h);
            proptest::collection::vec(
                (
                    0u64..400,
                    prop_oneof![3 => (0..w, 0..h), 1 => hot],
                    any::<bool>(),
                ),
                0..max_events,
            )
            .prop_map(move |raw| (w, h, raw))
        })
        .prop_map(|(w, h, raw)| {
            let mut t = 0;
            let events = raw
                .into_iter()
                .map(|(dt, (x, y), on)| {
                    t += dt;
                    Event::new(t, x, y, if on { Polarity::On } else { Polarity::Off })
                })
                .collect();
            EventStream::new(SensorGeometry::new(w, h).unwrap(), events).unwrap()
        })
}

fn is_subsequence(small: &EventStream, big: &EventStream) -> bool {
    let mut it = big.events().iter();
    small.events().iter().all(|e| it.any(|f| f == e))
}

proptest! {
    #[test]
    fn hot_pixel_filter_is_idempotent_subsequence(s in stream_strategy(400), k in 0.5f64..6.0) {
        let (once, report) = remove_hot_pixels(&s, k).unwrap();
        let (twice, again) = remove_hot_pixels(&once, k).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(again.pixels.is_empty());
        prop_assert!(is_subsequence(&once, &s));
        prop_assert_eq!(s.len() - once.len(), report.removed_events);
        let flagged: BTreeSet<_> = report.pixels.iter().copied().collect();
        prop_assert!(once.events().iter().all(|e| !flagged.contains(&(e.x, e.y))));
    }

    #[test]
    fn burst_filter_is_idempotent_and_clean(s in stream_strategy(400), delta in 1u64..300, frac in 0.05f64..=1.0) {
        let once = filter_bursts(&s, delta, frac).unwrap();
        prop_assert_eq!(&filter_bursts(&once, delta, frac).unwrap(), &once);
        prop_assert!(is_subsequence(&once, &s));
        let limit = frac * s.geometry().pixel_count() as f64;
        let mut bins: std::collections::BTreeMap<u64, BTreeSet<(u16, u16)>> = Default::default();
        for e in once.events() {
            bins.entry(e.t / delta).or_default().insert((e.x, e.y));
        }
        prop_assert!(bins.values().all(|px| px.len() as f64 <= limit));
    }

    #[test]
    fn grid_spacing_is_exact(s in stream_strategy(200), dt in 1u64..5_000) {
        let grid = sample_grid(&s, dt).unwrap();
        prop_assert!(grid.windows(2).all(|p| p[1] - p[0] == dt));
        if let (Some(&first), Some(&last)) = (grid.first(), grid.last()) {
            prop_assert_eq!(first, s.first_t().unwrap());
            prop_assert!(last <= s.last_t().unwrap() && last + dt > s.last_t().unwrap());
        }
    }

    #[test]
    fn count_images_sum_to_window_size(s in stream_strategy(300), n in 1usize..50) {
        for w in split_fixed_count(&s, n).unwrap() {
            let img = accumulate_image(&w, &s, AccumulationMode::Count, 3.0).unwrap();
            prop_assert_eq!(img.pixels.iter().sum::<f64>(), n as f64);
            let signed = accumulate_image(&w, &s, AccumulationMode::SignedSum, 3.0).unwrap();
            prop_assert!(signed.pixels.iter().all(|v| v.abs() <= 3.0));
        }
    }
}

fn sequence(name: &str, vectors: Vec<Vec<f64>>) -> DescriptorSequence {
    let items = vectors
        .into_iter()
        .enumerate()
        .map(|(i, values)| Descriptor {
            t_us: i as u64 * 1_000_000,
            values,
            kind: DescriptorKind::External,
        })
        .collect();
    DescriptorSequence::new(SequenceSource::External(name.into()), items).unwrap()
}

fn vectors(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(
        proptest::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        n,
    )
}

proptest! {
    #[test]
    fn matrix_entries_match_direct_metric((q, r) in (1usize..6).prop_flat_map(|d| (vectors(1..6, d), vectors(1..6, d)))) {
        let (q, r) = (sequence("q", q), sequence("r", r));
        for metric in [Metric::Cosine, Metric::Sad] {
            let d = build_distance_matrix(&q, &r, metric).unwrap();
            for (i, qi) in q.items().iter().enumerate() {
                for (j, rj) in r.items().iter().enumerate() {
                    prop_assert_eq!(d.get(i, j), metric.distance(&qi.values, &rj.values).unwrap());
                }
            }
        }
    }

    #[test]
    fn self_matrix_diagonal_is_row_minimum(v in vectors(1..8, 4)) {
        let s = sequence("s", v);
        let d = build_distance_matrix(&s, &s, Metric::Cosine).unwrap();
        for i in 0..d.rows() {
            prop_assert_eq!(d.get(i, i), 0.0);
            prop_assert!(d.row(i).iter().all(|&x| (0.0..=2.0).contains(&x)));
        }
    }
}

fn stack(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<DistanceMatrix>> {
    (k, 1usize..6, 1usize..6).prop_flat_map(|(k, rows, cols)| {
        proptest::collection::vec(proptest::collection::vec(0u32..=128, rows * cols), k).prop_map(
            move |ms| {
                ms.into_iter()
                    .map(|cells| {
                        DistanceMatrix::new(
                            cells.iter().map(|&c| c as f64 / 64.0).collect(),
                            (0..rows as u64).collect(),
                            (0..cols as u64).collect(),
                            "m",
                        )
                        .unwrap()
                    })
                    .collect()
            },
        )
    })
}

fn argmins(d: &DistanceMatrix) -> Vec<usize> {
    evpr::distance::best_match_per_query(d)
        .iter()
        .map(|m| m.0)
        .collect()
}

proptest! {
    #[test]
    fn averaging_rules_stay_in_range(members in stack(3..8), raw in proptest::collection::vec(1u32..8, 8)) {
        let k = members.len();
        let lo = members.iter().flat_map(|m| m.data()).copied().fold(f64::INFINITY, f64::min);
        let hi = members.iter().flat_map(|m| m.data()).copied().fold(f64::NEG_INFINITY, f64::max);
        // Weights with mean 1 make the weighted rule a convex combination.
        let total: u32 = raw[..k].iter().sum();
        let weights: Vec<f64> = raw[..k].iter().map(|&w| w as f64 * k as f64 / total as f64).collect();
        for rule in [
            EnsembleRule::Mean,
            EnsembleRule::Median,
            EnsembleRule::Min,
            EnsembleRule::Max,
            EnsembleRule::TrimmedMean { trim: 1 },
            EnsembleRule::Weighted { weights },
        ] {
            let fused = combine(&members, &rule).unwrap();
            prop_assert!(fused.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12), "{} left [{}, {}]", rule, lo, hi);
        }
    }

    #[test]
    fn mean_argmin_ignores_common_scaling(members in stack(2..6), shift in -4i32..4, c in 0.01f64..100.0) {
        let base = argmins(&combine(&members, &EnsembleRule::Mean).unwrap());
        // Powers of two scale exactly, so even exact ties are preserved.
        let p = 2f64.powi(shift);
        let scaled: Vec<_> = members.iter().map(|m| m.map(|v| v * p).unwrap()).collect();
        prop_assert_eq!(&argmins(&combine(&scaled, &EnsembleRule::Mean).unwrap()), &base);
        // A generic factor only risks flipping exact ties; compare rows without them.
        let fused = combine(&members, &EnsembleRule::Mean).unwrap();
        let scaled: Vec<_> = members.iter().map(|m| m.map(|v| v * c).unwrap()).collect();
        let other = argmins(&combine(&scaled, &EnsembleRule::Mean).unwrap());
        for i in 0..fused.rows() {
            let row = fused.row(i);
            let min = row[base[i]];
            if row.iter().filter(|&&v| (v - min).abs() < 1e-9).count() == 1 {
                prop_assert_eq!(other[i], base[i]);
            }
        }
    }

    #[test]
    fn vote_rows_are_one_hot(members in stack(2..7)) {
        let v = majority_vote(&members).unwrap();
        prop_assert_eq!(v.kind(), MatrixKind::Votes);
        for i in 0..v.rows() {
            prop_assert_eq!(v.row(i).iter().filter(|&&x| x == 1.0).count(), 1);
            prop_assert!(v.row(i).iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }

    #[test]
    fn identical_members_vote_like_any_member(members in stack(1..2), copies in 2usize..6) {
        let same = vec![members[0].clone(); copies];
        let v = majority_vote(&same).unwrap();
        prop_assert_eq!(argmins(&members[0]), evpr::distance::best_match_per_query(&v).iter().map(|m| m.0).collect::<Vec<_>>());
    }

    #[test]
    fn precision_reads_votes_as_inverted_distances(members in stack(2..6)) {
        let v = majority_vote(&members).unwrap();
        let as_dist = DistanceMatrix::new(
            v.data().iter().map(|x| 1.0 - x).collect(),
            v.query_t_us().to_vec(),
            v.ref_t_us().to_vec(),
            "inv",
        )
        .unwrap();
        let gt = GroundTruth::new(
            v.query_t_us().iter().map(|&t| GtPair { query_t_us: t, ref_t_us: t as f64 }).collect(),
        )
        .unwrap();
        prop_assert_eq!(
            precision_at_full_recall(&v, &gt, 1).unwrap(),
            precision_at_full_recall(&as_dist, &gt, 1).unwrap()
        );
    }
}

#[test]
fn cross_window_uses_every_family_pair() {
    let fam = |name: &str, seed: f64| {
        sequence(
            name,
            (0..3).map(|i| vec![seed + i as f64, 1.0, -seed]).collect(),
        )
    };
    let q: Vec<_> = ["a", "b", "c"]
        .iter()
        .enumerate()
        .map(|(i, n)| fam(n, i as f64 + 1.0))
        .collect();
    let r: Vec<_> = ["a", "b", "c"]
        .iter()
        .enumerate()
        .map(|(i, n)| fam(n, i as f64 + 1.5))
        .collect();
    let members = cross_window_members(&q, &r, Metric::Cosine).unwrap();
    assert_eq!(members.len(), 9);
    let labels: BTreeSet<String> = members.iter().map(|m| m.label().to_string()).collect();
    let expected: BTreeSet<String> = q
        .iter()
        .flat_map(|a| r.iter().map(|b| member_label(a, b)))
        .collect();
    assert_eq!(labels.len(), 9);
    assert_eq!(labels, expected);
}

#[test]
fn weight_grid_enumeration() {
    assert_eq!(enumerate_weight_grid(1, &DEFAULT_WEIGHT_GRID).count(), 5);
    let two: Vec<_> = enumerate_weight_grid(2, &DEFAULT_WEIGHT_GRID).collect();
    assert_eq!(two.len(), 25);
    assert_eq!(two[0], vec![0.5, 0.5]);
    assert_eq!(two[1], vec![0.5, 0.75]);
    assert!(two
        .windows(2)
        .all(|p| p[0].partial_cmp(&p[1]) == Some(std::cmp::Ordering::Less)));
    assert_eq!(
        enumerate_weight_grid(3, &[1.0]).collect::<Vec<_>>(),
        vec![vec![1.0; 3]]
    );
    let nine = enumerate_weight_grid(9, &DEFAULT_WEIGHT_GRID);
    assert_eq!(nine.total(), 1_953_125);
    assert_eq!(nine.size_hint(), (1_953_125, Some(1_953_125)));
}

#[test]
fn weight_search_scores_match_direct_evaluation() {
    let m = |data: Vec<f64>| DistanceMatrix::new(data, vec![0, 1, 2], vec![0, 1, 2], "m").unwrap();
    let members = vec![
        m(vec![0.1, 0.5, 0.9, 0.6, 0.2, 0.3, 0.4, 0.4, 0.1]),
        m(vec![0.8, 0.1, 0.9, 0.1, 0.9, 0.7, 0.3, 0.2, 0.6]),
        m(vec![0.2, 0.3, 0.1, 0.5, 0.4, 0.2, 0.9, 0.1, 0.3]),
    ];
    let gt = GroundTruth::new(
        (0..3)
            .map(|t| GtPair {
                query_t_us: t,
                ref_t_us: t as f64,
            })
            .collect(),
    )
    .unwrap();
    let search = weight_search(&members, &gt, 0, &DEFAULT_WEIGHT_GRID).unwrap();
    assert_eq!(search.precisions.len(), 125);
    for (idx, weights) in enumerate_weight_grid(3, &DEFAULT_WEIGHT_GRID).enumerate() {
        let fused = combine(&members, &EnsembleRule::Weighted { weights }).unwrap();
        assert_eq!(
            search.precisions[idx],
            precision_at_full_recall(&fused, &gt, 0).unwrap().precision
        );
    }
    let best = search.precisions.iter().copied().fold(0.0, f64::max);
    assert_eq!(search.best_precision, best);
    assert_eq!(
        search.best_index,
        search.precisions.iter().position(|&p| p == best).unwrap()
    );
}

#[test]
fn described_sequences_share_the_grid() {
    let g = SensorGeometry::new(16, 12).unwrap();
    let events: Vec<Event> = (0..20_000u64)
        .map(|i| {
            Event::new(
                i * 150,
                (i * 7 % 16) as u16,
                (i * 5 % 12) as u16,
                Polarity::from_code((i % 2) as i64).unwrap(),
            )
        })
        .collect();
    let s = EventStream::new(g, events).unwrap();
    let ws = build_window_set(
        &s,
        &[CountSpec::Normalized(0.5), CountSpec::Absolute(40)],
        &[10_000, 33_000],
    )
    .unwrap();
    let grid = sample_grid(&s, 250_000).unwrap();
    let params = DescriptorParams {
        sad: SadParams {
            down_width: 8,
            down_height: 6,
            patch: 2,
        },
        ..DescriptorParams::default()
    };
    let seqs = describe_window_set(&ws, &s, &grid, &params).unwrap();
    assert_eq!(seqs.len(), 4);
    assert!(seqs
        .iter()
        .all(|q| q.timestamps() == grid && q.dim() == Some(48)));
    assert!(describe_window_set(&ws, &s, &[], &params).is_err());
}

fn small_params() -> evpr::pipeline::PipelineParams {
    evpr::pipeline::PipelineParams {
        counts: vec![CountSpec::Normalized(0.5), CountSpec::Normalized(1.0)],
        spans_us: vec![50_000],
        descriptor: DescriptorParams {
            sad: SadParams {
                down_width: 16,
                down_height: 12,
                patch: 4,
            },
            ..DescriptorParams::default()
        },
        dt_us: 500_000,
        loc_threshold_us: 2_000_000,
        sweep_points: 0,
        loc_sweep_us: vec![0, 1_000_000, u64::MAX],
        ..Default::default()
    }
}

fn small_config(seed: u64) -> evpr::synthetic::SyntheticConfig {
    let mut cfg = evpr::synthetic::SyntheticConfig::default().with_seed(seed);
    cfg.world.n_places = 8;
    cfg.world.width = 32;
    cfg.world.height = 24;
    cfg.world.segments_per_place = 4;
    cfg.reference.rate_scale = 0.25;
    cfg.query.rate_scale = 0.15;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn identical_traverses_match_perfectly(seed in 0u64..1000) {
        let data = evpr::synthetic::generate_dataset(&small_config(seed)).unwrap();
        let s = &data.reference.stream;
        let centers = &data.reference.place_centers_us;
        let gt = GroundTruth::from_us(&centers.iter().map(|&c| (c, c)).collect::<Vec<_>>()).unwrap();
        let out = evpr::pipeline::run_on_streams(s, s, &gt, &small_params()).unwrap();
        prop_assert!(out.member_precisions().iter().all(|&p| p == 1.0));
        prop_assert_eq!(out.ensemble.full_recall.precision, 1.0);
        // Exact time matches at threshold 0, everything at the widest threshold.
        prop_assert_eq!(out.ensemble.loc_curve[0].precision, 1.0);
        prop_assert_eq!(out.ensemble.loc_curve[2].precision, 1.0);
    }

    #[test]
    fn different_traverses_beat_chance(seed in 0u64..1000) {
        let cfg = small_config(seed);
        let report = evpr::synthetic::run_synthetic_experiment(&cfg, &small_params()).unwrap();
        let chance = 1.0 / cfg.world.n_places as f64;
        prop_assert!(report.ensemble_precision > chance, "{}", report.ensemble_precision);
        let loc = &report.output.ensemble.loc_curve;
        prop_assert!(loc.windows(2).all(|p| p[0].precision <= p[1].precision));
        prop_assert_eq!(loc[2].precision, 1.0);
    }

    #[test]
    fn single_family_ensemble_is_its_member(seed in 0u64..1000, rule in prop_oneof![
        Just(EnsembleRule::Mean), Just(EnsembleRule::Median), Just(EnsembleRule::Min), Just(EnsembleRule::Product)
    ]) {
        let params = evpr::pipeline::PipelineParams {
            counts: vec![CountSpec::Normalized(0.5)],
            spans_us: vec![],
            rule,
            ..small_params()
        };
        let report = evpr::synthetic::run_synthetic_experiment(&small_config(seed), &params).unwrap();
        prop_assert_eq!(report.output.members.len(), 1);
        prop_assert_eq!(report.output.ensemble.matrix.data(), report.output.members[0].matrix.data());
        prop_assert_eq!(report.ensemble_precision, report.member_precisions[0]);
    }
}
