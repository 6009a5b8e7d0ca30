//! Navigation metrics: hand cases, brute-force alignment and ordering invariants.

mod common;

use common::{dtw_brute, random_walk};
use navpetl::metrics::*;
use navpetl::world::{generate_world, shortest_path, WorldGraph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nodes 2 m apart on a line.
fn line(n: usize) -> WorldGraph {
    let positions = (0..n).map(|i| (i as f64 * 2.0, 0.0)).collect();
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    WorldGraph::from_edges(0, positions, &edges).unwrap()
}

fn rec(path: &[usize], reference: &[usize]) -> TrajectoryRecord {
    TrajectoryRecord::new(path.to_vec(), reference.to_vec()).unwrap()
}

#[test]
fn path_length_cases() {
    let g = line(5);
    assert_eq!(path_length(&g, &[3]), 0.0);
    assert_eq!(path_length(&g, &[1, 2]), 2.0);
    let p = [0, 1, 2, 1, 2, 3, 4];
    let by_edge: f64 = p.windows(2).map(|w| g.edge_length(w[0], w[1]).unwrap()).sum();
    assert_eq!(path_length(&g, &p), by_edge);
}

#[test]
fn success_and_error_cases() {
    let g = line(6);
    let r = rec(&[0, 1, 2, 3], &[0, 1, 2, 3]);
    assert_eq!((nav_error(&g, &r), success(&g, &r), oracle_success(&g, &r)), (0.0, 1.0, 1.0));
    // Stopping one node (2 m) short still counts.
    let r = rec(&[0, 1, 2], &[0, 1, 2, 3]);
    assert_eq!((nav_error(&g, &r), success(&g, &r)), (2.0, 1.0));
    // Exactly at the threshold fails: a 3 m edge.
    let g3 = WorldGraph::from_edges(0, vec![(0.0, 0.0), (3.0, 0.0)], &[(0, 1)]).unwrap();
    assert_eq!(success(&g3, &rec(&[0], &[0, 1])), 0.0);
    // Passing the goal and walking on: oracle success only.
    let r = rec(&[0, 1, 2, 3, 4, 5], &[0, 1, 2]);
    assert_eq!((success(&g, &r), oracle_success(&g, &r)), (0.0, 1.0));
}

#[test]
fn spl_cases() {
    let g = line(6);
    assert_eq!(spl(&g, &rec(&[0, 1, 2], &[0, 1, 2])), 1.0);
    // Shortest 4 m, executed 8 m.
    assert_eq!(spl(&g, &rec(&[0, 1, 2, 1, 2], &[0, 1, 2])), 0.5);
    assert_eq!(spl(&g, &rec(&[0, 1, 2, 3, 4, 5], &[0, 1, 2])), 0.0);
    assert_eq!(spl(&g, &rec(&[0], &[0, 1, 2, 3, 4])), 0.0);
    // Start == goal with no movement degenerates to SR.
    assert_eq!(spl(&g, &rec(&[2], &[2])), 1.0);
}

#[test]
fn goal_progress_cases() {
    let g = line(6);
    assert_eq!(goal_progress(&g, &rec(&[1, 2, 3], &[1, 2, 3])), 4.0);
    assert_eq!(goal_progress(&g, &rec(&[1], &[1, 2, 3])), 0.0);
    assert_eq!(goal_progress(&g, &rec(&[1, 0], &[1, 2, 3])), -2.0);
}

#[test]
fn dtw_cases() {
    let g = line(6);
    let d = |a: usize, b: usize| g.geodesic(a, b);
    assert_eq!(dtw(&[0, 1, 2], &[0, 1, 2], d), 0.0);
    assert_eq!(ndtw(&g, &rec(&[0, 1, 2], &[0, 1, 2])), 1.0);
    assert_eq!(dtw(&[0], &[1], |_, _| 5.0), 5.0);
    let r = rec(&[0, 1], &[0, 1, 2]);
    let want = (-dtw(&r.path, &r.reference, d) / (3.0 * 3.0)).exp();
    assert_eq!(ndtw(&g, &r), want);
    assert_eq!(sdtw(&g, &r), want);
}

#[test]
fn records_need_a_consistent_start() {
    assert!(TrajectoryRecord::new(vec![1, 2], vec![0, 2]).is_err());
    assert!(TrajectoryRecord::new(vec![1], vec![]).is_err());
}

proptest! {
    #[test]
    fn dtw_matches_brute_force_and_is_symmetric(
        a in prop::collection::vec(0usize..6, 1..6),
        b in prop::collection::vec(0usize..6, 1..6),
    ) {
        let g = line(6);
        let d = |x: usize, y: usize| g.geodesic(x, y);
        let fast = dtw(&a, &b, d);
        prop_assert_eq!(fast, dtw_brute(&a, &b, &d));
        prop_assert_eq!(fast, dtw(&b, &a, d));
    }

    #[test]
    fn pointwise_metric_ordering(seed in any::<u64>()) {
        let g = generate_world(seed, 4, 4, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, t) = (rng.gen_range(0..16), rng.gen_range(0..16));
        let (reference, _) = shortest_path(&g, s, t).unwrap();
        let r = rec(&random_walk(&g, &mut rng, s, 8), &reference);
        let m = record_metrics(&g, &r);
        prop_assert!(0.0 <= m.spl && m.spl <= m.sr && m.sr <= m.osr);
        prop_assert!(m.sdtw <= m.ndtw && m.ndtw <= 1.0 && m.ndtw > 0.0);
        if m.sr == 1.0 && m.ne == 0.0 {
            prop_assert_eq!(m.gp, g.geodesic(s, t));
        }
    }
}

#[test]
fn aggregate_matches_two_pass_means() {
    let g = generate_world(9, 5, 5, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<TrajectoryRecord> = (0..40)
        .map(|_| {
            let (s, t) = (rng.gen_range(0..25), rng.gen_range(0..25));
            let reference = shortest_path(&g, s, t).unwrap().0;
            rec(&random_walk(&g, &mut rng, s, 6), &reference)
        })
        .collect();
    let report = aggregate(&g, &records).unwrap();
    let per: Vec<[f64; 8]> = records.iter().map(|r| record_metrics(&g, r).values()).collect();
    let percent = [false, false, true, true, true, false, false, false];
    for k in 0..8 {
        let mut sum = 0.0;
        for v in &per {
            sum += v[k];
        }
        let mean = sum / per.len() as f64;
        let want = if percent[k] { 100.0 * mean } else { mean };
        assert!((report.values()[k] - want).abs() < 1e-12, "{}", MetricReport::NAMES[k]);
    }

    let one = aggregate(&g, &records[..1]).unwrap();
    let own = record_metrics(&g, &records[0]);
    assert_eq!((one.tl, one.ne, one.gp, one.ndtw), (own.tl, own.ne, own.gp, own.ndtw));
    assert_eq!(one.sr, 100.0 * own.sr);
    assert!(aggregate(&g, &[]).is_err());
}

#[test]
fn all_success_reports_full_marks() {
    let g = line(4);
    let r = rec(&[0, 1, 2, 3], &[0, 1, 2, 3]);
    let report = aggregate(&g, &[r.clone(), r]).unwrap();
    assert_eq!((report.sr, report.spl, report.osr), (100.0, 100.0, 100.0));
    let tsv = report.to_tsv();
    let names: Vec<&str> = tsv.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, MetricReport::NAMES);
    assert!(tsv.contains("SR\t100.00"));
}
