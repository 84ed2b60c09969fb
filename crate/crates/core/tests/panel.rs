mod common;

use cohort_lte::exec::Exec;
use cohort_lte::panel::{aggregate, build_panel, read_events, write_events, Arm, Dataset, PanelMode};
use cohort_lte::Error;
use common::{oracle_cell, random_log};
use proptest::prelude::*;

fn assert_matches_oracle(seed: u64, n_users: usize, duration: u32) {
    let records = random_log(seed, n_users, duration);
    for mode in [PanelMode::Metric, PanelMode::Presence] {
        let panel = build_panel(&records, duration, mode).unwrap();
        for arm in Arm::BOTH {
            for t0 in 0..duration {
                for t in 0..duration {
                    let Some(cell) = panel.cell(arm, t0, t) else {
                        assert!(t < t0);
                        continue;
                    };
                    match oracle_cell(&records, arm, t0, t, mode) {
                        Some(o) => {
                            assert!(cell.usable, "{arm} {t0} {t}");
                            assert_eq!(cell.n as usize, o.n);
                            assert!((cell.mean - o.mean).abs() <= 1e-12, "{cell:?} vs {o:?}");
                            assert!((cell.var_of_mean - o.var_of_mean).abs() <= 1e-12, "{cell:?} vs {o:?}");
                        }
                        None => assert!(!cell.usable, "{cell:?}"),
                    }
                }
            }
        }
    }
}

#[test]
fn fifty_user_log_matches_brute_force() {
    for seed in 0..20 {
        assert_matches_oracle(seed, 50, 7);
    }
}

#[test]
fn large_log_matches_brute_force_across_chunks() {
    // more than one aggregation chunk
    assert_matches_oracle(99, 5000, 5);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let records = random_log(4, 6000, 6);
    let data = Dataset::from_records(&records, 6).unwrap();
    for mode in [PanelMode::Metric, PanelMode::Presence] {
        let a = aggregate(&data, mode, None, Exec::Sequential);
        let b = aggregate(&data, mode, None, Exec::Parallel);
        assert_eq!(a, b);
    }
}

#[test]
fn multiplicity_equals_duplicated_users() {
    let records = random_log(8, 40, 5);
    let data = Dataset::from_records(&records, 5).unwrap();
    let mult: Vec<u32> = (0..records.len() as u32).map(|i| i % 3).collect();

    let mut expanded = Vec::new();
    let mut sorted = records.clone();
    sorted.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    for (r, &m) in sorted.iter().zip(&mult) {
        for c in 0..m {
            let mut copy = r.clone();
            copy.user_id = format!("{}#{c}", r.user_id);
            expanded.push(copy);
        }
    }
    let weighted = aggregate(&data, PanelMode::Metric, Some(&mult), Exec::Sequential);
    let direct = build_panel(&expanded, 5, PanelMode::Metric).unwrap();
    for (a, b) in weighted.cells().zip(direct.cells()) {
        assert_eq!(a.n, b.n);
        assert_eq!(a.usable, b.usable);
        if a.usable {
            assert!((a.mean - b.mean).abs() < 1e-12);
            assert!((a.var_of_mean - b.var_of_mean).abs() < 1e-12);
        }
    }
}

#[test]
fn malformed_row_names_its_line() {
    let text = "user_id,arm,entry_day,day,metric,active\nu1,T,0,0,1,1\nu1,T,0,1,abc,1\n";
    match read_events(text.as_bytes()) {
        Err(Error::MalformedCsv { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let bad_arm = "user_id,arm,entry_day,day,metric,active\nu1,X,0,0,1,1\n";
    assert!(matches!(
        read_events(bad_arm.as_bytes()),
        Err(Error::MalformedCsv { line: 2, .. })
    ));
}

#[test]
fn sub_day_timestamps_are_truncated() {
    let text = "user_id,arm,entry_day,day,metric,active\nu1,T,0,0.25,1,1\nu1,T,0,1.9,2,1\n";
    let (records, duration) = read_events(text.as_bytes()).unwrap();
    assert_eq!(duration, 2);
    let days: Vec<u32> = records[0].observations.iter().map(|o| o.day).collect();
    assert_eq!(days, vec![0, 1]);
}

#[test]
fn csv_round_trip_preserves_panel() {
    let records = random_log(5, 60, 6);
    let mut buf = Vec::new();
    write_events(&records, &mut buf).unwrap();
    let (back, _) = read_events(buf.as_slice()).unwrap();
    let a = build_panel(&records, 6, PanelMode::Metric).unwrap();
    let b = build_panel(&back, 6, PanelMode::Metric).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_invariant(seed in 0u64..1000, n in 3usize..60, duration in 2u32..8, rot in 0usize..60) {
        let records = random_log(seed, n, duration);
        let mut shuffled = records.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        for mode in [PanelMode::Metric, PanelMode::Presence] {
            prop_assert_eq!(
                build_panel(&records, duration, mode).unwrap(),
                build_panel(&shuffled, duration, mode).unwrap()
            );
        }
    }

    #[test]
    fn presence_bounds_and_counts(seed in 0u64..1000, n in 3usize..60, duration in 2u32..8) {
        let records = random_log(seed, n, duration);
        let metric = build_panel(&records, duration, PanelMode::Metric).unwrap();
        let presence = build_panel(&records, duration, PanelMode::Presence).unwrap();
        for (m, p) in metric.cells().zip(presence.cells()) {
            prop_assert!(m.n <= p.n);
            if p.usable {
                prop_assert!((0.0..=1.0).contains(&p.mean));
            }
            prop_assert!(m.var_of_mean >= 0.0);
            if m.t < m.t0 {
                prop_assert!(!m.usable && !p.usable);
            }
        }
    }
}
