//! Directional trends of the passive probability over small sweeps.

use std::collections::BTreeMap;

use rtbsim::harness::experiment::{run_experiment, ExperimentSpec, ResultRow};

fn passive(spec: &str) -> Vec<ResultRow> {
    let spec: ExperimentSpec = serde_json::from_str(spec).unwrap();
    let (rows, violations) = run_experiment(&spec).unwrap();
    assert_eq!(violations, 0);
    rows.into_iter()
        .filter(|r| r.metric == "passive_probability")
        .collect()
}

/// `later` may not undercut `earlier` by more than two standard errors.
fn not_below(earlier: &ResultRow, later: &ResultRow) -> bool {
    let slack = 2.0 * (earlier.stderr.powi(2) + later.stderr.powi(2)).sqrt();
    later.mean + slack >= earlier.mean
}

#[test]
fn more_fanout_or_longer_rounds_never_hurt() {
    let rows = passive(
        r#"{"base": {"n": 25, "f": 8, "fanout": 9, "link_delay": 1000, "round": 8000, "loss_prob": 0.8},
            "sweep": {"fanout": [5, 9, 13], "round_ratio": [6, 8, 10]},
            "runs_per_point": 60}"#,
    );
    let grid: BTreeMap<(usize, u64), &ResultRow> = rows
        .iter()
        .map(|r| ((r.point.config.fanout, r.point.config.round / r.point.config.link_delay), r))
        .collect();
    assert_eq!(grid.len(), 9);
    for x in [5, 9, 13] {
        for (a, b) in [(6, 8), (8, 10)] {
            assert!(not_below(grid[&(x, b)], grid[&(x, a)]), "X={x}: {a} vs {b}");
        }
    }
    for r in [6, 8, 10] {
        for (a, b) in [(5, 9), (9, 13)] {
            assert!(not_below(grid[&(b, r)], grid[&(a, r)]), "R={r}: X {a} vs {b}");
        }
    }
    assert!(grid[&(5, 6)].mean > grid[&(13, 10)].mean);
}

#[test]
fn more_byzantine_processes_never_help() {
    let rows = passive(
        r#"{"base": {"n": 25, "f": 8, "fanout": 9, "link_delay": 1000, "round": 8000, "loss_prob": 0.7},
            "sweep": {"byz_count": [0, 4, 8]},
            "adversary": {"behavior": "silent", "count": 0},
            "runs_per_point": 60}"#,
    );
    assert_eq!(rows.len(), 3);
    assert!(not_below(&rows[0], &rows[1]));
    assert!(not_below(&rows[1], &rows[2]));
    assert!(rows[2].mean > rows[0].mean);
}
