mod common;

use common::fixture;
use delib_core::eval::{
    correlate, ingest_scores, ingest_scores_str, p_value, pearson_r, rater_mean, t_statistic,
    table_report, EvalError, ScoreDataset, ScoreRecord, Tail,
};
use proptest::prelude::*;

fn fixture_sets() -> Vec<delib_core::ScoreDataset> {
    ingest_scores(fixture("scores.csv")).unwrap()
}

#[test]
fn fixture_has_twenty_records_per_scenario() {
    let sets = fixture_sets();
    assert_eq!(sets.len(), 2);
    for s in &sets {
        assert_eq!(s.records.len(), 20);
        assert_eq!(s.raters(), ["Expert 1", "Expert 2"]);
    }
}

#[test]
fn fixture_reproduces_table_values() {
    let report = table_report(&fixture_sets(), Tail::Two).unwrap();
    let text = report.to_text();
    let expected = "\
Mean believability score and inter-rater agreement (two-tailed)

ukraine_funding (n = 10)
  Expert 1                          8.1
  Expert 2                          6.8
  Pearson's Correlation, P-value    0.63, 0.05

needed_bills (n = 10)
  Expert 1                          6.4
  Expert 2                          7.2
  Pearson's Correlation, P-value    0.59, 0.07
";
    assert_eq!(text, expected);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["tail"], "two");
    assert_eq!(json["scenarios"][0]["correlation"]["df"], 8);
}

#[test]
fn one_tailed_report_halves_positive_p() {
    let two = table_report(&fixture_sets(), Tail::Two).unwrap();
    let one = table_report(&fixture_sets(), Tail::OneGreater).unwrap();
    for (a, b) in two.scenarios.iter().zip(&one.scenarios) {
        assert!((a.correlation.p_value / 2.0 - b.correlation.p_value).abs() < 1e-15);
    }
}

#[test]
fn constructed_mean_fixture() {
    let ds = ScoreDataset {
        scenario_id: "s".into(),
        records: [8.0, 9.0, 8.0, 8.0, 8.0, 8.0, 8.0, 8.0, 8.0, 8.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| ScoreRecord {
                run_id: i.to_string(),
                rater_id: "Expert 1".into(),
                score: v,
            })
            .collect(),
    };
    assert!((rater_mean(&ds, "Expert 1").unwrap() - 8.1f64).abs() < 1e-12);
    assert!(matches!(rater_mean(&ds, "Nobody"), Err(EvalError::UnknownRater(_))));
}

#[test]
fn known_p_values() {
    let p = p_value(0.63f64, 10, Tail::Two).unwrap();
    assert!((p - 0.0510).abs() < 0.001, "{p}");
    let p = p_value(0.59f64, 10, Tail::Two).unwrap();
    assert!((p - 0.0727).abs() < 0.001, "{p}");
    let t = t_statistic(0.63f64, 10).unwrap();
    assert!((t - 2.2946).abs() < 1e-4, "{t}");
}

#[test]
fn malformed_score_files() {
    match ingest_scores::<f64>(fixture("malformed/scores_unpaired.csv")) {
        Err(e @ EvalError::Pairing(_)) => assert!(e.to_string().contains("run 7")),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        ingest_scores::<f64>(fixture("malformed/scores_out_of_range.csv")),
        Err(EvalError::Range { .. })
    ));
    assert!(matches!(
        ingest_scores_str::<f64>("scenario,run,rater,score\n"),
        Err(EvalError::Parse(_))
    ));
    assert!(matches!(
        ingest_scores_str::<f64>("scenario_id,run_id,rater_id,score\ns,1,a,x\n"),
        Err(EvalError::Parse(_))
    ));
    assert!(matches!(
        ingest_scores_str::<f64>("scenario_id,run_id,rater_id,score\ns,1,a,3\ns,1,a,4\n"),
        Err(EvalError::Duplicate { .. })
    ));
    assert!(matches!(table_report::<f64>(&[], Tail::Two), Err(EvalError::Empty)));
}

#[test]
fn degenerate_and_short_inputs() {
    assert!(matches!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(EvalError::DegenerateInput("x"))));
    assert!(matches!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]), Err(EvalError::TooFewObservations(2))));
    assert!(matches!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(3, 2))));
    assert!(matches!(p_value(1.0f64, 10, Tail::Two), Err(EvalError::Domain(_))));
    assert!(matches!(p_value(0.5f64, 2, Tail::Two), Err(EvalError::Domain(_))));
}

#[test]
fn single_precision_agrees() {
    let x: Vec<f32> = vec![8., 7., 6., 10., 8., 9., 10., 6., 9., 8.];
    let y: Vec<f32> = vec![7., 3., 4., 9., 8., 6., 7., 6., 9., 9.];
    let c = correlate(&x, &y, Tail::Two).unwrap();
    assert!((c.r - 0.628_709_4).abs() < 1e-5);
    assert!((c.p_value - 0.051_526_65).abs() < 1e-4);
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(-100.0f64..100.0, n),
        )
    })
}

proptest! {
    #[test]
    fn pearson_properties((x, y) in pairs(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
        let r = pearson_r(&x, &y).unwrap();
        prop_assert!(r.abs() <= 1.0);
        prop_assert!((pearson_r(&y, &x).unwrap() - r).abs() < 1e-12);
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson_r(&ax, &y).unwrap() - r).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((pearson_r(&neg, &y).unwrap() + r).abs() < 1e-12);
    }

    #[test]
    fn p_decreases_with_strength(r1 in 0.0f64..0.99, r2 in 0.0f64..0.99, n in 4usize..60) {
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        prop_assume!(hi - lo > 1e-9);
        let pl = p_value(lo, n, Tail::Two).unwrap();
        let ph = p_value(hi, n, Tail::Two).unwrap();
        prop_assert!(ph <= pl);
        prop_assert!((0.0..=1.0).contains(&pl));
        prop_assert!((p_value(-hi, n, Tail::Two).unwrap() - ph).abs() < 1e-12);
    }

    #[test]
    fn mean_translates(scores in prop::collection::vec(0.0f64..5.0, 1..30), c in 0.0f64..5.0) {
        let make = |shift: f64| ScoreDataset {
            scenario_id: "s".into(),
            records: scores
                .iter()
                .enumerate()
                .map(|(i, &v)| ScoreRecord { run_id: i.to_string(), rater_id: "r".into(), score: v + shift })
                .collect(),
        };
        let m0 = rater_mean(&make(0.0), "r").unwrap();
        let m1 = rater_mean(&make(c), "r").unwrap();
        prop_assert!((m1 - m0 - c).abs() < 1e-9);
    }
}
