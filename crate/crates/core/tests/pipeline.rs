mod common;

use predcal::design::FutureDesign;
use predcal::input::{read_binomial_file, read_counts_file, read_mixed_file};
use predcal::pipeline::{intervals_for, run_task, HistoricalData, NewData, ResultTable, TaskKind, TaskSpec};
use predcal::{CalibrationSettings, Error};

use common::*;

fn settings(nboot: usize) -> CalibrationSettings {
    CalibrationSettings {
        nboot,
        ..CalibrationSettings::default()
    }
}

fn csv(table: &ResultTable) -> String {
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn qp_task(future: Option<FutureDesign>, newdat: Option<NewData>) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::QuasiPois,
        history: HistoricalData::Counts(counts("qp_dat1.csv")),
        model: None,
        future,
        newdat,
        settings: settings(2000),
    }
}

#[test]
fn quasi_poisson_with_observed_counts() {
    let (name, values) = read_counts_file(&fixture("qp_dat2.csv")).unwrap();
    let table = run_task(&qp_task(None, Some(NewData::Counts { name, values }))).unwrap();
    let text = csv(&table);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("y,hist_mean,quant_calib,pred_se,lower,upper,cover"));
    assert_eq!(table.rows.len(), 3);
    assert!(table.rows.iter().all(|r| r.lower == table.rows[0].lower && r.upper == table.rows[0].upper));
    for (row, y) in table.rows.iter().zip([44.0, 74.0, 36.0]) {
        assert_eq!(row.cover, Some(row.lower <= y && y <= row.upper));
    }
}

#[test]
fn observed_data_does_not_change_the_calibration() {
    let (name, values) = read_counts_file(&fixture("qp_dat2.csv")).unwrap();
    let with = run_task(&qp_task(None, Some(NewData::Counts { name, values }))).unwrap();
    let without = run_task(&qp_task(Some(FutureDesign::CountRepeats(3)), None)).unwrap();
    assert_eq!(with.calibration, without.calibration);
    assert_eq!(csv(&without).lines().count(), 2);
}

#[test]
fn binomial_rows_per_future_cluster() {
    let newdat = read_binomial_file(&fixture("bb_dat2.csv")).unwrap();
    let task = TaskSpec {
        kind: TaskKind::BetaBin,
        history: HistoricalData::Binomial(binomial("qb_dat1.csv")),
        model: None,
        future: None,
        newdat: Some(NewData::Binomial(newdat)),
        settings: settings(1000),
    };
    let table = run_task(&task).unwrap();
    let text = csv(&table);
    assert!(text.starts_with("succ,fail,total,hist_prob,quant_calib,pred_se,lower,upper,cover\n"));
    let totals: Vec<u64> = table.rows.iter().map(|r| r.total.unwrap()).collect();
    assert_eq!(totals, [40, 50, 60]);
    for r in &table.rows {
        assert!(r.lower >= 0.0 && r.upper <= r.total.unwrap() as f64);
    }
}

#[test]
fn both_future_and_newdat_is_a_mismatch() {
    let task = qp_task(
        Some(FutureDesign::CountRepeats(3)),
        Some(NewData::Counts {
            name: "y".into(),
            values: vec![1, 2, 3],
        }),
    );
    assert!(matches!(run_task(&task), Err(Error::TaskMismatch(_))));
}

#[test]
fn lmm_futvec_with_observed_rows() {
    let spec = c2_spec();
    let newdat = read_mixed_file(&fixture("c2_dat3.csv"), spec.response()).unwrap();
    let task = TaskSpec {
        kind: TaskKind::LmmFutvec,
        history: HistoricalData::Mixed(mixed("c2_dat1.csv", &spec)),
        model: Some(spec),
        future: Some(FutureDesign::RowSubset(vec![1, 2, 4, 5, 10, 11, 13, 14])),
        newdat: Some(NewData::Mixed(newdat)),
        settings: settings(300),
    };
    let table = run_task(&task).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert!(csv(&table).starts_with("y_ijk,a,b,hist_mean,quant_calib"));
    let short = TaskSpec {
        future: Some(FutureDesign::RowSubset(vec![1, 2])),
        ..task
    };
    assert!(run_task(&short).is_err());
}

#[test]
fn fixed_delta_intervals() {
    let (_, rows) = intervals_for(&qp_task(Some(FutureDesign::CountRepeats(1)), None), 2.253848).unwrap();
    assert!((rows[0].lower - 12.30559).abs() < 1e-3);
    assert!((rows[0].upper - 85.49441).abs() < 1e-3);
}

#[test]
fn one_sided_lmm_prints_infinity() {
    let spec = c2_spec();
    let task = TaskSpec {
        kind: TaskKind::LmmUnstruc,
        history: HistoricalData::Mixed(mixed("c2_dat1.csv", &spec)),
        model: Some(spec),
        future: Some(FutureDesign::Unstructured(2)),
        newdat: None,
        settings: CalibrationSettings {
            alternative: predcal::Alternative::Upper,
            ..settings(200)
        },
    };
    let text = csv(&run_task(&task).unwrap());
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("2,102.397,"), "{row}");
    assert!(row.contains(",-Inf,"), "{row}");
}
