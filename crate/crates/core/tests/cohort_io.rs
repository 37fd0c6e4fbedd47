use std::fs;

use jointrisk_core::cohort::{read_cohort_csv, write_cohort_csv};
use jointrisk_core::simulate::{simulate_cohort, SimConfig};
use jointrisk_core::Error;

#[test]
fn header_only_file_gives_empty_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    fs::write(&p, "subject_id,age,y_value,t0,age0,manuf,event_age,event_indicator\n").unwrap();
    let c = read_cohort_csv(&p).unwrap();
    assert!(c.is_empty());
}

#[test]
fn simulated_cohort_round_trips_bit_exactly() {
    let cfg = SimConfig {
        n_subjects: 60,
        seed: 4,
        ..Default::default()
    };
    let sim = simulate_cohort(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    write_cohort_csv(&sim.cohort, &p).unwrap();
    let back = read_cohort_csv(&p).unwrap();
    assert_eq!(back.subjects.len(), sim.cohort.subjects.len());
    for (a, b) in back.subjects.iter().zip(&sim.cohort.subjects) {
        assert_eq!(a, b);
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x.value.to_bits(), y.value.to_bits());
            assert_eq!(x.age.to_bits(), y.age.to_bits());
        }
    }
}

#[test]
fn missing_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    fs::write(&p, "subject_id,age,y_value,t0,age0,manuf,event_age\nA,50,3,50,50,1,52\n").unwrap();
    match read_cohort_csv(&p) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "event_indicator"),
        other => panic!("expected missing column, got {other:?}"),
    }
}

#[test]
fn malformed_row_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.csv");
    fs::write(
        &p,
        "subject_id,age,y_value,t0,age0,manuf,event_age,event_indicator\n\
         A,50,3,50,50,1,52,0\n\
         A,51,oops,50,50,1,52,0\n",
    )
    .unwrap();
    match read_cohort_csv(&p) {
        Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a csv error, got {other:?}"),
    }
}
