use std::io::Write;

use metabias_core::dataset::{
    describe, filter_outliers, infer_schema, load_csv_inferred, read_csv, write_csv, ModeratorKind, ModeratorSchema,
};
use metabias_core::pooling::{funnel_data, uwls, FunnelKind};
use metabias_core::ErrorKind;

const CSV: &str = "study_id,estimate_id,theta,se,fe,year\n\
a,1,0.10,0.05,1,1995\n\
a,2,0.05,0.04,0,1996\n\
b,3,-0.02,0.10,1,2001\n\
c,4,0.20,0.20,0,2010\n";

#[test]
fn inferred_schema_and_round_trip() {
    let schema = infer_schema(CSV.as_bytes()).unwrap();
    assert_eq!(schema.kind("fe"), Some(ModeratorKind::Binary));
    assert_eq!(schema.kind("year"), Some(ModeratorKind::Continuous));
    let d = read_csv(CSV.as_bytes(), &schema, "inline").unwrap();
    assert_eq!(d.len(), 4);
    assert_eq!(d.n_studies(), 3);

    let mut buf = Vec::new();
    write_csv(&d, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), &schema, "again").unwrap();
    assert_eq!(d.estimates(), back.estimates());

    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(CSV.as_bytes()).unwrap();
    let loaded = load_csv_inferred(f.path()).unwrap();
    assert_eq!(loaded.estimates(), d.estimates());
}

#[test]
fn bad_rows_are_reported_with_position() {
    let bad_se = "study_id,theta,se\na,0.1,0.1\nb,0.2,-1\n";
    let err = read_csv(bad_se.as_bytes(), &ModeratorSchema::empty(), "x").unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Validation);
    assert!(err.to_string().contains("row 2"), "{err}");

    let missing = "study_id,theta\na,0.1\n";
    let err = read_csv(missing.as_bytes(), &ModeratorSchema::empty(), "x").unwrap_err();
    assert!(err.to_string().contains("se"), "{err}");

    let nan = "study_id,theta,se\na,NaN,0.1\n";
    assert!(read_csv(nan.as_bytes(), &ModeratorSchema::empty(), "x").is_err());
}

#[test]
fn non_binary_values_in_binary_column_fail() {
    let schema = infer_schema(CSV.as_bytes()).unwrap();
    let bad = CSV.replace("a,2,0.05,0.04,0,1996", "a,2,0.05,0.04,2,1996");
    assert!(read_csv(bad.as_bytes(), &schema, "x").is_err());
}

#[test]
fn pooled_mean_of_equal_precision_fixture() {
    let csv = "study_id,theta,se\ns1,1,0.1\ns2,2,0.1\ns3,3,0.1\n";
    let d = read_csv(csv.as_bytes(), &ModeratorSchema::empty(), "fixture").unwrap();
    let p = uwls(&d).unwrap();
    assert!((p.mu_hat - 2.0).abs() < 1e-12);
    // s² = Σw r² / (n - 1) = 100 over Σw = 300
    assert!((p.se_naive - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(p.n_studies, 3);
}

#[test]
fn se_outlier_is_screened_too() {
    let mut csv = String::from("study_id,theta,se\n");
    for i in 0..20 {
        csv += &format!("s{i},{},{}\n", 0.1 + 0.01 * (i % 5) as f64, 0.05 + 0.001 * i as f64);
    }
    csv += "big,0.12,5.0\n";
    let d = read_csv(csv.as_bytes(), &ModeratorSchema::empty(), "x").unwrap();
    let (kept, excluded) = filter_outliers(&d).unwrap();
    assert_eq!(excluded, vec!["21".to_string()]);
    assert_eq!(kept.len(), 20);
}

#[test]
fn describe_and_funnel_shapes() {
    let schema = infer_schema(CSV.as_bytes()).unwrap();
    let d = read_csv(CSV.as_bytes(), &schema, "inline").unwrap();
    let rows = describe(&d);
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["theta", "se", "fe", "year"]);
    assert!((rows[0].mean - 0.0825).abs() < 1e-12);

    let f = funnel_data(&d, 0.05).unwrap();
    let points = f.iter().filter(|r| r.kind == FunnelKind::Point).count();
    assert_eq!(points, 4);
    let high: Vec<_> = f.iter().filter(|r| r.kind == FunnelKind::BandHigh).collect();
    assert!((high.last().unwrap().se - 0.2).abs() < 1e-15);
    assert!((high.last().unwrap().theta - (0.05 + 1.96 * 0.2)).abs() < 1e-12);
}
