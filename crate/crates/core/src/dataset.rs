//! Effect-size datasets: loading, validation, the ten-IQR outlier screen
//! and descriptive statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Column names with fixed meaning in the dataset CSV.
pub const COL_ESTIMATE_ID: &str = "estimate_id";
pub const COL_STUDY_ID: &str = "study_id";
pub const COL_THETA: &str = "theta";
pub const COL_SE: &str = "se";

/// Multiple of the interquartile range beyond which an estimate is excluded.
pub const OUTLIER_IQR_MULTIPLE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeratorKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeratorEntry {
    pub name: String,
    pub kind: ModeratorKind,
}

impl ModeratorEntry {
    pub fn new(name: impl Into<String>, kind: ModeratorKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Ordered moderator names and kinds. Serialises as a bare JSON array of
/// `{name, kind}` objects.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModeratorEntry>", into = "Vec<ModeratorEntry>")]
pub struct ModeratorSchema {
    entries: Vec<ModeratorEntry>,
}

impl TryFrom<Vec<ModeratorEntry>> for ModeratorSchema {
    type Error = Error;

    fn try_from(entries: Vec<ModeratorEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<ModeratorSchema> for Vec<ModeratorEntry> {
    fn from(schema: ModeratorSchema) -> Self {
        schema.entries
    }
}

impl ModeratorSchema {
    pub fn new(entries: Vec<ModeratorEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if [COL_ESTIMATE_ID, COL_STUDY_ID, COL_THETA, COL_SE].contains(&e.name.as_str()) {
                return Err(Error::Schema(format!(
                    "`{}` is a reserved column and cannot be a moderator",
                    e.name
                )));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Schema(format!("duplicate moderator `{}`", e.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }

    pub fn entries(&self) -> &[ModeratorEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn kind(&self, name: &str) -> Option<ModeratorKind> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.kind)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One reported effect size with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimate_id: String,
    pub study_id: String,
    pub theta: f64,
    pub se: f64,
    pub moderators: BTreeMap<String, f64>,
}

impl EffectEstimate {
    pub fn new(
        estimate_id: impl Into<String>,
        study_id: impl Into<String>,
        theta: f64,
        se: f64,
    ) -> Self {
        Self {
            estimate_id: estimate_id.into(),
            study_id: study_id.into(),
            theta,
            se,
            moderators: BTreeMap::new(),
        }
    }

    pub fn with_moderator(mut self, name: impl Into<String>, value: f64) -> Self {
        self.moderators.insert(name.into(), value);
        self
    }

    pub fn z(&self) -> f64 {
        self.theta / self.se
    }

    /// Two-sided p-value `2 (1 - Φ(|θ/σ|))`.
    pub fn p_value(&self) -> f64 {
        stats::two_sided_p(self.z())
    }
}

/// A validated, immutable collection of estimates clustered by study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    estimates: Vec<EffectEstimate>,
    schema: ModeratorSchema,
    provenance: String,
}

impl MetaDataset {
    pub fn new(
        estimates: Vec<EffectEstimate>,
        schema: ModeratorSchema,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        for (i, e) in estimates.iter().enumerate() {
            let row = i + 1;
            let bad = |message: String| Error::InvalidEstimate {
                row,
                estimate_id: e.estimate_id.clone(),
                message,
            };
            if !ids.insert(e.estimate_id.as_str()) {
                return Err(bad("duplicate estimate_id".into()));
            }
            if !e.theta.is_finite() {
                return Err(bad(format!("theta = {} is not finite", e.theta)));
            }
            if !e.se.is_finite() || e.se <= 0.0 {
                return Err(bad(format!("se = {} must be finite and > 0", e.se)));
            }
            for entry in schema.entries() {
                let v = *e
                    .moderators
                    .get(&entry.name)
                    .ok_or_else(|| bad(format!("missing moderator `{}`", entry.name)))?;
                if !v.is_finite() {
                    return Err(bad(format!("moderator `{}` = {v} is not finite", entry.name)));
                }
                if entry.kind == ModeratorKind::Binary && v != 0.0 && v != 1.0 {
                    return Err(bad(format!(
                        "binary moderator `{}` takes value {v}, expected 0 or 1",
                        entry.name
                    )));
                }
            }
        }
        Ok(Self {
            estimates,
            schema,
            provenance: provenance.into(),
        })
    }

    pub fn estimates(&self) -> &[EffectEstimate] {
        &self.estimates
    }

    pub fn schema(&self) -> &ModeratorSchema {
        &self.schema
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.theta).collect()
    }

    pub fn ses(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.se).collect()
    }

    /// Distinct study ids in order of first appearance.
    pub fn study_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.estimates
            .iter()
            .map(|e| e.study_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn n_studies(&self) -> usize {
        self.study_ids().len()
    }

    /// Study index (in first-appearance order) of every estimate.
    pub fn study_index(&self) -> Vec<usize> {
        let mut map: HashMap<&str, usize> = HashMap::new();
        self.estimates
            .iter()
            .map(|e| {
                let next = map.len();
                *map.entry(e.study_id.as_str()).or_insert(next)
            })
            .collect()
    }

    /// Values of a named column. Besides moderators, `theta` and `se` are
    /// addressable so that the standard error can enter a regression.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        match name {
            COL_THETA => Ok(self.thetas()),
            COL_SE => Ok(self.ses()),
            _ if self.schema.kind(name).is_some() => Ok(self
                .estimates
                .iter()
                .map(|e| e.moderators[name])
                .collect()),
            _ => Err(Error::MissingColumn(name.to_string())),
        }
    }

    /// Kind of a named regressor column; `se` counts as continuous.
    pub fn column_kind(&self, name: &str) -> Option<ModeratorKind> {
        match name {
            COL_SE | COL_THETA => Some(ModeratorKind::Continuous),
            _ => self.schema.kind(name),
        }
    }

    fn retain_where(&self, keep: &[bool]) -> Self {
        Self {
            estimates: self
                .estimates
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(e, _)| e.clone())
                .collect(),
            schema: self.schema.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn require_poolable(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "pooling needs at least 2 estimates, got {}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

/// Reads a dataset CSV against a declared moderator schema. Columns not
/// named in the schema are ignored.
pub fn read_csv<R: Read>(
    reader: R,
    schema: &ModeratorSchema,
    provenance: impl Into<String>,
) -> Result<MetaDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));

    let i_study = require(COL_STUDY_ID)?;
    let i_theta = require(COL_THETA)?;
    let i_se = require(COL_SE)?;
    let i_id = find(COL_ESTIMATE_ID);
    let mod_cols = schema
        .entries()
        .iter()
        .map(|e| require(&e.name).map(|i| (e.name.clone(), i)))
        .collect::<Result<Vec<_>>>()?;

    let mut estimates = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let estimate_id = match i_id {
            Some(c) => record[c].to_string(),
            None => row.to_string(),
        };
        let theta = parse_cell(&record[i_theta], row, COL_THETA)?;
        let se = parse_cell(&record[i_se], row, COL_SE)?;
        if se <= 0.0 {
            return Err(Error::InvalidEstimate {
                row,
                estimate_id,
                message: format!("se = {se} must be > 0"),
            });
        }
        let mut moderators = BTreeMap::new();
        for (name, c) in &mod_cols {
            let raw = &record[*c];
            if raw.is_empty() {
                return Err(Error::InvalidEstimate {
                    row,
                    estimate_id,
                    message: format!("missing value for moderator `{name}`"),
                });
            }
            moderators.insert(name.clone(), parse_cell(raw, row, name)?);
        }
        estimates.push(EffectEstimate {
            estimate_id,
            study_id: record[i_study].to_string(),
            theta,
            se,
            moderators,
        });
    }
    MetaDataset::new(estimates, schema.clone(), provenance)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &ModeratorSchema) -> Result<MetaDataset> {
    let path = path.as_ref();
    read_csv(File::open(path)?, schema, path.display().to_string())
}

/// Builds a schema from a CSV header: every column other than the reserved
/// ones is a moderator, binary when all its values are 0 or 1.
pub fn infer_schema<R: Read>(reader: R) -> Result<ModeratorSchema> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let reserved = [COL_ESTIMATE_ID, COL_STUDY_ID, COL_THETA, COL_SE];
    let cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !reserved.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut binary = vec![true; cols.len()];
    for record in rdr.records() {
        let record = record?;
        for (k, (i, _)) in cols.iter().enumerate() {
            let v = record.get(*i).unwrap_or("");
            if v != "0" && v != "1" && v.parse::<f64>().map_or(true, |x| x != 0.0 && x != 1.0) {
                binary[k] = false;
            }
        }
    }
    ModeratorSchema::new(
        cols.into_iter()
            .zip(binary)
            .map(|((_, name), b)| {
                let kind = if b {
                    ModeratorKind::Binary
                } else {
                    ModeratorKind::Continuous
                };
                ModeratorEntry { name, kind }
            })
            .collect(),
    )
}

pub fn load_csv_inferred(path: impl AsRef<Path>) -> Result<MetaDataset> {
    let schema = infer_schema(File::open(path.as_ref())?)?;
    load_csv(path, &schema)
}

/// Writes the dataset in the same layout `read_csv` accepts. Floats use
/// the shortest representation that round-trips exactly.
pub fn write_csv<W: Write>(data: &MetaDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![COL_ESTIMATE_ID, COL_STUDY_ID, COL_THETA, COL_SE];
    header.extend(data.schema().names());
    w.write_record(&header)?;
    for e in data.estimates() {
        let mut rec = vec![
            e.estimate_id.clone(),
            e.study_id.clone(),
            e.theta.to_string(),
            e.se.to_string(),
        ];
        rec.extend(data.schema().names().map(|n| e.moderators[n].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn median_and_iqr(xs: &[f64]) -> (f64, f64) {
    let s = stats::sorted_copy(xs);
    let q1 = stats::quantile_linear(&s, 0.25);
    let q3 = stats::quantile_linear(&s, 0.75);
    (stats::quantile_linear(&s, 0.5), q3 - q1)
}

/// Single-pass screen removing every estimate whose theta or se lies more
/// than ten IQRs from the respective median. Returns the retained data and
/// the excluded estimate ids in input order.
pub fn filter_outliers(data: &MetaDataset) -> Result<(MetaDataset, Vec<String>)> {
    if data.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "outlier screening needs at least 4 estimates, got {}",
            data.len()
        )));
    }
    let (med_t, iqr_t) = median_and_iqr(&data.thetas());
    let (med_s, iqr_s) = median_and_iqr(&data.ses());
    let band_t = OUTLIER_IQR_MULTIPLE * iqr_t;
    let band_s = OUTLIER_IQR_MULTIPLE * iqr_s;

    let keep: Vec<bool> = data
        .estimates()
        .iter()
        .map(|e| (e.theta - med_t).abs() <= band_t && (e.se - med_s).abs() <= band_s)
        .collect();
    let excluded = data
        .estimates()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| !k)
        .map(|(e, _)| e.estimate_id.clone())
        .collect();
    Ok((data.retain_where(&keep), excluded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

/// Summary rows for theta, se and every moderator, in that order.
pub fn describe(data: &MetaDataset) -> Vec<DescriptiveRow> {
    let mut names = vec![COL_THETA, COL_SE];
    names.extend(data.schema().names());
    names
        .into_iter()
        .map(|name| {
            let xs = data.column(name).expect("schema column");
            DescriptiveRow {
                name: name.to_string(),
                count: xs.len(),
                mean: stats::mean(&xs),
                sd: stats::sample_sd(&xs),
                min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

pub fn write_describe_csv<W: Write>(rows: &[DescriptiveRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "count", "mean", "sd", "min", "max"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.count.to_string(),
            format!("{:?}", r.mean),
            format!("{:?}", r.sd),
            format!("{:?}", r.min),
            format!("{:?}", r.max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_schema(name: &str) -> ModeratorSchema {
        ModeratorSchema::new(vec![ModeratorEntry::new(name, ModeratorKind::Binary)]).unwrap()
    }

    fn simple(thetas: &[f64], ses: &[f64]) -> MetaDataset {
        let est = thetas
            .iter()
            .zip(ses)
            .enumerate()
            .map(|(i, (&t, &s))| EffectEstimate::new(format!("e{i}"), format!("s{i}"), t, s))
            .collect();
        MetaDataset::new(est, ModeratorSchema::empty(), "test").unwrap()
    }

    #[test]
    fn loads_three_rows_two_studies() {
        let csv = "study_id,theta,se,cross\nA,0.1,0.05,1\nA,0.2,0.04,0\nB,-0.1,0.1,1\n";
        let d = read_csv(csv.as_bytes(), &binary_schema("cross"), "inline").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.n_studies(), 2);
        assert_eq!(d.estimates()[2].moderators["cross"], 1.0);
        assert_eq!(d.estimates()[0].estimate_id, "1");
    }

    #[test]
    fn missing_se_column_is_schema_error() {
        let csv = "study_id,theta\nA,0.1\n";
        match read_csv(csv.as_bytes(), &ModeratorSchema::empty(), "x") {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "se"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_se_cites_row() {
        let csv = "estimate_id,study_id,theta,se\nq1,A,0.1,0.1\nq2,B,0.2,0\n";
        match read_csv(csv.as_bytes(), &ModeratorSchema::empty(), "x") {
            Err(Error::InvalidEstimate {
                row, estimate_id, ..
            }) => {
                assert_eq!(row, 2);
                assert_eq!(estimate_id, "q2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_non_finite_cells_are_parse_errors() {
        let csv = "study_id,theta,se\nA,abc,0.1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &ModeratorSchema::empty(), "x"),
            Err(Error::Parse { row: 1, .. })
        ));
        let csv = "study_id,theta,se\nA,0.1,0.1\nB,inf,0.1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &ModeratorSchema::empty(), "x"),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn missing_moderator_cell_is_rejected() {
        let csv = "study_id,theta,se,cross\nA,0.1,0.05,\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &binary_schema("cross"), "x"),
            Err(Error::InvalidEstimate { .. })
        ));
    }

    #[test]
    fn binary_moderator_out_of_range() {
        let csv = "study_id,theta,se,cross\nA,0.1,0.05,2\n";
        assert!(read_csv(csv.as_bytes(), &binary_schema("cross"), "x").is_err());
    }

    #[test]
    fn schema_rejects_duplicates_and_reserved() {
        let dup = vec![
            ModeratorEntry::new("a", ModeratorKind::Binary),
            ModeratorEntry::new("a", ModeratorKind::Continuous),
        ];
        assert!(ModeratorSchema::new(dup).is_err());
        assert!(ModeratorSchema::new(vec![ModeratorEntry::new("se", ModeratorKind::Continuous)]).is_err());
        let json = r#"[{"name":"cross","kind":"binary"},{"name":"span","kind":"continuous"}]"#;
        let s: ModeratorSchema = serde_json::from_str(json).unwrap();
        assert_eq!(s.kind("span"), Some(ModeratorKind::Continuous));
    }

    #[test]
    fn infers_binary_and_continuous() {
        let csv = "study_id,theta,se,a,b\nA,0.1,0.1,0,0.5\nB,0.1,0.1,1,2\n";
        let s = infer_schema(csv.as_bytes()).unwrap();
        assert_eq!(s.kind("a"), Some(ModeratorKind::Binary));
        assert_eq!(s.kind("b"), Some(ModeratorKind::Continuous));
    }

    #[test]
    fn outlier_rule_removes_extreme_theta() {
        // median 0.01, IQR 0.02, band 0.2
        let d = simple(&[0.0, 0.01, -0.01, 0.02, 100.0], &[0.1; 5]);
        let (kept, dropped) = filter_outliers(&d).unwrap();
        assert_eq!(dropped, vec!["e4".to_string()]);
        assert_eq!(kept.len(), 4);
    }

    #[test]
    fn outlier_rule_uses_se_too() {
        let d = simple(&[0.0, 0.01, -0.01, 0.02, 0.0], &[0.1, 0.11, 0.09, 0.1, 5.0]);
        let (_, dropped) = filter_outliers(&d).unwrap();
        assert_eq!(dropped, vec!["e4".to_string()]);
    }

    #[test]
    fn identical_values_are_all_retained() {
        let d = simple(&[0.3; 6], &[0.1; 6]);
        let (kept, dropped) = filter_outliers(&d).unwrap();
        assert!(dropped.is_empty());
        assert_eq!(kept.len(), 6);
    }

    #[test]
    fn outlier_rule_needs_four_estimates() {
        let d = simple(&[0.0, 1.0, 2.0], &[1.0; 3]);
        assert!(matches!(filter_outliers(&d), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn describe_binary_share() {
        // 147 ones out of 531
        let est = (0..531)
            .map(|i| {
                EffectEstimate::new(i.to_string(), (i % 33).to_string(), 0.0, 1.0)
                    .with_moderator("cross", if i < 147 { 1.0 } else { 0.0 })
            })
            .collect();
        let d = MetaDataset::new(est, binary_schema("cross"), "t").unwrap();
        let rows = describe(&d);
        assert_eq!(rows.len(), 3);
        let cross = &rows[2];
        assert_eq!(cross.count, 531);
        assert!((cross.mean - 0.277).abs() < 5e-4);
        assert_eq!(rows[0].sd, 0.0);
    }

    #[test]
    fn describe_two_values() {
        let d = simple(&[0.0, 1.0], &[1.0, 1.0]);
        let r = &describe(&d)[0];
        assert_eq!(r.mean, 0.5);
        assert!((r.sd - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!((r.min, r.max), (0.0, 1.0));
    }

    #[test]
    fn p_value_attribute() {
        let e = EffectEstimate::new("a", "s", 1.96, 1.0);
        assert!((e.p_value() - 0.05).abs() < 1e-4);
    }
}
