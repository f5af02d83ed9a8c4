//! Longitudinal panel data model: ingestion, validation, history
//! extraction, and covariate imputation.
//!
//! A panel holds one record per subject per time point on a common
//! integer time grid. Each subject has a fixed 2-D location, a binary
//! treatment series, a covariate vector series, an outcome series, and
//! a response-indicator series. When the response indicator is zero at
//! a time point, the treatment and outcome there are treated as missing;
//! covariates carry their own per-cell observed flags.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A 2-D spatial location. The first coordinate plays the role of the
/// x / longitude-like axis in all file formats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub s1: f64,
    pub s2: f64,
}

impl Location {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        if !s1.is_finite() || !s2.is_finite() {
            return Err(Error::Validation(format!(
                "location coordinates must be finite, got ({s1}, {s2})"
            )));
        }
        Ok(Location { s1, s2 })
    }

    /// Euclidean distance to another location.
    pub fn distance(&self, other: &Location) -> f64 {
        let d1 = self.s1 - other.s1;
        let d2 = self.s2 - other.s2;
        (d1 * d1 + d2 * d2).sqrt()
    }
}

/// One subject's full longitudinal record.
///
/// All series share the same length (the panel's time count). Treatment
/// and outcome cells are `None` exactly where the response indicator is
/// zero; covariate cells are `None` where their observed flag is zero.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: String,
    pub location: Location,
    /// First time index as it appeared in the source file; the in-memory
    /// grid is always positions `0..=horizon`.
    pub first_time_index: i64,
    /// Binary treatment per time, `None` when not observed.
    pub treatment: Vec<Option<u8>>,
    /// Covariate values per time per covariate, `None` when not observed.
    pub covariates: Vec<Vec<Option<f64>>>,
    /// Outcome per time, `None` when not observed.
    pub outcome: Vec<Option<f64>>,
    /// Response indicator per time (always observed).
    pub response: Vec<u8>,
}

impl SubjectRecord {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Cumulative treatment count before time `m`, i.e. over `0..m`.
    /// `None` if any earlier treatment is unobserved.
    pub fn cum_treatment_before(&self, m: usize) -> Option<f64> {
        let mut total = 0.0;
        for l in 0..m {
            total += f64::from(self.treatment[l]?);
        }
        Some(total)
    }

    /// Cumulative response count before time `m` (always available).
    pub fn cum_response_before(&self, m: usize) -> f64 {
        self.response[..m].iter().map(|&r| f64::from(r)).sum()
    }
}

/// A validated panel: nonempty, uniform time grid and covariate layout.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    pub subjects: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
    /// Number of time points on the grid (the horizon plus one).
    pub time_count: usize,
}

impl PanelDataset {
    pub fn new(subjects: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Validation("panel has no subjects".into()));
        }
        let time_count = subjects[0].len();
        if time_count == 0 {
            return Err(Error::Validation("panel has no time points".into()));
        }
        for s in &subjects {
            if s.len() != time_count {
                return Err(Error::Validation(format!(
                    "subject {} has {} time points, expected {}",
                    s.id,
                    s.len(),
                    time_count
                )));
            }
            for series_len in [s.treatment.len(), s.outcome.len(), s.covariates.len()] {
                if series_len != time_count {
                    return Err(Error::Validation(format!(
                        "subject {}: series lengths are inconsistent",
                        s.id
                    )));
                }
            }
            for row in &s.covariates {
                if row.len() != covariate_names.len() {
                    return Err(Error::Validation(format!(
                        "subject {}: covariate dimension differs from header",
                        s.id
                    )));
                }
            }
        }
        Ok(PanelDataset { subjects, covariate_names, time_count })
    }

    /// Largest time index on the grid.
    pub fn horizon(&self) -> usize {
        self.time_count - 1
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Validation(format!("unknown covariate {name:?}")))
    }

    /// True when every treatment, covariate, and outcome cell is observed.
    pub fn is_complete(&self) -> bool {
        self.subjects.iter().all(|s| {
            s.response.iter().all(|&r| r == 1)
                && s.treatment.iter().all(Option::is_some)
                && s.outcome.iter().all(Option::is_some)
                && s.covariates.iter().all(|row| row.iter().all(Option::is_some))
        })
    }

    /// Mean nearest-neighbor distance and spatial diameter, used for the
    /// automatic bandwidth grid.
    pub fn spatial_scales(&self) -> (f64, f64) {
        let locs: Vec<Location> = self.subjects.iter().map(|s| s.location).collect();
        let n = locs.len();
        let mut diam = 0.0f64;
        let mut nn_sum = 0.0f64;
        for i in 0..n {
            let mut nn = f64::INFINITY;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = locs[i].distance(&locs[j]);
                diam = diam.max(d);
                nn = nn.min(d);
            }
            if nn.is_finite() {
                nn_sum += nn;
            }
        }
        let mean_nn = if n > 1 { nn_sum / n as f64 } else { 0.0 };
        (mean_nn, diam)
    }
}

/// A subject's history at time `m`: treatments before `m`, covariates
/// through `m`, and outcomes before `m`. At `m = 0` the treatment and
/// outcome parts are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub time: usize,
    pub past_treatments: Vec<Option<u8>>,
    pub covariates: Vec<Vec<Option<f64>>>,
    pub past_outcomes: Vec<Option<f64>>,
}

/// Extract the history of `subject` at time `m`.
pub fn extract_history(data: &PanelDataset, subject: &str, m: usize) -> Result<History> {
    let s = data
        .subjects
        .iter()
        .find(|s| s.id == subject)
        .ok_or_else(|| Error::Validation(format!("unknown subject {subject:?}")))?;
    if m > data.horizon() {
        return Err(Error::Validation(format!(
            "time index {m} out of range 0..={}",
            data.horizon()
        )));
    }
    Ok(History {
        time: m,
        past_treatments: s.treatment[..m].to_vec(),
        covariates: s.covariates[..=m].to_vec(),
        past_outcomes: s.outcome[..m].to_vec(),
    })
}

/// Column mapping for the panel CSV format. Covariate columns are
/// discovered from the header by prefix; a covariate named `x` is read
/// from `<prefix>x` with its observed flag in `<prefix>x<obs_suffix>`.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub subject_id: String,
    pub time_index: String,
    pub s1: String,
    pub s2: String,
    pub treatment: String,
    pub outcome: String,
    pub response: String,
    pub covariate_prefix: String,
    pub observed_suffix: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            subject_id: "subject_id".into(),
            time_index: "time_index".into(),
            s1: "s1".into(),
            s2: "s2".into(),
            treatment: "A".into(),
            outcome: "Y".into(),
            response: "R".into(),
            covariate_prefix: "X_".into(),
            observed_suffix: "_obs".into(),
        }
    }
}

struct RawRow {
    line: usize,
    time: i64,
    loc: Location,
    a: u8,
    y: f64,
    r: u8,
    x: Vec<f64>,
    x_obs: Vec<bool>,
}

/// Load a panel from CSV.
///
/// Rows are grouped by subject (ordered by first appearance) and sorted
/// by time; each subject must cover a gap-free run of time indices and
/// all subjects must have the same number of time points and a single
/// location. Errors carry the 1-based line number of the offending row.
pub fn load_panel_csv(path: &Path, schema: &CsvSchema) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing required column {name:?}")))
    };
    let id_col = col(&schema.subject_id)?;
    let time_col = col(&schema.time_index)?;
    let s1_col = col(&schema.s1)?;
    let s2_col = col(&schema.s2)?;
    let a_col = col(&schema.treatment)?;
    let y_col = col(&schema.outcome)?;
    let r_col = col(&schema.response)?;

    // Covariates: every `<prefix>name` column not ending in the observed
    // suffix, paired with `<prefix>name<suffix>` when present.
    let mut covariate_names = Vec::new();
    let mut value_cols = Vec::new();
    let mut obs_cols = Vec::new();
    for (idx, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(&schema.covariate_prefix) {
            if rest.ends_with(&schema.observed_suffix) {
                continue;
            }
            covariate_names.push(rest.to_string());
            value_cols.push(idx);
            let flag = format!("{}{}{}", schema.covariate_prefix, rest, schema.observed_suffix);
            obs_cols.push(headers.iter().position(|h| h == flag));
        }
    }

    let parse_f64 = |field: &str, line: usize, what: &str| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|_| Error::Parse {
            line,
            message: format!("cannot parse {what} value {field:?}"),
        })
    };
    let parse_binary = |field: &str, line: usize, what: &str| -> Result<u8> {
        match field.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Parse {
                line,
                message: format!("{what} must be 0 or 1, got {other:?}"),
            }),
        }
    };

    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, Vec<RawRow>> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let id = record
            .get(id_col)
            .ok_or_else(|| Error::Parse { line, message: "missing subject_id".into() })?
            .trim()
            .to_string();
        let time = record.get(time_col).unwrap_or("").trim().parse::<i64>().map_err(|_| {
            Error::Parse { line, message: "time_index must be an integer".into() }
        })?;
        let loc = Location::new(
            parse_f64(record.get(s1_col).unwrap_or(""), line, "s1")?,
            parse_f64(record.get(s2_col).unwrap_or(""), line, "s2")?,
        )?;
        let r = parse_binary(record.get(r_col).unwrap_or(""), line, "R")?;
        // Treatment and outcome cells are ignored when the subject did not
        // respond; the cells still must parse as numbers.
        let a_raw = record.get(a_col).unwrap_or("");
        let a = if r == 1 { parse_binary(a_raw, line, "A")? } else { 0 };
        let y = parse_f64(record.get(y_col).unwrap_or(""), line, "Y")?;
        let mut x = Vec::with_capacity(value_cols.len());
        let mut x_obs = Vec::with_capacity(value_cols.len());
        for (j, &vc) in value_cols.iter().enumerate() {
            x.push(parse_f64(record.get(vc).unwrap_or(""), line, &covariate_names[j])?);
            let observed = match obs_cols[j] {
                Some(oc) => parse_binary(record.get(oc).unwrap_or(""), line, "observed flag")? == 1,
                None => true,
            };
            x_obs.push(observed);
        }
        if !by_subject.contains_key(&id) {
            order.push(id.clone());
        }
        by_subject
            .entry(id)
            .or_default()
            .push(RawRow { line, time, loc, a, y, r, x, x_obs });
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = by_subject.remove(&id).unwrap();
        rows.sort_by_key(|r| r.time);
        let first = rows[0].loc;
        for row in &rows {
            if (row.loc.s1 - first.s1).abs() > 0.0 || (row.loc.s2 - first.s2).abs() > 0.0 {
                return Err(Error::Parse {
                    line: row.line,
                    message: format!("inconsistent location for subject {id:?}"),
                });
            }
        }
        let t0 = rows[0].time;
        for (k, row) in rows.iter().enumerate() {
            if row.time != t0 + k as i64 {
                return Err(Error::Parse {
                    line: row.line,
                    message: format!(
                        "subject {id:?} has a gap or duplicate at time_index {}",
                        row.time
                    ),
                });
            }
        }
        let treatment = rows.iter().map(|r| (r.r == 1).then_some(r.a)).collect();
        let outcome = rows.iter().map(|r| (r.r == 1).then_some(r.y)).collect();
        let covariates = rows
            .iter()
            .map(|r| {
                r.x.iter()
                    .zip(&r.x_obs)
                    .map(|(v, &obs)| obs.then_some(*v))
                    .collect()
            })
            .collect();
        let response = rows.iter().map(|r| r.r).collect();
        subjects.push(SubjectRecord {
            id,
            location: first,
            first_time_index: t0,
            treatment,
            covariates,
            outcome,
            response,
        });
    }

    let data = PanelDataset::new(subjects, covariate_names)?;
    Ok(data)
}

/// Write a panel in the same CSV format `load_panel_csv` reads.
///
/// Unobserved treatment/outcome cells are written as `0` with `R = 0`;
/// unobserved covariate cells as `0` with their flag column `0`.
pub fn write_panel_csv(data: &PanelDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec![
        "subject_id".to_string(),
        "time_index".to_string(),
        "s1".to_string(),
        "s2".to_string(),
        "A".to_string(),
        "Y".to_string(),
        "R".to_string(),
    ];
    for name in &data.covariate_names {
        header.push(format!("X_{name}"));
    }
    for name in &data.covariate_names {
        header.push(format!("X_{name}_obs"));
    }
    writeln!(out, "{}", header.join(","))?;
    for s in &data.subjects {
        for k in 0..data.time_count {
            let mut fields = vec![
                s.id.clone(),
                (s.first_time_index + k as i64).to_string(),
                s.location.s1.to_string(),
                s.location.s2.to_string(),
                s.treatment[k].map_or_else(|| "0".to_string(), |a| a.to_string()),
                s.outcome[k].map_or_else(|| "0".to_string(), |y| y.to_string()),
                s.response[k].to_string(),
            ];
            for j in 0..data.covariate_names.len() {
                fields.push(s.covariates[k][j].unwrap_or(0.0).to_string());
            }
            for j in 0..data.covariate_names.len() {
                fields.push(if s.covariates[k][j].is_some() { "1" } else { "0" }.to_string());
            }
            writeln!(out, "{}", fields.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Covariate imputation policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputePolicy {
    /// Leave the data untouched; error if a subject has no observed value
    /// for some covariate.
    None,
    /// Carry the last observation forward within each subject, then fill
    /// cells that remain missing from the dataset: modal value for
    /// integer-coded covariates that are constant within subjects,
    /// mean otherwise.
    LocfThenBaselineMean,
}

/// Impute missing covariate cells. Treatments, outcomes, response flags,
/// and observed covariate cells are never modified.
pub fn impute_covariates(data: &PanelDataset, policy: ImputePolicy) -> Result<PanelDataset> {
    let p = data.covariate_names.len();
    if policy == ImputePolicy::None {
        for s in &data.subjects {
            for j in 0..p {
                if (0..data.time_count).all(|k| s.covariates[k][j].is_none()) {
                    return Err(Error::Validation(format!(
                        "subject {} has no observed value for covariate {} under policy none",
                        s.id, data.covariate_names[j]
                    )));
                }
            }
        }
        return Ok(data.clone());
    }

    let mut out = data.clone();
    for s in &mut out.subjects {
        for j in 0..p {
            let mut last: Option<f64> = None;
            for k in 0..out.time_count {
                match s.covariates[k][j] {
                    Some(v) => last = Some(v),
                    None => s.covariates[k][j] = last,
                }
            }
        }
    }

    // Dataset-level fill for cells that had no earlier observation.
    for j in 0..p {
        let mut observed = Vec::new();
        for s in &data.subjects {
            for k in 0..data.time_count {
                if let Some(v) = s.covariates[k][j] {
                    observed.push(v);
                }
            }
        }
        if observed.is_empty() {
            return Err(Error::Validation(format!(
                "covariate {} has no observed values anywhere",
                data.covariate_names[j]
            )));
        }
        let fill = if is_categorical(&observed) && is_time_independent(data, j) {
            modal_value(&observed)
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for s in &mut out.subjects {
            for k in 0..out.time_count {
                if s.covariates[k][j].is_none() {
                    s.covariates[k][j] = Some(fill);
                }
            }
        }
    }
    Ok(out)
}

/// Constant within every subject across its observed cells.
fn is_time_independent(data: &PanelDataset, j: usize) -> bool {
    data.subjects.iter().all(|s| {
        let vals: Vec<f64> = s.covariates.iter().filter_map(|row| row[j]).collect();
        vals.windows(2).all(|w| w[0] == w[1])
    })
}

/// Integer-coded with few distinct levels.
fn is_categorical(values: &[f64]) -> bool {
    let mut levels: Vec<i64> = Vec::new();
    for &v in values {
        if v.fract() != 0.0 || v.abs() > 1e6 {
            return false;
        }
        let i = v as i64;
        if !levels.contains(&i) {
            levels.push(i);
            if levels.len() > 10 {
                return false;
            }
        }
    }
    true
}

/// Most frequent value; ties resolve to the smallest.
fn modal_value(values: &[f64]) -> f64 {
    let mut counts: Vec<(i64, usize)> = Vec::new();
    for &v in values {
        let i = v as i64;
        match counts.iter_mut().find(|(k, _)| *k == i) {
            Some((_, c)) => *c += 1,
            None => counts.push((i, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counts[0].0 as f64
}

/// Load a zip3 centroid file (columns `zip3,s1,s2`) for geocoding
/// evaluation targets.
pub fn load_zip3_centroids(path: &Path) -> Result<Vec<(String, Location)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing column {name:?}")))
    };
    let (zc, c1, c2) = (find("zip3")?, find("s1")?, find("s2")?);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let parse = |idx: usize| -> Result<f64> {
            record.get(idx).unwrap_or("").trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: "coordinate must be numeric".into(),
            })
        };
        out.push((
            record.get(zc).unwrap_or("").trim().to_string(),
            Location::new(parse(c1)?, parse(c2)?)?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const COMPLETE_CSV: &str = "\
subject_id,time_index,s1,s2,A,Y,R,X_x1,X_x1_obs
a,0,0.1,0.2,1,3,1,0.5,1
a,1,0.1,0.2,0,2,1,0.6,1
a,2,0.1,0.2,1,4,1,0.7,1
b,0,0.4,0.9,0,1,1,-0.5,1
b,1,0.4,0.9,0,1.5,1,-0.25,1
b,2,0.4,0.9,1,2.5,1,0,1
";

    #[test]
    fn loads_complete_panel() {
        let f = write_temp(COMPLETE_CSV);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(data.n_subjects(), 2);
        assert_eq!(data.horizon(), 2);
        assert_eq!(data.covariate_names, vec!["x1".to_string()]);
        assert!(data.is_complete());
        assert_eq!(data.subjects[0].treatment[0], Some(1));
        assert_eq!(data.subjects[1].outcome[2], Some(2.5));
    }

    #[test]
    fn rejects_nonbinary_treatment_with_line_number() {
        let bad = COMPLETE_CSV.replace("a,1,0.1,0.2,0,2,1", "a,1,0.1,0.2,2,2,1");
        let f = write_temp(&bad);
        let err = load_panel_csv(f.path(), &CsvSchema::default()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("A"), "{message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rejects_inconsistent_location() {
        let bad = COMPLETE_CSV.replace("a,1,0.1,0.2", "a,1,0.3,0.2");
        let f = write_temp(&bad);
        let err = load_panel_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("inconsistent location"), "{err}");
    }

    #[test]
    fn rejects_time_gap() {
        let bad = COMPLETE_CSV.replace("b,1,0.4,0.9", "b,3,0.4,0.9");
        let f = write_temp(&bad);
        let err = load_panel_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("gap"), "{err}");
    }

    #[test]
    fn rejects_unequal_lengths() {
        let mut short = String::from(COMPLETE_CSV);
        short = short.replace("b,2,0.4,0.9,1,2.5,1,0,1\n", "");
        let f = write_temp(&short);
        let err = load_panel_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(err.to_string().contains("time points"), "{err}");
    }

    #[test]
    fn round_trip_preserves_numeric_content() {
        let f = write_temp(COMPLETE_CSV);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_panel_csv(&data, out.path()).unwrap();
        let again = load_panel_csv(out.path(), &CsvSchema::default()).unwrap();
        assert_eq!(data.n_subjects(), again.n_subjects());
        for (a, b) in data.subjects.iter().zip(&again.subjects) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.treatment, b.treatment);
            assert_eq!(a.outcome, b.outcome);
            assert_eq!(a.covariates, b.covariates);
            assert_eq!(a.response, b.response);
            assert_eq!(a.first_time_index, b.first_time_index);
        }
    }

    #[test]
    fn missing_cells_follow_response_indicator() {
        let csv = "\
subject_id,time_index,s1,s2,A,Y,R,X_x1,X_x1_obs
a,0,0.1,0.2,1,3,1,0.5,1
a,1,0.1,0.2,0,0,0,0.6,1
b,0,0.4,0.9,0,1,1,-0.5,1
b,1,0.4,0.9,1,2,1,-0.4,0
";
        let f = write_temp(csv);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(data.subjects[0].treatment[1], None);
        assert_eq!(data.subjects[0].outcome[1], None);
        assert_eq!(data.subjects[0].covariates[1][0], Some(0.6));
        assert_eq!(data.subjects[1].covariates[1][0], None);
        assert!(!data.is_complete());
    }

    #[test]
    fn history_at_zero_is_empty() {
        let f = write_temp(COMPLETE_CSV);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        let h = extract_history(&data, "a", 0).unwrap();
        assert!(h.past_treatments.is_empty());
        assert!(h.past_outcomes.is_empty());
        assert_eq!(h.covariates.len(), 1);
        assert_eq!(h.covariates[0][0], Some(0.5));
    }

    #[test]
    fn history_slices_directly() {
        let f = write_temp(COMPLETE_CSV);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        let h = extract_history(&data, "a", 2).unwrap();
        assert_eq!(h.past_treatments, vec![Some(1), Some(0)]);
        assert_eq!(h.past_outcomes, vec![Some(3.0), Some(2.0)]);
        assert_eq!(h.covariates.len(), 3);
        // repeated calls return identical values
        assert_eq!(h, extract_history(&data, "a", 2).unwrap());
    }

    #[test]
    fn history_out_of_range_errors() {
        let f = write_temp(COMPLETE_CSV);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        assert!(extract_history(&data, "a", 3).is_err());
    }

    fn panel_with_missing_covariates() -> PanelDataset {
        let csv = "\
subject_id,time_index,s1,s2,A,Y,R,X_w,X_w_obs,X_b,X_b_obs
a,0,0.1,0.2,1,3,1,1.0,1,1,1
a,1,0.1,0.2,0,2,1,0,0,1,1
a,2,0.1,0.2,1,4,1,0,0,1,1
b,0,0.4,0.9,0,1,1,2.0,1,1,1
b,1,0.4,0.9,0,1.5,1,2.5,1,1,1
b,2,0.4,0.9,1,2.5,1,3.0,1,1,1
c,0,0.6,0.3,0,1,1,4.0,1,0,1
c,1,0.6,0.3,0,1.5,1,4.0,1,0,1
c,2,0.6,0.3,1,2.5,1,4.0,1,0,1
d,0,0.7,0.7,0,1,1,5.0,1,0,0
d,1,0.7,0.7,0,1.5,1,5.0,1,0,0
d,2,0.7,0.7,1,2.5,1,5.0,1,0,0
";
        let f = write_temp(csv);
        load_panel_csv(f.path(), &CsvSchema::default()).unwrap()
    }

    #[test]
    fn locf_carries_forward() {
        let data = panel_with_missing_covariates();
        let imputed = impute_covariates(&data, ImputePolicy::LocfThenBaselineMean).unwrap();
        let w = data.covariate_index("w").unwrap();
        assert_eq!(imputed.subjects[0].covariates[1][w], Some(1.0));
        assert_eq!(imputed.subjects[0].covariates[2][w], Some(1.0));
    }

    #[test]
    fn binary_time_independent_covariate_uses_modal_value() {
        let data = panel_with_missing_covariates();
        let imputed = impute_covariates(&data, ImputePolicy::LocfThenBaselineMean).unwrap();
        let b = data.covariate_index("b").unwrap();
        // observed subject-level values are {1, 1, 0} -> mode 1
        for k in 0..3 {
            assert_eq!(imputed.subjects[3].covariates[k][b], Some(1.0));
        }
    }

    #[test]
    fn imputation_never_touches_observed_cells() {
        let data = panel_with_missing_covariates();
        let imputed = impute_covariates(&data, ImputePolicy::LocfThenBaselineMean).unwrap();
        for (s, t) in data.subjects.iter().zip(&imputed.subjects) {
            assert_eq!(s.treatment, t.treatment);
            assert_eq!(s.outcome, t.outcome);
            assert_eq!(s.response, t.response);
            for k in 0..data.time_count {
                for j in 0..data.covariate_names.len() {
                    if let Some(v) = s.covariates[k][j] {
                        assert_eq!(t.covariates[k][j], Some(v));
                    }
                }
            }
        }
    }

    #[test]
    fn identity_when_nothing_missing() {
        let f = write_temp(COMPLETE_CSV);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        let imputed = impute_covariates(&data, ImputePolicy::LocfThenBaselineMean).unwrap();
        for (s, t) in data.subjects.iter().zip(&imputed.subjects) {
            assert_eq!(s.covariates, t.covariates);
        }
    }

    #[test]
    fn policy_none_rejects_fully_missing_series() {
        let csv = "\
subject_id,time_index,s1,s2,A,Y,R,X_x1,X_x1_obs
a,0,0.1,0.2,1,3,1,0,0
a,1,0.1,0.2,0,2,1,0,0
";
        let f = write_temp(csv);
        let data = load_panel_csv(f.path(), &CsvSchema::default()).unwrap();
        assert!(impute_covariates(&data, ImputePolicy::None).is_err());
    }

    #[test]
    fn zip3_centroids_load() {
        let f = write_temp("zip3,s1,s2\n973,-122.6,45.2\n851,-112.1,33.4\n");
        let rows = load_zip3_centroids(f.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "973");
        assert_eq!(rows[1].1.s2, 33.4);
    }
}
