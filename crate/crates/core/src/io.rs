//! File formats: comma-separated datasets and versioned TOML documents for
//! models, fit reports and verification reports.
//!
//! Floats are written with 17 significant digits, so every value round-trips
//! exactly and identical inputs give identical bytes. All writes go through a
//! temporary file in the destination directory followed by a rename.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::bcd::FitReport;
use crate::error::{Error, Result};
use crate::types::{Dataset, GmmParams, ProbabilityVector};
use crate::verify::VerificationReport;

pub const SCHEMA_VERSION: &str = "1";
/// Reserved dataset header for the component label column.
pub const LABEL_COLUMN: &str = "label";

/// Formats a float so that parsing it back yields the same bits.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:.16e}")
    }
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------- datasets

/// Reads a comma-separated dataset with a header row. A column named
/// `label` holds 1-based component labels; every other column is a feature.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_columns: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| *h == LABEL_COLUMN)
        .map(|(i, _)| i)
        .collect();
    if label_columns.len() > 1 {
        return Err(Error::Document(format!(
            "{}: more than one {LABEL_COLUMN:?} column",
            path.display()
        )));
    }
    let label_col = label_columns.first().copied();
    let width = header.len();
    if width == 0 || (label_col.is_some() && width == 1) {
        return Err(Error::Document(format!(
            "{}: no feature columns",
            path.display()
        )));
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                row: line,
                expected: width,
                found: record.len(),
            });
        }
        let mut row = Vec::with_capacity(width);
        for (col, cell) in record.iter().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: header[col].to_string(),
                value: cell.to_string(),
                message,
            };
            if Some(col) == label_col {
                let label: usize = cell.parse().map_err(|e| parse_err(format!("{e}")))?;
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|e| parse_err(format!("{e}")))?;
                if !v.is_finite() {
                    return Err(parse_err("value is not finite".into()));
                }
                row.push(v);
            }
        }
        rows.push(row);
    }
    let points = rows.into_iter().map(DVector::from_vec).collect();
    Dataset::new(points, label_col.map(|_| labels))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Document(format!("{}: {:?}", path.display(), other)),
    }
}

/// Serializes a dataset: header `x1,…,xd[,label]`, one row per point.
pub fn dataset_to_string(data: &Dataset) -> String {
    let d = data.dimension();
    let mut out = String::new();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    if data.labels().is_some() {
        header.push(LABEL_COLUMN.into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, x) in data.points().iter().enumerate() {
        let mut cells: Vec<String> = x.iter().map(|v| format_f64(*v)).collect();
        if let Some(labels) = data.labels() {
            cells.push(labels[i].to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_string(data).as_bytes())
}

// ------------------------------------------------------------------ models

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    #[allow(dead_code)]
    schema_version: String,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
}

fn float_array(values: impl IntoIterator<Item = f64>) -> String {
    let cells: Vec<String> = values.into_iter().map(format_f64).collect();
    format!("[{}]", cells.join(", "))
}

fn matrix_rows(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| format!("  {},\n", float_array(m.row(i).iter().copied())))
        .collect();
    format!("[\n{}]", rows.concat())
}

fn model_body(params: &GmmParams) -> String {
    let means: Vec<String> = params
        .means()
        .iter()
        .map(|m| format!("  {},\n", float_array(m.iter().copied())))
        .collect();
    format!(
        "weights = {}\nmeans = [\n{}]\ncovariance = {}\n",
        float_array(params.weights().as_slice().iter().copied()),
        means.concat(),
        matrix_rows(params.covariance()),
    )
}

pub fn model_to_string(params: &GmmParams) -> String {
    format!(
        "schema_version = \"{SCHEMA_VERSION}\"\n{}",
        model_body(params)
    )
}

pub fn write_model(params: &GmmParams, path: &Path) -> Result<()> {
    write_atomic(path, model_to_string(params).as_bytes())
}

/// Checks `schema_version` before anything else is interpreted.
fn check_schema(table: &toml::Table) -> Result<()> {
    match table.get("schema_version") {
        Some(toml::Value::String(v)) if v == SCHEMA_VERSION => Ok(()),
        Some(toml::Value::String(v)) => Err(Error::SchemaVersionMismatch {
            found: v.clone(),
            expected: SCHEMA_VERSION.into(),
        }),
        Some(other) => Err(Error::SchemaVersionMismatch {
            found: other.to_string(),
            expected: SCHEMA_VERSION.into(),
        }),
        None => Err(Error::Document("missing schema_version".into())),
    }
}

pub fn model_from_str(text: &str) -> Result<GmmParams> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
    check_schema(&table)?;
    let doc: ModelDocument = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Document(e.to_string()))?;
    let k = doc.weights.len();
    let d = doc.covariance.len();
    if doc.means.len() != k {
        return Err(Error::InvariantViolation(format!(
            "{} weights but {} means",
            k,
            doc.means.len()
        )));
    }
    if let Some(row) = doc.covariance.iter().find(|r| r.len() != d) {
        return Err(Error::InvariantViolation(format!(
            "covariance is not square: row of length {} in a {d}-row matrix",
            row.len()
        )));
    }
    let invariant = |e: Error| Error::InvariantViolation(e.to_string());
    let weights = ProbabilityVector::new(doc.weights).map_err(invariant)?;
    let means = doc.means.into_iter().map(DVector::from_vec).collect();
    let covariance = DMatrix::from_fn(d, d, |i, j| doc.covariance[i][j]);
    GmmParams::new(means, covariance, weights).map_err(invariant)
}

pub fn read_model(path: &Path) -> Result<GmmParams> {
    model_from_str(&std::fs::read_to_string(path)?)
}

// ----------------------------------------------------------------- reports

/// TOML string literal with the characters that need escaping escaped.
fn quoted(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn integer(x: u64) -> String {
    // TOML integers are signed 64-bit
    if x <= i64::MAX as u64 {
        x.to_string()
    } else {
        quoted(&x.to_string())
    }
}

pub fn fit_report_to_string(report: &FitReport) -> String {
    let p = &report.final_params;
    let mut out = String::new();
    let _ = writeln!(out, "schema_version = \"{SCHEMA_VERSION}\"");
    let _ = writeln!(out, "kind = \"fit_report\"");
    let _ = writeln!(out, "n_components = {}", p.n_components());
    let _ = writeln!(out, "dimension = {}", p.dimension());
    let _ = writeln!(out, "sweeps_used = {}", report.sweeps_used);
    let _ = writeln!(out, "converged = {}", report.converged);
    let _ = writeln!(
        out,
        "termination_reason = {}",
        quoted(report.termination_reason.as_str())
    );
    let _ = writeln!(out, "initial_nll = {}", format_f64(report.initial_nll));
    let _ = writeln!(
        out,
        "final_nll = {}",
        format_f64(
            report
                .nll_trajectory
                .last()
                .copied()
                .unwrap_or(report.initial_nll)
        )
    );
    let _ = writeln!(
        out,
        "nll_trajectory = {}",
        float_array(report.nll_trajectory.iter().copied())
    );
    let _ = writeln!(
        out,
        "eot_value_trajectory = {}",
        float_array(report.eot_value_trajectory.iter().copied())
    );
    out.push_str("\n[final_model]\n");
    out.push_str(&model_body(p));
    out
}

pub fn write_fit_report(report: &FitReport, path: &Path) -> Result<()> {
    write_atomic(path, fit_report_to_string(report).as_bytes())
}

pub fn verification_report_to_string(report: &VerificationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "schema_version = \"{SCHEMA_VERSION}\"");
    let _ = writeln!(out, "kind = \"verification_report\"");
    let _ = writeln!(out, "seed = {}", integer(report.seed));
    let _ = writeln!(out, "trials = {}", integer(report.trials as u64));
    let _ = writeln!(out, "all_passed = {}", report.all_passed());
    for c in &report.checks {
        out.push_str("\n[[checks]]\n");
        let _ = writeln!(out, "name = {}", quoted(&c.name));
        let _ = writeln!(out, "instances_run = {}", integer(c.instances_run as u64));
        let _ = writeln!(out, "max_residual = {}", format_f64(c.max_residual));
        let _ = writeln!(out, "tolerance = {}", format_f64(c.tolerance));
        let _ = writeln!(out, "passed = {}", c.passed);
    }
    for o in &report.observations {
        out.push_str("\n[[observations]]\n");
        let _ = writeln!(out, "name = {}", quoted(&o.name));
        let _ = writeln!(out, "value = {}", format_f64(o.value));
    }
    out
}

pub fn write_verification_report(report: &VerificationReport, path: &Path) -> Result<()> {
    write_atomic(path, verification_report_to_string(report).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcd::{fit, FitSettings};
    use crate::mixture::sample_gmm;
    use crate::verify::run_all;
    use std::path::PathBuf;

    fn params() -> GmmParams {
        GmmParams::new(
            vec![
                DVector::from_vec(vec![0.1, -1.0 / 3.0]),
                DVector::from_vec(vec![2.5e-17, 7.0]),
            ],
            DMatrix::from_row_slice(2, 2, &[1.0 / 7.0, 0.01, 0.01, 2.0]),
            ProbabilityVector::new(vec![0.3, 0.7]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn float_format_round_trips() {
        for x in [
            0.1,
            -1.0 / 3.0,
            1e-300,
            5e-324,
            f64::MAX,
            -0.0,
            123_456_789.123_456_79,
        ] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn model_round_trip_is_exact_and_byte_stable() {
        let p = params();
        let text = model_to_string(&p);
        let back = model_from_str(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(model_to_string(&back), text);
    }

    #[test]
    fn asymmetric_covariance_is_invariant_violation() {
        let text = model_to_string(&params()).replace(
            &format!("[{}, {}]", format_f64(1.0 / 7.0), format_f64(0.01)),
            &format!("[{}, {}]", format_f64(1.0 / 7.0), format_f64(0.5)),
        );
        assert!(matches!(
            model_from_str(&text),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn unknown_schema_version() {
        let text =
            model_to_string(&params()).replace("schema_version = \"1\"", "schema_version = \"2\"");
        assert!(matches!(
            model_from_str(&text),
            Err(Error::SchemaVersionMismatch { .. })
        ));
    }

    #[test]
    fn weights_off_simplex_are_invariant_violation() {
        let text = model_to_string(&params()).replace(&format_f64(0.7), &format_f64(0.8));
        assert!(matches!(
            model_from_str(&text),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let data = sample_gmm(&params(), 30, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&data, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, data);
        let again = dir.path().join("e.csv");
        write_dataset(&back, &again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn small_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let d = read_dataset(&write_tmp(&dir, "a.csv", "x\n1.5\n-2\n")).unwrap();
        assert_eq!((d.len(), d.dimension()), (2, 1));
        assert!(d.labels().is_none());

        let d = read_dataset(&write_tmp(&dir, "b.csv", "label,x,y\n1,0,0\n2,1,1\n")).unwrap();
        assert_eq!(d.labels(), Some(&[1, 2][..]));
        assert_eq!(d.dimension(), 2);
    }

    #[test]
    fn parse_errors_name_the_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "c.csv", "x,y\n1,2\n3,abc\n");
        match read_dataset(&p) {
            Err(Error::Parse {
                row, column, value, ..
            }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (3, "y", "abc"));
            }
            other => panic!("{other:?}"),
        }
        let p = write_tmp(&dir, "r.csv", "x,y\n1,2\n3\n");
        assert!(matches!(
            read_dataset(&p),
            Err(Error::RaggedRow {
                row: 3,
                expected: 2,
                found: 1,
                ..
            })
        ));
        let p = write_tmp(&dir, "l.csv", "x,label\n1,1.5\n");
        assert!(matches!(read_dataset(&p), Err(Error::Parse { .. })));
        let p = write_tmp(&dir, "e.csv", "x,y\n");
        assert!(read_dataset(&p).is_err());
    }

    #[test]
    fn reports_are_valid_toml_and_deterministic() {
        let data = sample_gmm(&params(), 40, 3).unwrap();
        let report = fit(&data, 2, &FitSettings::default(), None).unwrap();
        let text = fit_report_to_string(&report);
        let table: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(
            table["sweeps_used"].as_integer(),
            Some(report.sweeps_used as i64)
        );
        let model = table["final_model"].as_table().unwrap();
        let mut model_text = String::from("schema_version = \"1\"\n");
        model_text.push_str(&toml::to_string(model).unwrap());
        assert_eq!(model_from_str(&model_text).unwrap(), report.final_params);

        let v = run_all(1, 2).unwrap();
        let text = verification_report_to_string(&v);
        let table: toml::Table = toml::from_str(&text).unwrap();
        let checks = table["checks"].as_array().unwrap();
        assert_eq!(checks.len(), v.checks.len());
        assert_eq!(text, verification_report_to_string(&run_all(1, 2).unwrap()));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        std::fs::write(&p, "old contents that are longer than the new ones").unwrap();
        write_atomic(&p, b"new").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"new");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
