//! File formats: observation CSV (`j,x1,...,xd` with an optional JSON
//! provenance sidecar), JSON report writers, and the selection weight matrix
//! CSV (rows = drift candidates, columns = diffusion candidates).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::select::SelectionReport;
use crate::simulate::{ObservationPath, PathMeta};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Sidecar path for `file`: the same name with extension `meta.json`.
pub fn meta_sidecar(file: &Path) -> PathBuf {
    file.with_extension("meta.json")
}

/// Writes `j,x1,...,xd` rows for states j = 0..=n. Values are printed in the
/// shortest round-trip decimal form, so re-reading reproduces them exactly.
/// When the path carries provenance metadata it lands in the JSON sidecar.
pub fn write_path_csv(path: &ObservationPath, file: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(file).map_err(|e| csv_err(file, e))?;
    let d = path.dim();
    let mut header = Vec::with_capacity(d + 1);
    header.push("j".to_string());
    header.extend((1..=d).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(|e| csv_err(file, e))?;
    for (j, state) in path.states().enumerate() {
        let mut row = Vec::with_capacity(d + 1);
        row.push(j.to_string());
        row.extend(state.iter().map(|v| format!("{v}")));
        w.write_record(&row).map_err(|e| csv_err(file, e))?;
    }
    w.flush()?;
    if let Some(meta) = path.meta() {
        write_json(meta, &meta_sidecar(file))?;
    }
    Ok(())
}

/// Reads a `j,x1,...,xd` file back into an observation path, picking up the
/// provenance sidecar when one sits next to it. Malformed rows are reported
/// by index.
pub fn read_path_csv(file: &Path) -> Result<ObservationPath> {
    let mut r = csv::Reader::from_path(file).map_err(|e| csv_err(file, e))?;
    let headers = r.headers().map_err(|e| csv_err(file, e))?.clone();
    if headers.len() < 2 || headers.get(0) != Some("j") {
        return Err(Error::Parse {
            path: file.display().to_string(),
            reason: format!("expected header j,x1,...,xd, got {headers:?}"),
        });
    }
    let d = headers.len() - 1;
    for (i, name) in headers.iter().skip(1).enumerate() {
        let expect = format!("x{}", i + 1);
        if name != expect {
            return Err(Error::Parse {
                path: file.display().to_string(),
                reason: format!("column {} is named {name}, expected {expect}", i + 1),
            });
        }
    }
    let mut values = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_err(file, e))?;
        if record.len() != d + 1 {
            return Err(Error::BadRecord {
                row,
                reason: format!("expected {} fields, got {}", d + 1, record.len()),
            });
        }
        let j: usize = record[0].parse().map_err(|_| Error::BadRecord {
            row,
            reason: format!("index column is not an integer: {:?}", &record[0]),
        })?;
        if j != row {
            return Err(Error::BadRecord {
                row,
                reason: format!("index column jumps to {j}"),
            });
        }
        for i in 0..d {
            let v: f64 = record[i + 1].parse().map_err(|_| Error::BadRecord {
                row,
                reason: format!("column x{} is not a number: {:?}", i + 1, &record[i + 1]),
            })?;
            values.push(v);
        }
    }
    let mut path = ObservationPath::from_values(d, values)?;
    let sidecar = meta_sidecar(file);
    if sidecar.exists() {
        let meta: PathMeta = read_json(&sidecar)?;
        path = path.with_meta(meta);
    }
    Ok(path)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, file: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: file.display().to_string(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(file, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(file: &Path) -> Result<T> {
    let text = std::fs::read_to_string(file)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: file.display().to_string(),
        reason: e.to_string(),
    })
}

/// Weight matrix under the report's primary criterion: one row per drift
/// candidate, one column per diffusion candidate. Failed cells are left
/// empty.
pub fn write_weights_csv(report: &SelectionReport, file: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(file).map_err(|e| csv_err(file, e))?;
    let mut header = Vec::with_capacity(report.m1_labels.len() + 1);
    header.push("drift".to_string());
    header.extend(report.m1_labels.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(file, e))?;
    for (m2, m2_label) in report.m2_labels.iter().enumerate() {
        let mut row = Vec::with_capacity(report.m1_labels.len() + 1);
        row.push(m2_label.clone());
        for m1 in 0..report.m1_labels.len() {
            row.push(match report.weight(m1, m2) {
                Some(v) => format!("{v:.4}"),
                None => String::new(),
            });
        }
        w.write_record(&row).map_err(|e| csv_err(file, e))?;
    }
    w.flush()?;
    Ok(())
}
