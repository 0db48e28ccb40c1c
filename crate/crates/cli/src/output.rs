//! Result emission: `results.csv` and `report.json`, written atomically
//! (temp file + rename) so failed runs leave no partial files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::experiments::{Assertion, ExperimentOutput, ResultRecord};
use crate::CliError;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("create {}: {e}", parent.display())))?;
    }
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("rename to {}: {e}", path.display())))?;
    Ok(())
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else {
        v.to_string()
    }
}

pub fn results_csv(records: &[ResultRecord]) -> String {
    let mut out = String::from("experiment,metric,N,value,reference,abs_error,provenance\n");
    for r in records {
        let (reference, abs_error) = match (r.reference, r.abs_error()) {
            (Some(re), Some(err)) => (fmt(re), fmt(err)),
            _ => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.experiment,
            r.metric,
            r.n,
            fmt(r.value),
            reference,
            abs_error,
            r.provenance.as_str()
        ));
    }
    out
}

#[derive(Serialize)]
struct AssertionJson<'a> {
    name: &'a str,
    pass: bool,
    value: f64,
    tolerance: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    experiment: &'a str,
    assertions: Vec<AssertionJson<'a>>,
}

pub fn report_json(experiment: &str, assertions: &[Assertion]) -> Result<String, CliError> {
    let doc = ReportJson {
        experiment,
        assertions: assertions
            .iter()
            .map(|a| AssertionJson {
                name: &a.name,
                pass: a.pass,
                value: a.value,
                tolerance: a.tolerance,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))
}

pub fn emit(out_dir: &Path, experiment: &str, output: &ExperimentOutput) -> Result<(), CliError> {
    write_atomic(
        &out_dir.join("results.csv"),
        results_csv(&output.records).as_bytes(),
    )?;
    write_atomic(
        &out_dir.join("report.json"),
        report_json(experiment, &output.assertions)?.as_bytes(),
    )?;
    Ok(())
}
