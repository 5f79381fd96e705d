use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// A command's result: the canonical JSON value, an optional CSV projection
/// and the exit status it implies.
pub struct Report {
    pub json: Value,
    pub table: Option<Table>,
    pub status: Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// The analysis ran but the verdict is negative.
    Negative,
    /// Output is a partial result of a solver that ran out of iterations.
    NotConverged,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Negative => 1,
            Status::NotConverged => 3,
        }
    }
}

pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(json: Value) -> Self {
        Self {
            json,
            table: None,
            status: Status::Ok,
        }
    }

    pub fn with_table(mut self, header: Vec<&'static str>, rows: Vec<Vec<String>>) -> Self {
        self.table = Some(Table { header, rows });
        self
    }

    pub fn with_status(mut self, status: Status) -> Self {
        self.status = status;
        self
    }
}

/// JSON number, or the strings `"infinity"`, `"-infinity"`, `"nan"`.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("infinity")
    } else {
        json!("-infinity")
    }
}

/// 17 significant digits.
pub fn cell(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn render(report: &Report, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(&report.json)?;
            out.push(b'\n');
            Ok(out)
        }
        Format::Csv => {
            let Some(table) = &report.table else {
                bail!("this command has no CSV projection; use --format json");
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&table.header)?;
            for row in &table.rows {
                w.write_record(row)?;
            }
            Ok(w.into_inner()?)
        }
    }
}

pub fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub struct RunMeta<'a> {
    pub command: &'a str,
    pub seed: Option<u64>,
    pub started: SystemTime,
    pub elapsed: Duration,
}

/// Writes the report to `out` (or stdout) and, for files, a side file with
/// timing and provenance so the main artifact stays byte-reproducible.
pub fn emit(report: &Report, format: Format, out: Option<&Path>, meta: RunMeta<'_>) -> Result<()> {
    let bytes = render(report, format)?;
    match out {
        None => std::io::stdout().write_all(&bytes)?,
        Some(path) => {
            fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
            let side = json!({
                "command": meta.command,
                "version": env!("CARGO_PKG_VERSION"),
                "rng": mdp_stability::scenarios::RNG_NAME,
                "seed": meta.seed,
                "threads": rayon::current_num_threads(),
                "started_unix_seconds": meta.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
                "elapsed_seconds": meta.elapsed.as_secs_f64(),
                "exit_code": report.status.code(),
            });
            fs::write(meta_path(path), serde_json::to_vec_pretty(&side)?)?;
        }
    }
    Ok(())
}
