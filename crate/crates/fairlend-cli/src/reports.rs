//! Artifact writing: versioned JSON reports and plain-CSV plot data.
//!
//! Every JSON report carries `schema_version` and the producing subcommand
//! so downstream tooling can dispatch without guessing. Plot files are
//! plain CSV with a single header row; floats use the shortest
//! representation that round-trips, so reruns are byte-identical.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::CliError;

/// Schema version stamped into every JSON report this binary writes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Write a pretty-printed, versioned JSON report.
pub fn write_report<T: Serialize>(path: &Path, command: &str, body: &T) -> Result<(), CliError> {
    let envelope = Envelope {
        schema_version: REPORT_SCHEMA_VERSION,
        command,
        body,
    };
    let mut text = serde_json::to_string_pretty(&envelope)
        .map_err(|e| CliError::new("serialize", e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::new("io", format!("cannot write `{}`: {e}", path.display())))?;
    Ok(())
}

/// Shortest float spelling that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Write one plot-data CSV: a header line, then the provided rows.
pub fn write_plot_csv<I>(path: &Path, header: &str, rows: I) -> Result<(), CliError>
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::new("io", format!("cannot create `{}`: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err =
        |e: std::io::Error| CliError::new("io", format!("cannot write `{}`: {e}", path.display()));
    writeln!(w, "{header}").map_err(io_err)?;
    for row in rows {
        writeln!(w, "{}", row.as_ref()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}
