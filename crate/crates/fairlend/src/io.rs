//! CSV input and output for loan records.
//!
//! The on-disk schema has one row per loan:
//!
//! ```text
//! id,gender,married,age,repeated,employment,education,past_failed,
//! past_aborted,past_ontime,past_late,amount,rate,app,express,province,
//! funded,m0,...,m11
//! ```
//!
//! `gender` is `m`/`f`, flags are `1`/`0`, `m0..m11` are monthly statuses
//! `P` (paid), `D` (defaulted), `U` (unobserved). Unfunded loans leave all
//! twelve month columns empty.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Gender, LoanRecord, PaymentStatus};
use crate::error::{Error, Result};
use crate::synthetic::{GroundTruth, GroundTruthRow};

/// Version of the loans CSV schema documented above.
pub const LOANS_SCHEMA_VERSION: u32 = 1;

/// Version of the ground-truth CSV schema (see [`write_ground_truth_to`]).
pub const TRUTH_SCHEMA_VERSION: u32 = 1;

const FIXED_HEADERS: [&str; 17] = [
    "id",
    "gender",
    "married",
    "age",
    "repeated",
    "employment",
    "education",
    "past_failed",
    "past_aborted",
    "past_ontime",
    "past_late",
    "amount",
    "rate",
    "app",
    "express",
    "province",
    "funded",
];

fn headers() -> Vec<String> {
    let mut h: Vec<String> = FIXED_HEADERS.iter().map(|s| s.to_string()).collect();
    for t in 0..12 {
        h.push(format!("m{t}"));
    }
    h
}

struct RowCursor<'a> {
    row: usize,
    record: &'a csv::StringRecord,
    col: usize,
    names: &'a [String],
}

impl<'a> RowCursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Csv {
            row: self.row,
            column: self.names.get(self.col.saturating_sub(1)).cloned().unwrap_or_default(),
            message: message.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let v = self.record.get(self.col);
        self.col += 1;
        v.ok_or_else(|| self.err("missing field"))
    }

    fn u64(&mut self) -> Result<u64> {
        let raw = self.next()?;
        raw.parse().map_err(|_| self.err(format!("expected integer, got `{raw}`")))
    }

    fn u8(&mut self) -> Result<u8> {
        let raw = self.next()?;
        raw.parse().map_err(|_| self.err(format!("expected small integer, got `{raw}`")))
    }

    fn f64(&mut self) -> Result<f64> {
        let raw = self.next()?;
        let v: f64 = raw
            .parse()
            .map_err(|_| self.err(format!("expected number, got `{raw}`")))?;
        if !v.is_finite() {
            return Err(self.err("non-finite number"));
        }
        Ok(v)
    }

    fn flag(&mut self) -> Result<bool> {
        let raw = self.next()?;
        match raw {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            _ => Err(self.err(format!("expected 0/1, got `{raw}`"))),
        }
    }

    fn gender(&mut self) -> Result<Gender> {
        let raw = self.next()?;
        Gender::parse(raw).ok_or_else(|| self.err(format!("expected m/f, got `{raw}`")))
    }
}

/// Read loans from any reader. Row numbers in errors are 1-based and include
/// the header row.
pub fn read_loans_from<R: Read>(reader: R) -> Result<Vec<LoanRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let expected = headers();
    {
        let got = rdr
            .headers()
            .map_err(|e| Error::Csv { row: 1, column: String::new(), message: e.to_string() })?;
        let got: Vec<&str> = got.iter().collect();
        if got != expected.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
            return Err(Error::Csv {
                row: 1,
                column: String::new(),
                message: format!(
                    "unexpected header; want `{}`, got `{}`",
                    expected.join(","),
                    got.join(",")
                ),
            });
        }
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Csv { row, column: String::new(), message: e.to_string() })?;
        if rec.len() != expected.len() {
            return Err(Error::Csv {
                row,
                column: String::new(),
                message: format!("expected {} fields, got {}", expected.len(), rec.len()),
            });
        }
        let mut cur = RowCursor { row, record: &rec, col: 0, names: &expected };
        let id = cur.u64()?;
        let gender = cur.gender()?;
        let married = cur.flag()?;
        let age = cur.f64()?;
        let repeated = cur.flag()?;
        let employment = cur.u8()?;
        let education = cur.u8()?;
        if employment > 4 || education > 4 {
            return Err(cur.err("category out of range 0..=4"));
        }
        let past_failed = cur.f64()?;
        let past_aborted = cur.f64()?;
        let past_ontime = cur.f64()?;
        let past_late = cur.f64()?;
        let amount = cur.f64()?;
        let rate = cur.f64()?;
        let app = cur.flag()?;
        let express = cur.flag()?;
        let province = cur.u8()?;
        let funded = cur.flag()?;
        let mut months = [PaymentStatus::Unobserved; 12];
        let mut any = false;
        let mut all = true;
        for slot in months.iter_mut() {
            let raw = cur.next()?;
            if raw.is_empty() {
                all = false;
                continue;
            }
            any = true;
            *slot = PaymentStatus::parse(raw)
                .ok_or_else(|| cur.err(format!("expected P/D/U, got `{raw}`")))?;
        }
        let payments = match (funded, any, all) {
            (true, true, true) => Some(months),
            (false, false, _) => None,
            (true, _, _) => {
                return Err(cur.err("funded loan must fill all twelve month columns"));
            }
            (false, true, _) => {
                return Err(cur.err("unfunded loan must leave month columns empty"));
            }
        };
        out.push(LoanRecord {
            id,
            gender,
            married,
            age,
            repeated,
            employment,
            education,
            past_failed,
            past_aborted,
            past_ontime,
            past_late,
            amount,
            rate,
            app,
            express,
            province,
            funded,
            payments,
        });
    }
    Ok(out)
}

/// Read loans from a file path.
pub fn read_loans(path: impl AsRef<Path>) -> Result<Vec<LoanRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_loans_from(std::io::BufReader::new(file))
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation keeps reruns byte-identical.
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `{:?}` on f64 is the shortest representation that round-trips.
    format!("{v:?}")
}

/// Write loans to any writer in the documented schema.
pub fn write_loans_to<W: Write>(writer: W, records: &[LoanRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(headers())
        .map_err(|e| Error::Serialize(e.to_string()))?;
    for r in records {
        let mut fields: Vec<String> = vec![
            r.id.to_string(),
            r.gender.code().to_string(),
            (r.married as u8).to_string(),
            fmt_f64(r.age),
            (r.repeated as u8).to_string(),
            r.employment.to_string(),
            r.education.to_string(),
            fmt_f64(r.past_failed),
            fmt_f64(r.past_aborted),
            fmt_f64(r.past_ontime),
            fmt_f64(r.past_late),
            fmt_f64(r.amount),
            fmt_f64(r.rate),
            (r.app as u8).to_string(),
            (r.express as u8).to_string(),
            r.province.to_string(),
            (r.funded as u8).to_string(),
        ];
        match &r.payments {
            Some(p) => fields.extend(p.iter().map(|s| s.code().to_string())),
            None => fields.extend(std::iter::repeat(String::new()).take(12)),
        }
        w.write_record(&fields)
            .map_err(|e| Error::Serialize(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Write loans to a file path.
pub fn write_loans(path: impl AsRef<Path>, records: &[LoanRecord]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_loans_to(std::io::BufWriter::new(file), records)
}

const TRUTH_HEADERS: [&str; 11] = [
    "id",
    "gender",
    "rate",
    "funded",
    "default_month",
    "lambda",
    "lambda_raw",
    "true_return",
    "signal",
    "posterior",
    "censor_month",
];

fn opt_f64(s: &str) -> std::result::Result<Option<f64>, ()> {
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(()),
    }
}

fn opt_u8(s: &str) -> std::result::Result<Option<u8>, ()> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<u8>().map(Some).map_err(|_| ())
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Write a market's latent state to any writer.
///
/// Schema: one row per application with columns
/// `id,gender,rate,funded,default_month,lambda,lambda_raw,true_return,`
/// `signal,posterior,censor_month`; optional columns are empty when the
/// quantity does not exist for that row (e.g. no signal under a
/// deterministic funding rule). The market label and seed ride along as
/// `# label=...,seed=...` on the first line so a round trip preserves them.
pub fn write_ground_truth_to<W: Write>(writer: W, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    w.write_record([format!("# label={},seed={}", truth.label, truth.seed)])
        .map_err(|e| Error::Serialize(e.to_string()))?;
    w.write_record(TRUTH_HEADERS)
        .map_err(|e| Error::Serialize(e.to_string()))?;
    for r in &truth.rows {
        let fields = [
            r.id.to_string(),
            r.gender.code().to_string(),
            fmt_f64(r.rate),
            (r.funded as u8).to_string(),
            r.default_month.map(|m| m.to_string()).unwrap_or_default(),
            fmt_f64(r.lambda),
            fmt_f64(r.lambda_raw),
            fmt_f64(r.true_return),
            fmt_opt_f64(r.signal),
            fmt_opt_f64(r.posterior),
            r.censor_month.map(|m| m.to_string()).unwrap_or_default(),
        ];
        w.write_record(&fields)
            .map_err(|e| Error::Serialize(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Write a market's latent state to a file path.
pub fn write_ground_truth(path: impl AsRef<Path>, truth: &GroundTruth) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_ground_truth_to(std::io::BufWriter::new(file), truth)
}

/// Read a market's latent state written by [`write_ground_truth_to`].
pub fn read_ground_truth_from<R: Read>(reader: R) -> Result<GroundTruth> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut label = String::new();
    let mut seed = 0u64;
    let mut saw_header = false;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec =
            rec.map_err(|e| Error::Csv { row, column: String::new(), message: e.to_string() })?;
        let first = rec.get(0).unwrap_or_default();
        if let Some(meta) = first.strip_prefix("# ") {
            for part in meta.split(',') {
                if let Some(v) = part.strip_prefix("label=") {
                    label = v.to_string();
                } else if let Some(v) = part.strip_prefix("seed=") {
                    seed = v.parse().map_err(|_| Error::Csv {
                        row,
                        column: "seed".into(),
                        message: format!("bad seed `{v}`"),
                    })?;
                }
            }
            continue;
        }
        if !saw_header {
            let got: Vec<&str> = rec.iter().collect();
            if got != TRUTH_HEADERS {
                return Err(Error::Csv {
                    row,
                    column: String::new(),
                    message: format!(
                        "unexpected header; want `{}`, got `{}`",
                        TRUTH_HEADERS.join(","),
                        got.join(",")
                    ),
                });
            }
            saw_header = true;
            continue;
        }
        if rec.len() != TRUTH_HEADERS.len() {
            return Err(Error::Csv {
                row,
                column: String::new(),
                message: format!("expected {} fields, got {}", TRUTH_HEADERS.len(), rec.len()),
            });
        }
        let names: Vec<String> = TRUTH_HEADERS.iter().map(|s| s.to_string()).collect();
        let mut cur = RowCursor { row, record: &rec, col: 0, names: &names };
        let id = cur.u64()?;
        let gender = cur.gender()?;
        let rate = cur.f64()?;
        let funded = cur.flag()?;
        let default_month = opt_u8(cur.next()?).map_err(|_| cur.err("expected month or empty"))?;
        let lambda = cur.f64()?;
        let lambda_raw = cur.f64()?;
        let true_return = cur.f64()?;
        let signal = opt_f64(cur.next()?).map_err(|_| cur.err("expected number or empty"))?;
        let posterior = opt_f64(cur.next()?).map_err(|_| cur.err("expected number or empty"))?;
        let censor_month = opt_u8(cur.next()?).map_err(|_| cur.err("expected month or empty"))?;
        rows.push(GroundTruthRow {
            id,
            gender,
            rate,
            funded,
            default_month,
            lambda,
            lambda_raw,
            true_return,
            signal,
            posterior,
            censor_month,
        });
    }
    if !saw_header {
        return Err(Error::Csv {
            row: 1,
            column: String::new(),
            message: "missing header row".into(),
        });
    }
    Ok(GroundTruth { label, seed, rows })
}

/// Read a market's latent state from a file path.
pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let file = std::fs::File::open(path.as_ref())?;
    read_ground_truth_from(std::io::BufReader::new(file))
}
