//! Tabular report emission. Every report is a list of flat records with a
//! fixed column order; reals are written with six decimals so identical
//! records give identical bytes everywhere.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Str(String),
    Int(i64),
    Real(f64),
    /// Written as `0` or `1`.
    Flag(bool),
}

impl Field {
    pub fn text(s: impl Into<String>) -> Self {
        Field::Str(s.into())
    }

    pub fn count(n: usize) -> Self {
        Field::Int(n as i64)
    }

    fn render(&self) -> String {
        match self {
            Field::Str(s) => s.clone(),
            Field::Int(i) => i.to_string(),
            Field::Real(x) => format_real(*x),
            Field::Flag(b) => u8::from(*b).to_string(),
        }
    }

    fn render_json(&self) -> Result<String> {
        Ok(match self {
            Field::Str(s) => serde_json::to_string(s)?,
            Field::Real(x) if !x.is_finite() => "null".into(),
            other => other.render(),
        })
    }
}

/// Six-decimal fixed notation; negative zero prints as zero.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

pub trait Record {
    fn columns() -> &'static [&'static str];
    fn fields(&self) -> Vec<Field>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn write_report<R: Record, W: Write>(records: &[R], out: W, format: Format) -> Result<()> {
    match format {
        Format::Csv => write_csv(records, out),
        Format::Json => write_json(records, out),
    }
}

fn write_csv<R: Record, W: Write>(records: &[R], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(R::columns())?;
    for r in records {
        let fields = r.fields();
        debug_assert_eq!(fields.len(), R::columns().len());
        w.write_record(fields.iter().map(Field::render))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<R: Record, W: Write>(records: &[R], mut out: W) -> Result<()> {
    let cols = R::columns();
    if records.is_empty() {
        out.write_all(b"[]\n")?;
        return Ok(());
    }
    out.write_all(b"[\n")?;
    for (i, r) in records.iter().enumerate() {
        let mut line = String::from("  {");
        for (j, (c, f)) in cols.iter().zip(r.fields()).enumerate() {
            if j > 0 {
                line.push_str(", ");
            }
            line.push_str(&serde_json::to_string(c)?);
            line.push_str(": ");
            line.push_str(&f.render_json()?);
        }
        line.push('}');
        if i + 1 < records.len() {
            line.push(',');
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.write_all(b"]\n")?;
    Ok(())
}

/// Writes `records` to `path` in the given format.
pub fn emit_report<R: Record>(records: &[R], path: &Path, format: Format) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_report(records, &mut w, format)?;
    w.flush()?;
    Ok(())
}
