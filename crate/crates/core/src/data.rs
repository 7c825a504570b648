//! Cohort CSV ingestion and export.
//!
//! The interchange schema is `beneficiary_id,week,engagement,intervention`
//! with one row per beneficiary-week. Weeks run contiguously from 1 for each
//! beneficiary. Row numbers in errors are file line numbers, with the
//! header on line 1.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trajectory::{Step, Trajectory};

pub const COHORT_HEADER: [&str; 4] = ["beneficiary_id", "week", "engagement", "intervention"];

fn ingest(row: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        row,
        message: message.into(),
    }
}

pub fn parse_trajectory_csv(path: &Path) -> Result<Vec<Trajectory>> {
    parse_trajectories(File::open(path)?)
}

/// Parses cohort rows. Trajectories come out in order of first appearance;
/// rows of different beneficiaries may interleave as long as each one's
/// weeks arrive in order.
pub fn parse_trajectories<R: Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(COHORT_HEADER) {
        return Err(ingest(
            1,
            format!("expected header `{}`, found `{}`", COHORT_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut order: Vec<(String, Vec<Step>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut record = csv::StringRecord::new();
    let mut fallback_line = 1;
    while reader.read_record(&mut record)? {
        fallback_line += 1;
        let row = record.position().map_or(fallback_line, |p| p.line() as usize);
        if record.len() != 4 {
            return Err(ingest(row, format!("expected 4 fields, found {}", record.len())));
        }
        let id = &record[0];
        if id.is_empty() {
            return Err(ingest(row, "empty beneficiary_id"));
        }
        let week: usize = record[1]
            .parse()
            .map_err(|_| ingest(row, format!("week `{}` is not a positive integer", &record[1])))?;
        if week == 0 {
            return Err(ingest(row, "weeks start at 1"));
        }
        let engagement: f64 = record[2]
            .parse()
            .map_err(|_| ingest(row, format!("engagement `{}` is not a number", &record[2])))?;
        if !(0.0..=1.0).contains(&engagement) {
            return Err(ingest(row, format!("engagement {engagement} outside [0, 1]")));
        }
        let intervention = match &record[3] {
            "0" => false,
            "1" => true,
            other => return Err(ingest(row, format!("intervention `{other}` must be 0 or 1"))),
        };
        let slot = match index.get(id) {
            Some(&i) => i,
            None => {
                index.insert(id.to_owned(), order.len());
                order.push((id.to_owned(), Vec::new()));
                order.len() - 1
            }
        };
        let steps = &mut order[slot].1;
        let expected = steps.len() + 1;
        if week < expected {
            return Err(ingest(row, format!("duplicate week {week} for `{id}`")));
        }
        if week > expected {
            return Err(ingest(row, format!("week {week} for `{id}` leaves a gap; expected week {expected}")));
        }
        steps.push(Step::new(engagement, intervention));
    }
    order
        .into_iter()
        .map(|(id, steps)| Trajectory::new(id, steps))
        .collect()
}

/// Writes trajectories in the interchange schema. Engagement uses the
/// shortest representation that parses back to the same `f64`, so a
/// write/parse cycle reproduces the cohort exactly.
pub fn write_trajectories<W: Write>(trajectories: &[Trajectory], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(COHORT_HEADER)?;
    for t in trajectories {
        for (i, s) in t.steps.iter().enumerate() {
            w.write_record([
                t.beneficiary_id.clone(),
                (i + 1).to_string(),
                format!("{}", s.engagement),
                u8::from(s.intervention).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trajectory_csv(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectories(trajectories, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<Trajectory>> {
        parse_trajectories(text.as_bytes())
    }

    const VALID: &str = "beneficiary_id,week,engagement,intervention\n\
        a,1,0.5,1\na,2,0.4,0\na,3,0.3,0\nb,1,0.9,0\nb,2,1,0\nb,3,0,1\n";

    #[test]
    fn two_by_three() {
        let t = parse(VALID).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.len() == 3));
        assert_eq!(t[1].beneficiary_id, "b");
        assert!(t[0].steps[0].intervention && t[1].steps[2].intervention);
    }

    #[test]
    fn range_violation_cites_row() {
        let text = VALID.replace("b,2,1,0", "b,2,1.2,0");
        match parse(&text) {
            Err(Error::Ingestion { row, .. }) => assert_eq!(row, 6),
            other => panic!("{other:?}"),
        }
        let text = format!("{VALID}c,1,1.2,0\n");
        assert!(matches!(parse(&text), Err(Error::Ingestion { row: 8, .. })));
    }

    #[test]
    fn gaps_and_duplicates() {
        let gap = "beneficiary_id,week,engagement,intervention\na,1,0.5,0\na,3,0.5,0\n";
        assert!(matches!(parse(gap), Err(Error::Ingestion { row: 3, .. })));
        let late_start = "beneficiary_id,week,engagement,intervention\na,2,0.5,0\n";
        assert!(matches!(parse(late_start), Err(Error::Ingestion { row: 2, .. })));
        let dup = "beneficiary_id,week,engagement,intervention\na,1,0.5,0\na,1,0.5,0\n";
        match parse(dup) {
            Err(Error::Ingestion { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_fields() {
        let bad_flag = "beneficiary_id,week,engagement,intervention\na,1,0.5,2\n";
        assert!(matches!(parse(bad_flag), Err(Error::Ingestion { row: 2, .. })));
        let bad_header = "id,week,engagement,intervention\na,1,0.5,0\n";
        assert!(matches!(parse(bad_header), Err(Error::Ingestion { row: 1, .. })));
        let nan = "beneficiary_id,week,engagement,intervention\na,1,NaN,0\n";
        assert!(parse(nan).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let trajs = vec![
            Trajectory::from_parts("x", &[0.1 + 0.2, 1.0 / 3.0, 0.0, 1.0], &[2]).unwrap(),
            Trajectory::from_parts("y", &[std::f64::consts::FRAC_1_PI], &[]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_trajectories(&trajs, &mut buf).unwrap();
        assert_eq!(parse_trajectories(buf.as_slice()).unwrap(), trajs);
    }
}
