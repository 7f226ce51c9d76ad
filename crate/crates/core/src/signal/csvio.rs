//! CSV ingestion and export.
//!
//! Schema: header `subject,trial,label,ch0,ch1,...,ch{C-1}`; one sample per
//! row, rows grouped by `(subject, trial)` in ascending sample order, UTF-8,
//! `.` decimal point, no thousands separators. One [`Recording`] per
//! `(subject, trial)` group.

use super::{Recording, SignalError};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

fn parse_err(line: usize, msg: impl Into<String>) -> SignalError {
    SignalError::Parse { line, msg: msg.into() }
}

/// Load a recording set. When `num_classes` is given, labels outside
/// `[0, num_classes)` are range errors; gaps inside the range are fine.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Vec<Recording>, SignalError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file"))?
        .map_err(SignalError::Io)?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 4 || cols[0] != "subject" || cols[1] != "trial" || cols[2] != "label" {
        return Err(parse_err(1, "header must start with subject,trial,label,ch0,..."));
    }
    let channels = cols.len() - 3;
    for (i, col) in cols[3..].iter().enumerate() {
        if *col != format!("ch{i}") {
            return Err(parse_err(1, format!("expected column ch{i}, found {col:?}")));
        }
    }

    // (subject, trial) -> (first-line, label, per-channel samples)
    let mut groups: Vec<((i64, i64), usize, Vec<Vec<f64>>)> = Vec::new();
    for (zero_idx, line) in lines.enumerate() {
        let line_no = zero_idx + 2;
        let line = line.map_err(SignalError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != channels + 3 {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, found {}", channels + 3, fields.len()),
            ));
        }
        let subject: i64 = fields[0]
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric subject {:?}", fields[0])))?;
        let trial: i64 = fields[1]
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric trial {:?}", fields[1])))?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("non-numeric label {:?}", fields[2])))?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(SignalError::Range {
                    line: line_no,
                    msg: format!("label {label} outside 0..{k}"),
                });
            }
        }

        let key = (subject, trial);
        let group = match groups.iter_mut().find(|(k, _, _)| *k == key) {
            Some(g) => {
                if g.1 != label {
                    return Err(parse_err(
                        line_no,
                        format!("label {label} disagrees with label {} of group {key:?}", g.1),
                    ));
                }
                g
            }
            None => {
                groups.push((key, label, vec![Vec::new(); channels]));
                groups.last_mut().unwrap()
            }
        };
        for (c, field) in fields[3..].iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line_no, format!("non-numeric cell {field:?} (ch{c})")))?;
            group.2[c].push(v);
        }
    }
    if groups.is_empty() {
        return Err(SignalError::Input(format!("{} holds no samples", path.display())));
    }

    // Order-stable: sorted by (subject, trial).
    groups.sort_by_key(|(key, _, _)| *key);
    groups
        .into_iter()
        .map(|(_, label, channels)| Recording::new(channels, label))
        .collect()
}

/// Write recordings using `subject = label`, `trial = index within class`.
pub fn write_recordings_csv(recs: &[Recording], path: &Path) -> Result<(), SignalError> {
    if recs.is_empty() {
        return Err(SignalError::Input("nothing to write".into()));
    }
    let channels = recs[0].num_channels();
    if recs.iter().any(|r| r.num_channels() != channels) {
        return Err(SignalError::Input("recordings disagree on channel count".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "subject,trial,label")?;
    for c in 0..channels {
        write!(out, ",ch{c}")?;
    }
    writeln!(out)?;

    let mut trial_within_class = std::collections::HashMap::new();
    for rec in recs {
        let trial = trial_within_class.entry(rec.label()).or_insert(0usize);
        for t in 0..rec.len() {
            write!(out, "{},{},{}", rec.label(), trial, rec.label())?;
            for c in 0..channels {
                // `{}` prints the shortest representation that parses back
                // to the same f64, so save/load round-trips bit-exactly.
                write!(out, ",{}", rec.channel(c)[t])?;
            }
            writeln!(out)?;
        }
        *trial += 1;
    }
    Ok(())
}
