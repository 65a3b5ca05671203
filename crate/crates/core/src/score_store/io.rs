//! CSV and binary score-file formats.
//!
//! CSV: header `scores,K=<K>` (optionally followed by `,kind=logits` or
//! `,kind=probabilities`), then one line per example with `K` decimal
//! scores and an integer label.
//!
//! Binary: magic `CSET1`, `u8` kind (0 = logits, 1 = probabilities),
//! `u64` n, `u64` K, `n × K` `f32` scores row-major, then `n` `u32` labels.
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::{ScoreKind, ScoreMatrix, RENORMALIZE_TOLERANCE};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CSET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    /// `.csv` maps to CSV, everything else to binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

impl FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "binary" | "bin" => Ok(FileFormat::Binary),
            other => Err(Error::InvalidParameter(format!("unknown format {other:?}"))),
        }
    }
}

pub fn load_scores(path: &Path, format: FileFormat) -> Result<ScoreMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        FileFormat::Csv => read_csv(reader),
        FileFormat::Binary => read_binary(reader),
    }
    .map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn save_scores(m: &ScoreMatrix, path: &Path, format: FileFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        FileFormat::Csv => write_csv(m, &mut writer),
        FileFormat::Binary => write_binary(m, &mut writer),
    }
    .and_then(|()| writer.flush().map_err(|e| Error::io(path, e)))
    .map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn parse_header(line: &str) -> Result<(usize, Option<ScoreKind>)> {
    let mut fields = line.trim().split(',');
    if fields.next() != Some("scores") {
        return Err(Error::Header(format!(
            "expected `scores,K=<K>`, found {line:?}"
        )));
    }
    let classes = fields
        .next()
        .and_then(|f| f.strip_prefix("K="))
        .and_then(|k| k.parse::<usize>().ok())
        .ok_or_else(|| Error::Header(format!("missing or invalid `K=<K>` in {line:?}")))?;
    let kind = match fields.next() {
        None => None,
        Some("kind=logits") => Some(ScoreKind::Logits),
        Some("kind=probabilities") => Some(ScoreKind::Probabilities),
        Some(other) => return Err(Error::Header(format!("unknown header field {other:?}"))),
    };
    if fields.next().is_some() {
        return Err(Error::Header(format!("trailing fields in {line:?}")));
    }
    Ok((classes, kind))
}

/// Reads the CSV format. Without an explicit `kind=` field the matrix is
/// treated as probabilities when every row is a distribution (entries in
/// `[0, 1]`, sum within the renormalization tolerance) and as logits
/// otherwise.
pub fn read_csv<R: BufRead>(reader: R) -> Result<ScoreMatrix> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io("<csv>", e))?,
        None => return Err(Error::Header("empty file".into())),
    };
    let (classes, declared) = parse_header(&header)?;
    if classes < 2 {
        return Err(Error::Header(format!(
            "K must be at least 2, got {classes}"
        )));
    }

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<csv>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != classes + 1 {
            return Err(Error::RowLength {
                row,
                expected: classes + 1,
                found: fields.len(),
            });
        }
        for (col, field) in fields[..classes].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                value: (*field).to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            scores.push(v);
        }
        let label: i64 = fields[classes].parse().map_err(|_| Error::Parse {
            row,
            value: fields[classes].to_string(),
        })?;
        if label < 0 || label as usize >= classes {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes,
            });
        }
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let kind = declared.unwrap_or_else(|| infer_kind(&scores, classes));
    ScoreMatrix::new(classes, scores, labels, kind)
}

fn infer_kind(scores: &[f64], classes: usize) -> ScoreKind {
    let is_distribution = |row: &[f64]| {
        row.iter().all(|v| (0.0..=1.0).contains(v))
            && (row.iter().sum::<f64>() - 1.0).abs() <= RENORMALIZE_TOLERANCE
    };
    if scores.chunks_exact(classes).all(is_distribution) {
        ScoreKind::Probabilities
    } else {
        ScoreKind::Logits
    }
}

/// Writes the CSV format with shortest round-trip decimal representations.
pub fn write_csv<W: Write>(m: &ScoreMatrix, mut w: W) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(w, "scores,K={},kind={}", m.classes(), m.kind().as_str()).map_err(io)?;
    let mut line = String::new();
    for (row, label) in m.rows().zip(m.labels()) {
        line.clear();
        for v in row {
            line.push_str(&v.to_string());
            line.push(',');
        }
        line.push_str(&label.to_string());
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("while reading {what}"))
        } else {
            Error::io("<binary>", e)
        }
    })
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<ScoreMatrix> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Header(format!(
            "bad magic {magic:?}, expected CSET1"
        )));
    }
    let mut kind = [0u8; 1];
    read_exact(&mut r, &mut kind, "kind flag")?;
    let kind = match kind[0] {
        0 => ScoreKind::Logits,
        1 => ScoreKind::Probabilities,
        other => return Err(Error::Header(format!("unknown kind flag {other}"))),
    };
    let n = read_u64(&mut r, "n")? as usize;
    let classes = read_u64(&mut r, "K")? as usize;
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    if classes < 2 {
        return Err(Error::Header(format!(
            "K must be at least 2, got {classes}"
        )));
    }
    let cells = n
        .checked_mul(classes)
        .ok_or_else(|| Error::Header(format!("n × K overflows: {n} × {classes}")))?;

    let mut scores = Vec::with_capacity(cells);
    let mut buf = [0u8; 4];
    for cell in 0..cells {
        read_exact(&mut r, &mut buf, "scores")?;
        let v = f32::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: cell / classes,
                col: cell % classes,
            });
        }
        scores.push(f64::from(v));
    }
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        read_exact(&mut r, &mut buf, "labels")?;
        let label = u32::from_le_bytes(buf) as usize;
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                row,
                label: label as i64,
                classes,
            });
        }
        labels.push(label);
    }
    ScoreMatrix::new(classes, scores, labels, kind)
}

/// Writes the binary format. Scores are narrowed to `f32`.
pub fn write_binary<W: Write>(m: &ScoreMatrix, mut w: W) -> Result<()> {
    let io = |e| Error::io("<binary>", e);
    w.write_all(MAGIC).map_err(io)?;
    let flag: u8 = match m.kind() {
        ScoreKind::Logits => 0,
        ScoreKind::Probabilities => 1,
    };
    w.write_all(&[flag]).map_err(io)?;
    w.write_all(&(m.n() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.classes() as u64).to_le_bytes())
        .map_err(io)?;
    for &v in m.scores() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    for &label in m.labels() {
        w.write_all(&(label as u32).to_le_bytes()).map_err(io)?;
    }
    Ok(())
}
