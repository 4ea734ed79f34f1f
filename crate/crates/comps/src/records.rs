//! Per-episode results as CSV.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use comps_core::driver::RunRecord;

use crate::error::{Error, Result};

pub const HEADER: [&str; 7] = [
    "learner",
    "seed",
    "task_index",
    "episode",
    "mean_return",
    "success_rate",
    "solved_at",
];

/// Shortest plain rendering of `v` rounded to 9 significant digits.
/// Magnitudes outside `[1e-5, 1e9)` use exponent notation.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{}", if v == 0.0 { 0.0 } else { v });
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp) as usize, v);
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        // Rounding can carry into a new leading digit, e.g. 9.9999999996.
        let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
        if digits.trim_start_matches('0').len() > 9 {
            return sig9(s.parse().expect("formatted float parses"));
        }
        s
    } else {
        let s = format!("{v:.8e}");
        let (mantissa, exponent) = s.split_once('e').expect("exponent form");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{exponent}")
    }
}

pub fn write_records<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.learner.name().to_string(),
            r.seed.to_string(),
            r.task_index.to_string(),
            r.episode.to_string(),
            sig9(r.mean_return),
            sig9(r.success_rate),
            r.solved_at.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Format(format!(
            "unexpected header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |j: usize| row.get(j).unwrap_or("");
        let bad = |j: usize| Error::Format(format!("line {line}: bad {} `{}`", HEADER[j], field(j)));
        let solved = field(6);
        out.push(RunRecord {
            learner: field(0).parse().map_err(|_| bad(0))?,
            seed: field(1).parse().map_err(|_| bad(1))?,
            task_index: field(2).parse().map_err(|_| bad(2))?,
            episode: field(3).parse().map_err(|_| bad(3))?,
            mean_return: field(4).parse().map_err(|_| bad(4))?,
            success_rate: field(5).parse().map_err(|_| bad(5))?,
            solved_at: if solved.is_empty() {
                None
            } else {
                Some(solved.parse().map_err(|_| bad(6))?)
            },
        });
    }
    Ok(out)
}

pub fn write_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, BufWriter::new(file))
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file)
}
