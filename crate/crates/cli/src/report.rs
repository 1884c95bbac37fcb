//! CSV reports. Each file opens with a `# ifr-<kind> v<version>` comment line
//! followed by a fixed header row; a column change bumps the version.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

pub struct CsvTable {
    kind: &'static str,
    version: u32,
    header: &'static [&'static str],
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(kind: &'static str, version: u32, header: &'static [&'static str]) -> Self {
        Self {
            kind,
            version,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width for {}", self.kind);
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("# ifr-{} v{}\n", self.kind, self.version).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(self.header)?;
            for row in &self.rows {
                w.write_record(row)?;
            }
            w.flush()?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Shortest round-trip form, so reports carry full precision; very small or
/// large magnitudes use exponent notation.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Reads back a report written by [`CsvTable`]: header and rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let body = text
        .strip_prefix("# ")
        .and_then(|t| t.split_once('\n'))
        .map(|(_, rest)| rest)
        .with_context(|| format!("{} has no version line", path.display()))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}
