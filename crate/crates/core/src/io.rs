//! Small file helpers shared by every on-disk format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::io(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A parsed CSV table with a header row. Cells are kept as strings.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    path: String,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Table::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
        let perr = |e: &dyn std::fmt::Display| Error::Parse { path: origin.to_string(), msg: e.to_string() };
        let header = rdr.headers().map_err(|e| perr(&e))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| perr(&e))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { header, rows, path: origin.to_string() })
    }

    /// Fails unless the header starts with exactly `cols`.
    pub fn expect_header(&self, cols: &[&str]) -> Result<()> {
        let ok = self.header.len() >= cols.len() && self.header.iter().zip(cols).all(|(h, c)| h == c);
        if ok {
            Ok(())
        } else {
            Err(self.error(format!("expected header {}, got {}", cols.join(","), self.header.join(","))))
        }
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| self.error(format!("missing column {name}")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        let cell = self.rows[row].get(col).ok_or_else(|| self.error(format!("row {} is short", row + 2)))?;
        let v: f64 = cell.parse().map_err(|_| self.error(format!("row {}: bad number {cell:?}", row + 2)))?;
        if !v.is_finite() {
            return Err(self.error(format!("row {}: non-finite value", row + 2)));
        }
        Ok(v)
    }

    pub fn str_at(&self, row: usize, col: usize) -> Result<&str> {
        self.rows[row].get(col).map(String::as_str).ok_or_else(|| self.error(format!("row {} is short", row + 2)))
    }

    pub fn error(&self, msg: String) -> Error {
        Error::Parse { path: self.path.clone(), msg }
    }
}

/// Joins numbers with commas using shortest round-trip formatting.
pub fn csv_line(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&v.to_string());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.csv");
        write_atomic(&p, b"a\n1\n").unwrap();
        write_atomic(&p, b"a\n2\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a\n2\n");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn table_rejects_bad_numbers() {
        let t = Table::parse("t,x\n0,abc\n", "mem").unwrap();
        assert!(t.f64_at(0, 1).is_err());
        assert!(t.expect_header(&["t", "y"]).is_err());
        assert_eq!(csv_line([0.1, 2.0, -3.5e-12]), "0.1,2,-0.0000000000035");
    }
}
