//! Atomic file output helpers shared by every subcommand: write to a
//! temporary sibling, then rename into place.

use crate::error::Result;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Minimal CSV builder: header once, numeric-or-plain cells, no quoting.
pub struct Csv {
    out: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            out: format!("{}\n", header.join(",")),
            cols: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.cols);
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.out.as_bytes())
    }

    pub fn as_str(&self) -> &str {
        &self.out
    }
}

/// Format a float the same way everywhere so reruns stay byte-identical.
pub fn fnum(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.9e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(&["1".into(), "2".into()]);
        assert_eq!(c.as_str(), "a,b\n1,2\n");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert!(!p.with_extension("tmp").exists());
    }

    #[test]
    fn stable_float_format() {
        assert_eq!(fnum(2.0), "2.0");
        assert_eq!(fnum(0.5), fnum(0.5));
        assert!(fnum(1.0 / 3.0).contains('e'));
    }
}
