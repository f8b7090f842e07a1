use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

/// A CSV table built in memory and written in one go, ending with the
/// `# config-hash` comment line.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<I, S>(header: I) -> Result<Self, CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        writer.write_record(header).map_err(io)?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, cells: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(cells).map_err(io)
    }

    pub fn finish(self, hash: &str) -> Result<Vec<u8>, CliError> {
        let mut bytes = self.writer.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        write!(bytes, "# config-hash: {hash}\r\n").map_err(io)?;
        Ok(bytes)
    }
}

fn io(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io)?;
            }
            std::fs::write(p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).and_then(|_| out.flush()).map_err(io)
        }
    }
}

/// `out.csv` → `out.lemmas.csv`; without an output path, `lemmas.csv`.
pub fn sibling(path: Option<&Path>, tag: &str) -> PathBuf {
    match path {
        Some(p) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            p.with_file_name(format!("{stem}.{tag}.csv"))
        }
        None => PathBuf::from(format!("{tag}.csv")),
    }
}

/// Shortest round-trip decimal with '.' separator; exponent form outside
/// [1e-4, 1e15).
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
