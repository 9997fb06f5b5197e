//! Atomic artifact writes: data goes to a sibling temp file that is renamed
//! over the target, so readers never observe a partially written file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes rows with `csv` and writes them atomically.
pub fn write_csv_atomic<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// A file built up incrementally under a temp name and renamed on `finish`.
pub struct PendingFile {
    tmp: PathBuf,
    path: PathBuf,
    file: std::io::BufWriter<fs::File>,
}

impl PendingFile {
    pub fn create(path: &Path) -> Result<Self> {
        let tmp = temp_path(path);
        let file = std::io::BufWriter::new(fs::File::create(&tmp)?);
        Ok(Self { tmp, path: path.to_path_buf(), file })
    }

    pub fn writer(&mut self) -> &mut impl Write {
        &mut self.file
    }

    pub fn finish(self) -> Result<()> {
        let file = self.file.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&self.tmp, &self.path)?;
        Ok(())
    }
}
