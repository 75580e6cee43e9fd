//! Shared helpers for CSV and JSON result files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Provenance stamped as a `#` comment on the first line of every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub master_seed: u64,
    pub config_checksum: String,
}

impl ArtifactHeader {
    pub fn line(&self) -> String {
        format!(
            "# master_seed={} config_sha256={}",
            self.master_seed, self.config_checksum
        )
    }
}

/// Opens `path` for writing and emits the header comment, if any.
pub fn create_csv(
    path: &Path,
    header: Option<&ArtifactHeader>,
) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    if let Some(h) = header {
        writeln!(buf, "{}", h.line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(buf))
}

pub fn finish_csv(mut wtr: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    if !path.exists() {
        return Err(Error::Prerequisite(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file))
}

/// Empty string for `None`, shortest round-trip decimal otherwise.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| Error::param(format!("{s:?} is not a number")))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Prerequisite(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One id per line.
pub fn write_id_list<'a>(
    path: &Path,
    ids: impl IntoIterator<Item = &'a usize>,
    header: Option<&ArtifactHeader>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.line());
        out.push('\n');
    }
    for id in ids {
        out.push_str(&id.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_id_list(path: &Path) -> Result<Vec<usize>> {
    if !path.exists() {
        return Err(Error::Prerequisite(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse()
                .map_err(|_| Error::param(format!("bad id {l:?} in {}", path.display())))
        })
        .collect()
}
