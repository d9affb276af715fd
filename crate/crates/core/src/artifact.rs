//! Versioned JSONL artifacts: a header line naming the artifact kind and
//! schema version, then one JSON value per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    artifact: String,
    schema_version: u32,
}

fn header_line(kind: &str) -> Result<String> {
    Ok(serde_json::to_string(&Header {
        artifact: kind.to_string(),
        schema_version: SCHEMA_VERSION,
    })?)
}

fn check_header(line: &str, kind: &str, path: &Path) -> Result<()> {
    let header: Header = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: 1,
        reason: format!("{}: bad artifact header: {e}", path.display()),
    })?;
    if header.artifact != kind || header.schema_version != SCHEMA_VERSION {
        return Err(Error::MalformedRecord {
            line: 1,
            reason: format!(
                "{}: expected {kind} v{SCHEMA_VERSION}, found {} v{}",
                path.display(),
                header.artifact,
                header.schema_version
            ),
        });
    }
    Ok(())
}

/// Write `items` as a complete artifact, replacing any existing file.
pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |line: &str| writeln!(w, "{line}").map_err(|e| Error::io(&tmp, e));
        emit(&header_line(kind)?)?;
        for item in items {
            emit(&serde_json::to_string(item)?)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read an artifact written by [`write_jsonl`] or [`JsonlAppender`].
///
/// With `tolerate_torn_tail`, an unparsable final line (an interrupted
/// append) is skipped with a warning instead of failing.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str, tolerate_torn_tail: bool) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let Some(first) = lines.first() else {
        return Err(Error::MalformedRecord {
            line: 1,
            reason: format!("{}: empty artifact", path.display()),
        });
    };
    check_header(first, kind, path)?;
    let last = lines.len();
    let mut out = Vec::with_capacity(last.saturating_sub(1));
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if tolerate_torn_tail && i + 1 == last => {
                log::warn!("{}: ignoring torn final line: {e}", path.display());
            }
            Err(e) => {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Line-at-a-time writer for long runs; every line is flushed so an
/// interrupted run loses at most the line being written.
pub struct JsonlAppender {
    path: std::path::PathBuf,
    file: Mutex<File>,
}

impl JsonlAppender {
    /// Open for appending, writing the header if the file is new or empty.
    pub fn open(path: &Path, kind: &str) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{}", header_line(kind)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn append<T: Serialize>(&self, item: &T) -> Result<()> {
        let line = serde_json::to_string(item)?;
        let mut f = self.file.lock().unwrap();
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
