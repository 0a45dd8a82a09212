//! Line-delimited JSON: the dataset interchange format and the arena's
//! append-only logs.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use humanlike_core::data::PreferenceRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Writes one JSON object per line, LF-terminated.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        write_line(&mut w, item, path)?;
    }
    w.flush().map_err(Error::io(path))
}

fn write_line<T: Serialize>(w: &mut impl Write, item: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, item).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(Error::io(path))
}

/// Visits each non-blank line with its 1-based number.
fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str) -> Result<()>) -> Result<()> {
    let file = File::open(path).map_err(Error::io(path))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if !line.trim().is_empty() {
            f(i + 1, &line)?;
        }
    }
    Ok(())
}

fn line_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Line {
        path: path.into(),
        line,
        message: message.into(),
    }
}

/// Reads any line-delimited JSON file into `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for_each_line(path, |n, line| {
        out.push(serde_json::from_str(line).map_err(|e| line_error(path, n, e.to_string()))?);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[PreferenceRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    write_jsonl(path, records)
}

/// Reads a dataset, naming the line and the missing or invalid field of the
/// first bad record.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<PreferenceRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for_each_line(path, |n, line| {
        let value: Value = serde_json::from_str(line).map_err(|e| line_error(path, n, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| line_error(path, n, "not a JSON object"))?;
        let text = |key: &str| -> Result<String> {
            match obj.get(key) {
                None | Some(Value::Null) => Err(line_error(path, n, format!("missing {key}"))),
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(line_error(path, n, format!("{key} is not a string"))),
            }
        };
        let mut record = PreferenceRecord::new(text("prompt")?, text("chosen")?, text("rejected")?);
        record.topic = match obj.get("topic") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(line_error(path, n, "topic is not a string")),
        };
        record.validate().map_err(|e| line_error(path, n, e.to_string()))?;
        out.push(record);
        Ok(())
    })?;
    Ok(out)
}

/// Append-only JSONL file; every append is flushed before returning.
#[derive(Debug)]
pub struct JsonlAppender {
    path: PathBuf,
    file: File,
}

impl JsonlAppender {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(Error::io(&path))?;
        Ok(Self { path, file })
    }

    pub fn append<T: Serialize>(&mut self, item: &T) -> Result<()> {
        let mut line = serde_json::to_vec(item).map_err(|e| Error::Format {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(Error::io(&self.path))?;
        self.file.flush().map_err(Error::io(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
