//! JSON-lines experiment records.
//!
//! Each line is one object carrying `schema_version`, a `record` kind and
//! the flattened payload fields.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a, P> {
    schema_version: u32,
    record: &'a str,
    #[serde(flatten)]
    payload: &'a P,
}

/// One record as a single line of JSON, without the trailing newline.
/// `payload` must serialize as a map (a struct or map type).
pub fn json_line<P: Serialize>(record: &str, payload: &P) -> Result<String> {
    serde_json::to_string(&Envelope {
        schema_version: REPORT_SCHEMA_VERSION,
        record,
        payload,
    })
    .map_err(|e| Error::Serde(e.to_string()))
}

/// Appends records to a file, or drops them when no path was given.
pub struct ReportSink {
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl ReportSink {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn emit<P: Serialize>(&mut self, record: &str, payload: &P) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            let line = json_line(record, payload)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if let Some((path, mut w)) = self.out {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
