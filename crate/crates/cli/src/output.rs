//! Files written by the commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Git-style object hash, `sha256("blob <len>\0" + content)`, hex encoded.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output types serialize");
    text.push('\n');
    write_text(path, &text)
}

/// `t` as it appears in file names.
pub fn time_label(t: f64) -> String {
    format!("t{t}")
}

/// Buffered line writer that keeps the first I/O error instead of failing
/// mid-stream.
pub struct LineSink {
    path: PathBuf,
    inner: Option<BufWriter<File>>,
    error: Option<std::io::Error>,
}

impl LineSink {
    pub fn create(path: &Path, header: &str) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut sink = LineSink {
            path: path.to_path_buf(),
            inner: Some(BufWriter::new(file)),
            error: None,
        };
        sink.line(header);
        Ok(sink)
    }

    pub fn line(&mut self, text: &str) {
        if let Some(w) = self.inner.as_mut() {
            if let Err(e) = w.write_all(text.as_bytes()).and_then(|_| w.write_all(b"\n")) {
                self.error = Some(e);
                self.inner = None;
            }
        }
    }

    pub fn finish(mut self) -> CliResult<()> {
        if let Some(e) = self.error.take() {
            return Err(CliError::io(&self.path, e));
        }
        if let Some(mut w) = self.inner.take() {
            w.flush().map_err(|e| CliError::io(&self.path, e))?;
        }
        Ok(())
    }
}
