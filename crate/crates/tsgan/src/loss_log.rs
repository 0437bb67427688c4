//! Append-only training log: one loss report per line, with
//! `# epoch <e> lr <lr>` markers where an epoch starts.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tsgan_core::losses::LossReport;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LogLine {
    Epoch { epoch: usize, lr: f64 },
    Report(LossReport),
}

impl LogLine {
    pub fn render(&self) -> String {
        match self {
            LogLine::Epoch { epoch, lr } => format!("# epoch {epoch} lr {lr}"),
            LogLine::Report(r) => r.to_line(),
        }
    }

    pub fn parse(line: &str) -> Result<Self> {
        if let Some(rest) = line.strip_prefix("# epoch ") {
            let bad = || CliError::Data(format!("loss log marker: {line:?}"));
            let (epoch, lr) = rest.split_once(" lr ").ok_or_else(bad)?;
            return Ok(LogLine::Epoch {
                epoch: epoch.parse().map_err(|_| bad())?,
                lr: lr.parse().map_err(|_| bad())?,
            });
        }
        Ok(LogLine::Report(LossReport::parse_line(line)?))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(LogLine::parse).collect()
}

/// The loss reports of a log, markers dropped.
pub fn read_reports(path: &Path) -> Result<Vec<LossReport>> {
    Ok(read_log(path)?
        .into_iter()
        .filter_map(|l| match l {
            LogLine::Report(r) => Some(r),
            LogLine::Epoch { .. } => None,
        })
        .collect())
}

pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(CliError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    /// Reopen a log to continue at `step`: lines about later steps (and
    /// epoch markers of epochs starting at or after it) are dropped first.
    pub fn resume(path: &Path, step: u64, steps_per_epoch: u64) -> Result<Self> {
        let kept: Vec<String> = if path.exists() {
            read_log(path)?
                .into_iter()
                .filter(|l| match l {
                    LogLine::Epoch { epoch, .. } => (*epoch as u64) * steps_per_epoch < step,
                    LogLine::Report(r) => r.step < step,
                })
                .map(|l| l.render() + "\n")
                .collect()
        } else {
            Vec::new()
        };
        fs::write(path, kept.concat()).map_err(CliError::io(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(CliError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, line: &LogLine) -> Result<()> {
        writeln!(self.out, "{}", line.render()).map_err(CliError::io(&self.path))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(CliError::io(&self.path))
    }
}
