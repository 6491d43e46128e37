//! Hypnogram records and the `.hyp` text format.
//!
//! A `.hyp` file holds one or more records. A line `== <record_id>` starts a
//! record, each following line carries whitespace-separated stage tokens
//! (`W REM N1 N2 N3`), and lines starting with `#` are comments.

use crate::error::{Error, Result};
use crate::stage::SleepStage;
use std::fmt::Write as _;
use std::path::Path;

/// Default scoring-window length in seconds.
pub const DEFAULT_EPOCH_SECONDS: u32 = 30;

/// One record's sleep-stage sequence, one stage per scoring epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hypnogram {
    record_id: String,
    stages: Vec<SleepStage>,
    epoch_seconds: u32,
}

impl Hypnogram {
    /// Builds a record; the stage sequence must be non-empty and the id must
    /// be non-empty, single-line text.
    pub fn new(record_id: impl Into<String>, stages: Vec<SleepStage>) -> Result<Self> {
        let record_id = record_id.into();
        if stages.is_empty() {
            return Err(Error::EmptyInput(format!(
                "record {record_id:?} has no stages"
            )));
        }
        if record_id.trim().is_empty() || record_id.contains('\n') || record_id.contains('\r') {
            return Err(Error::InvalidArgument(format!(
                "record id {record_id:?} must be non-empty single-line text"
            )));
        }
        Ok(Hypnogram {
            record_id,
            stages,
            epoch_seconds: DEFAULT_EPOCH_SECONDS,
        })
    }

    /// Overrides the 30-second default epoch length.
    pub fn with_epoch_seconds(mut self, epoch_seconds: u32) -> Result<Self> {
        if epoch_seconds == 0 {
            return Err(Error::InvalidArgument(
                "epoch_seconds must be positive".into(),
            ));
        }
        self.epoch_seconds = epoch_seconds;
        Ok(self)
    }

    /// Replaces the record id, keeping stages.
    pub fn with_record_id(mut self, record_id: impl Into<String>) -> Self {
        self.record_id = record_id.into();
        self
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn stages(&self) -> &[SleepStage] {
        &self.stages
    }

    /// Number of epochs; always at least 1.
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn epoch_seconds(&self) -> u32 {
        self.epoch_seconds
    }
}

/// Renders records in the `.hyp` text format, one stage token per line.
pub fn write_hyp(records: &[Hypnogram]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to write".into()));
    }
    let mut out = String::new();
    for record in records {
        writeln!(out, "== {}", record.record_id()).expect("string write");
        for stage in record.stages() {
            out.push_str(stage.token());
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parses the `.hyp` text format; `origin` labels parse errors (usually a path).
pub fn parse_hyp(input: &str, origin: &str) -> Result<Vec<Hypnogram>> {
    let mut records = Vec::new();
    let mut current: Option<(String, Vec<SleepStage>, usize)> = None;

    let finish = |current: &mut Option<(String, Vec<SleepStage>, usize)>,
                      records: &mut Vec<Hypnogram>|
     -> Result<()> {
        if let Some((id, stages, header_line)) = current.take() {
            if stages.is_empty() {
                return Err(Error::parse(
                    origin,
                    header_line,
                    format!("record {id:?} has no stages"),
                ));
            }
            records.push(Hypnogram::new(id, stages)?);
        }
        Ok(())
    };

    for (idx, raw_line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("==") {
            let id = rest.trim();
            if id.is_empty() {
                return Err(Error::parse(origin, line_no, "record header with empty id"));
            }
            finish(&mut current, &mut records)?;
            current = Some((id.to_string(), Vec::new(), line_no));
            continue;
        }
        let Some((_, stages, _)) = current.as_mut() else {
            return Err(Error::parse(
                origin,
                line_no,
                format!("stage token {line:?} before any '== <record_id>' header"),
            ));
        };
        for token in line.split_whitespace() {
            match SleepStage::from_token(token) {
                Some(stage) => stages.push(stage),
                None => {
                    return Err(Error::parse(
                        origin,
                        line_no,
                        format!("unknown stage token {token:?}"),
                    ))
                }
            }
        }
    }
    finish(&mut current, &mut records)?;

    if records.is_empty() {
        return Err(Error::parse(origin, 1, "no records in input"));
    }
    Ok(records)
}

/// Reads a `.hyp` file.
pub fn read_hyp_file(path: impl AsRef<Path>) -> Result<Vec<Hypnogram>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_hyp(&text, &path.display().to_string())
}

/// Writes a `.hyp` file.
pub fn write_hyp_file(path: impl AsRef<Path>, records: &[Hypnogram]) -> Result<()> {
    std::fs::write(path, write_hyp(records)?)?;
    Ok(())
}
