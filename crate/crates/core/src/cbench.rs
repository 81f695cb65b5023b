//! Benchmark program directory conventions.
//!
//! A prepared program directory carries `_ccc_program_id` (its shareable id)
//! and `_ccc_info_datasets`:
//!
//! ```text
//! <total number of datasets>
//! ====
//! <dataset number>
//! <command line for this dataset>
//! <loop wrapper bound>
//! ====
//! ...
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{DatasetEntry, EntityId, ProgramDescriptor};

pub const DATASETS_FILE: &str = "_ccc_info_datasets";
pub const PROGRAM_ID_FILE: &str = "_ccc_program_id";
/// Optional list of output files (one per line) compared against the reference run.
pub const OUTPUTS_FILE: &str = "_ccc_outputs";
/// Environment variable carrying the loop wrapper bound to the program.
pub const LOOP_WRAPPER_VAR: &str = "CCC_LOOP_WRAPPER";

const SEPARATOR: &str = "====";

#[derive(Debug, Error)]
pub enum CbenchError {
    #[error("{file}: {reason}")]
    Format { file: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn format_err(reason: impl Into<String>) -> CbenchError {
    CbenchError::Format {
        file: DATASETS_FILE,
        reason: reason.into(),
    }
}

pub fn parse_datasets(text: &str) -> Result<Vec<DatasetEntry>, CbenchError> {
    let mut lines = text.lines().map(str::trim_end);
    let total: usize = lines
        .next()
        .ok_or_else(|| format_err("empty file"))?
        .trim()
        .parse()
        .map_err(|_| format_err("first line must be the dataset count"))?;
    let mut entries = Vec::with_capacity(total);
    loop {
        match lines.next() {
            Some(SEPARATOR) => {}
            Some("") => continue,
            None => break,
            Some(other) => return Err(format_err(format!("expected '====', got {other:?}"))),
        }
        let Some(number) = lines.next() else { break };
        if number.trim().is_empty() {
            break;
        }
        let number: u32 = number
            .trim()
            .parse()
            .map_err(|_| format_err(format!("bad dataset number {number:?}")))?;
        let command_line = lines
            .next()
            .ok_or_else(|| format_err(format!("dataset {number}: missing command line")))?
            .to_string();
        let bound = lines
            .next()
            .ok_or_else(|| format_err(format!("dataset {number}: missing loop wrapper bound")))?;
        let loop_wrapper_bound: u64 =
            bound
                .trim()
                .parse()
                .ok()
                .filter(|b| *b > 0)
                .ok_or_else(|| {
                    format_err(format!(
                        "dataset {number}: bad loop wrapper bound {bound:?}"
                    ))
                })?;
        entries.push(DatasetEntry {
            number,
            command_line,
            loop_wrapper_bound,
        });
    }
    if entries.len() != total {
        return Err(format_err(format!(
            "header announces {total} datasets, found {}",
            entries.len()
        )));
    }
    for (i, e) in entries.iter().enumerate() {
        if e.number as usize != i + 1 {
            return Err(format_err(format!(
                "dataset numbers must be 1..{total} in order, found {} at position {}",
                e.number,
                i + 1
            )));
        }
    }
    Ok(entries)
}

pub fn write_datasets(entries: &[DatasetEntry]) -> String {
    let mut out = format!("{}\n", entries.len());
    for e in entries {
        out.push_str(&format!(
            "{SEPARATOR}\n{}\n{}\n{}\n",
            e.number, e.command_line, e.loop_wrapper_bound
        ));
    }
    out.push_str(SEPARATOR);
    out.push('\n');
    out
}

fn read(path: &Path) -> Result<String, CbenchError> {
    fs::read_to_string(path).map_err(|source| CbenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads `_ccc_program_id` if present.
pub fn read_program_id(dir: &Path) -> Result<Option<EntityId>, CbenchError> {
    let path = dir.join(PROGRAM_ID_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let raw = read(&path)?;
    raw.trim()
        .parse()
        .map(Some)
        .map_err(|e| CbenchError::Format {
            file: PROGRAM_ID_FILE,
            reason: format!("{e}"),
        })
}

/// Builds a program descriptor from a prepared directory. The program name
/// defaults to the directory name.
pub fn load_program_dir(dir: &Path) -> Result<(Option<EntityId>, ProgramDescriptor), CbenchError> {
    let datasets = parse_datasets(&read(&dir.join(DATASETS_FILE))?)?;
    let id = read_program_id(dir)?;
    let source_dir = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
    let name = source_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "program".into());
    Ok((
        id,
        ProgramDescriptor {
            name,
            source_dir,
            datasets,
            features: None,
        },
    ))
}

/// Output files listed in `_ccc_outputs`, relative to the program directory.
pub fn output_files(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join(OUTPUTS_FILE))
        .map(|s| {
            s.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}
