//! Line-delimited JSON dataset files with per-record diagnostics.
//! Schemas are documented in docs/data-formats.md.

use super::EvalRecord;
use crate::error::{KbError, Result};
use crate::scope::EditRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufRead, Write};
use std::path::Path;

fn save_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

fn load_lines<T, F>(path: &Path, validate: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<()>,
{
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let record: T = serde_json::from_str(&line).map_err(|e| {
            KbError::Validation(format!("{}:{lineno}: {e}", path.display()))
        })?;
        validate(&record).map_err(|e| {
            KbError::Validation(format!("{}:{lineno}: {e}", path.display()))
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(KbError::Validation(format!(
            "{}: no records",
            path.display()
        )));
    }
    Ok(records)
}

pub fn save_training(path: &Path, records: &[EditRecord]) -> Result<()> {
    save_lines(path, records)
}

pub fn load_training(path: &Path) -> Result<Vec<EditRecord>> {
    load_lines(path, EditRecord::validate)
}

pub fn save_eval(path: &Path, records: &[EvalRecord]) -> Result<()> {
    save_lines(path, records)
}

pub fn load_eval(path: &Path) -> Result<Vec<EvalRecord>> {
    load_lines(path, EvalRecord::validate)
}
