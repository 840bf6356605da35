//! Ingestion of externally produced post-correlation logs.
//!
//! The expected file is a plain CSV with a header row. A [`ColumnMap`] binds
//! the timestamp column plus each required observable to a header name, so
//! logs from different receivers can be adapted without rewriting them.
//! Rows are bucketed into fixed-duration segment windows by timestamp,
//! matching the boundaries produced by `features::segment_capture`.

use std::path::Path;

use super::{PostCorrFeatures, PostCorrField};
use crate::error::{Error, Result};

/// Binds observables to CSV header names. Every listed column is required;
/// a file missing one is rejected rather than zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMap {
    pub time_column: String,
    pub columns: Vec<(PostCorrField, String)>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            time_column: "time".to_string(),
            columns: vec![
                (PostCorrField::CodePhase, "codePhase".to_string()),
                (PostCorrField::DllDiscr, "dllDiscr".to_string()),
                (PostCorrField::Doppler, "doppler".to_string()),
                (PostCorrField::FllLock, "fllLock".to_string()),
                (PostCorrField::PllLock, "pllLock".to_string()),
            ],
        }
    }
}

impl ColumnMap {
    /// Parses repeated `name=header` bindings, e.g. `codephase=CP1`.
    /// `time=...` rebinds the timestamp column.
    pub fn with_bindings(mut self, bindings: &[String]) -> Result<Self> {
        for b in bindings {
            let (name, header) = b
                .split_once('=')
                .ok_or_else(|| Error::validation("col", format!("{b:?} is not name=header")))?;
            if name.eq_ignore_ascii_case("time") {
                self.time_column = header.to_string();
                continue;
            }
            let field = PostCorrField::parse(name)?;
            match self.columns.iter_mut().find(|(f, _)| *f == field) {
                Some(entry) => entry.1 = header.to_string(),
                None => self.columns.push((field, header.to_string())),
            }
        }
        Ok(self)
    }
}

/// Reads a post-correlation CSV and buckets rows into segment windows.
/// Returns `(window_index, features)` pairs for every non-empty window,
/// in ascending window order.
pub fn ingest_postcorr_csv(
    path: &Path,
    map: &ColumnMap,
    segment_duration_s: f64,
) -> Result<Vec<(usize, PostCorrFeatures)>> {
    if !(segment_duration_s > 0.0) {
        return Err(Error::validation("segment_duration_s", "must be positive"));
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                Error::data(format!(
                    "{}: required column {name:?} not found in header",
                    path.display()
                ))
            })
    };
    let time_idx = find(&map.time_column)?;
    let mut field_idx = Vec::with_capacity(map.columns.len());
    for (field, header) in &map.columns {
        field_idx.push((*field, find(header)?));
    }

    let mut windows: Vec<(usize, PostCorrFeatures)> = Vec::new();
    let mut prev_time = f64::NEG_INFINITY;
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("row {}: {e}", row_no + 2)))?;
        let parse = |idx: usize| -> Result<f64> {
            record
                .get(idx)
                .ok_or_else(|| Error::data(format!("row {}: missing field {idx}", row_no + 2)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::data(format!("row {}: {e}", row_no + 2)))
        };
        let time = parse(time_idx)?;
        if time < prev_time {
            return Err(Error::data(format!(
                "row {}: timestamp {time} is earlier than {prev_time}",
                row_no + 2
            )));
        }
        prev_time = time;
        let window = (time / segment_duration_s).floor() as usize;
        if windows.last().map(|(w, _)| *w) != Some(window) {
            windows.push((window, PostCorrFeatures::new()));
        }
        let feats = &mut windows.last_mut().unwrap().1;
        let mut epoch = [0.0f64; 5];
        for (field, idx) in &field_idx {
            let v = parse(*idx)?;
            let slot = PostCorrField::ALL.iter().position(|f| f == field).unwrap();
            epoch[slot] = v;
        }
        feats.push_epoch(epoch[0], epoch[1], epoch[2], epoch[3], epoch[4]);
    }
    for (w, feats) in &windows {
        feats.validate().map_err(|e| {
            Error::data(format!("window {w}: {e}"))
        })?;
    }
    Ok(windows)
}

/// Writes features back out in the same CSV dialect; the inverse of
/// [`ingest_postcorr_csv`] up to float formatting.
pub fn export_postcorr_csv(
    path: &Path,
    windows: &[(usize, PostCorrFeatures)],
    map: &ColumnMap,
    segment_duration_s: f64,
) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut header = vec![map.time_column.clone()];
    header.extend(map.columns.iter().map(|(_, h)| h.clone()));
    writer
        .write_record(&header)
        .map_err(|e| Error::data(e.to_string()))?;
    for (window, feats) in windows {
        let epochs = feats.epochs();
        for e in 0..epochs {
            let t = *window as f64 * segment_duration_s
                + e as f64 / epochs as f64 * segment_duration_s;
            let mut row = vec![format!("{t:.9}")];
            for (field, _) in &map.columns {
                row.push(format!("{:.12e}", feats.field(*field)[e]));
            }
            writer.write_record(&row).map_err(|e| Error::data(e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}
