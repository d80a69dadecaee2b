//! Dataset directories: `labels.csv` (`filename,label`), optional
//! `boxes.csv` (`filename,x,y,w,h`) and one P5 image per row.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use deepmil::image::Rect;
use deepmil::Sample;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::{fsutil, pgm};

pub const LABELS_FILE: &str = "labels.csv";
pub const BOXES_FILE: &str = "boxes.csv";

/// Samples with the file names they were loaded from (or will be saved as).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Names samples `img_0000.pgm`, `img_0001.pgm`, ...
    pub fn with_default_names(samples: Vec<Sample>) -> Self {
        let width = samples.len().saturating_sub(1).to_string().len().max(4);
        let names = (0..samples.len()).map(|i| format!("img_{i:0width$}.pgm")).collect();
        Self { names, samples }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    filename: String,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRow {
    filename: String,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

/// Reads every row of a headed CSV file, pairing each with its line number.
fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<(u64, R)>> {
    let bytes = fsutil::read(path)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let found = reader
        .headers()
        .map_err(|e| CliError::format(path, e.to_string()))?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(CliError::Row {
            path: path.to_path_buf(),
            line: 1,
            detail: format!(
                "expected header `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::format(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record.deserialize(Some(&found)).map_err(|e| CliError::Row {
            path: path.to_path_buf(),
            line,
            detail: e.to_string(),
        })?;
        rows.push((line, row));
    }
    Ok(rows)
}

/// Loads a dataset directory; samples come back in `labels.csv` order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels_path = dir.join(LABELS_FILE);
    let rows: Vec<(u64, LabelRow)> = read_rows(&labels_path, &["filename", "label"])?;

    let boxes_path = dir.join(BOXES_FILE);
    let mut boxes: HashMap<String, (u64, Rect)> = HashMap::new();
    if boxes_path.exists() {
        for (line, b) in read_rows::<BoxRow>(&boxes_path, &["filename", "x", "y", "w", "h"])? {
            if boxes
                .insert(b.filename.clone(), (line, Rect::new(b.x, b.y, b.w, b.h)))
                .is_some()
            {
                return Err(row_error(
                    &boxes_path,
                    line,
                    format!("duplicate box for `{}`", b.filename),
                ));
            }
        }
    }

    let mut names = Vec::with_capacity(rows.len());
    let mut samples = Vec::with_capacity(rows.len());
    let mut seen = HashMap::new();
    for (line, row) in rows {
        if let Some(first) = seen.insert(row.filename.clone(), line) {
            return Err(row_error(
                &labels_path,
                line,
                format!("`{}` already listed on line {first}", row.filename),
            ));
        }
        let label = match row.label.trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(row_error(
                    &labels_path,
                    line,
                    format!("label must be 0 or 1, found `{other}`"),
                ))
            }
        };
        let image = pgm::read(&dir.join(&row.filename))?;
        let mass_box = boxes.remove(&row.filename);
        let sample = Sample::new(image, label, mass_box.map(|(_, b)| b)).map_err(|e| match mass_box {
            Some((box_line, _)) => row_error(&boxes_path, box_line, e.to_string()),
            None => row_error(&labels_path, line, e.to_string()),
        })?;
        names.push(row.filename);
        samples.push(sample);
    }
    if let Some((name, (line, _))) = boxes.into_iter().min_by_key(|(_, (line, _))| *line) {
        return Err(row_error(
            &boxes_path,
            line,
            format!("`{name}` is not listed in {LABELS_FILE}"),
        ));
    }
    Ok(Dataset { names, samples })
}

fn row_error(path: &Path, line: u64, detail: String) -> CliError {
    CliError::Row {
        path: path.to_path_buf(),
        line,
        detail,
    }
}

fn csv_bytes<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    // written explicitly so that an empty table still has its header
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.serialize(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Writes images, `labels.csv` and `boxes.csv` into `dir` (created if
/// needed). Returns the paths written.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    fsutil::create_dir(dir)?;
    let mut written = Vec::with_capacity(data.samples.len() + 2);
    for (name, sample) in data.names.iter().zip(&data.samples) {
        let path = dir.join(name);
        pgm::write(&path, &sample.image)?;
        written.push(path);
    }
    let labels = data.names.iter().zip(&data.samples).map(|(n, s)| LabelRow {
        filename: n.clone(),
        label: if s.label { "1" } else { "0" }.into(),
    });
    let path = dir.join(LABELS_FILE);
    fsutil::write_atomic(&path, &csv_bytes(&["filename", "label"], labels))?;
    written.push(path);
    let boxes = data.names.iter().zip(&data.samples).filter_map(|(n, s)| {
        s.mass_box.map(|b| BoxRow {
            filename: n.clone(),
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        })
    });
    let path = dir.join(BOXES_FILE);
    fsutil::write_atomic(&path, &csv_bytes(&["filename", "x", "y", "w", "h"], boxes))?;
    written.push(path);
    Ok(written)
}
