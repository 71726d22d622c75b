//! CSV manifest parsing and writing.
//!
//! Format: UTF-8 CSV with header `image_id,class,case_id,path`; paths are
//! relative to the manifest's directory; class names map to indices by
//! first-appearance order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{DatasetError, DatasetIndex, ImageEntry};

const HEADER: [&str; 4] = ["image_id", "class", "case_id", "path"];

/// Parse a manifest from any reader. Enforces every [`DatasetIndex`]
/// invariant but does not touch the filesystem; `source_root` is recorded
/// as given.
pub fn parse_manifest<R: Read>(reader: R, source_root: &Path) -> Result<DatasetIndex, DatasetError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = csv_reader
        .headers()
        .map_err(|e| malformed(&e))?
        .clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(DatasetError::Malformed {
            line: 1,
            message: format!(
                "expected header {:?}, found {:?}",
                HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut classes: Vec<String> = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut entries: Vec<ImageEntry> = Vec::new();
    let mut seen: HashMap<(usize, String, String), u64> = HashMap::new();

    for record in csv_reader.records() {
        let record = record.map_err(|e| malformed(&e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(DatasetError::Malformed {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let image_id = record[0].to_string();
        let class = record[1].to_string();
        let case_id = record[2].to_string();
        let path = record[3].to_string();
        for (name, value) in HEADER.iter().zip([&image_id, &class, &case_id, &path]) {
            if value.is_empty() {
                return Err(DatasetError::Malformed {
                    line,
                    message: format!("empty {name} field"),
                });
            }
        }
        let class_index = *class_ids.entry(class.clone()).or_insert_with(|| {
            classes.push(class.clone());
            classes.len() - 1
        });
        let key = (class_index, case_id.clone(), image_id.clone());
        if let Some(_first) = seen.insert(key, line) {
            return Err(DatasetError::DuplicateEntry {
                line,
                class,
                case_id,
                image_id,
            });
        }
        entries.push(ImageEntry {
            image_id,
            class_index,
            case_id,
            path: PathBuf::from(path),
        });
    }

    if entries.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    DatasetIndex::new(entries, classes, source_root.to_path_buf())
}

/// Load a manifest from disk and verify that every image path resolves to an
/// existing file. Entry order equals manifest order.
pub fn load_manifest(path: &Path) -> Result<DatasetIndex, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let index = parse_manifest(file, &root)?;
    for entry in &index.entries {
        let resolved = index.resolve(entry);
        if !resolved.is_file() {
            return Err(DatasetError::UnresolvedPath {
                image_id: entry.image_id.clone(),
                path: resolved,
            });
        }
    }
    Ok(index)
}

/// Write an index back out as a manifest CSV.
pub fn write_manifest(index: &DatasetIndex, path: &Path) -> Result<(), DatasetError> {
    let mut out = File::create(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut buf = String::new();
    buf.push_str(&HEADER.join(","));
    buf.push('\n');
    for e in &index.entries {
        buf.push_str(&format!(
            "{},{},{},{}\n",
            e.image_id,
            index.classes[e.class_index],
            e.case_id,
            e.path.to_string_lossy()
        ));
    }
    out.write_all(buf.as_bytes()).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn malformed(e: &csv::Error) -> DatasetError {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    DatasetError::Malformed {
        line,
        message: e.to_string(),
    }
}
