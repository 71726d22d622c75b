//! Image collections with case-level metadata.
//!
//! A [`DatasetIndex`] catalogs images by class and case (patient) identifier;
//! the case annotation is what makes leakage-free support/query splitting
//! possible downstream. The module also ships a procedural generator for a
//! desk-scale synthetic dataset and the train/eval preprocessing paths.

mod manifest;
mod preprocess;
mod synthetic;

pub use manifest::{load_manifest, parse_manifest, write_manifest};
pub use preprocess::{preprocess_eval, preprocess_train, ImageTensor, PixelImage, TENSOR_SIDE};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest at line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("duplicate entry (class={class}, case={case_id}, image={image_id}) at line {line}")]
    DuplicateEntry {
        line: u64,
        class: String,
        case_id: String,
        image_id: String,
    },
    #[error("class {0:?} has no entries")]
    EmptyClass(String),
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("entry {image_id}: image path does not resolve: {path}")]
    UnresolvedPath { image_id: String, path: PathBuf },
    #[error("entry {image_id}: class index {class_index} out of bounds ({n_classes} classes)")]
    ClassIndexOutOfBounds {
        image_id: String,
        class_index: usize,
        n_classes: usize,
    },
    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image is {width}x{height}, smaller than the {min}x{min} crop")]
    ImageTooSmall {
        width: u32,
        height: u32,
        min: u32,
    },
    #[error("output directory not writable: {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One cataloged image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub image_id: String,
    pub class_index: usize,
    pub case_id: String,
    /// Path relative to the index's `source_root`.
    pub path: PathBuf,
}

/// Catalog of images with class labels and case identifiers.
///
/// Invariants (checked by [`DatasetIndex::validate`]):
/// - every entry's `class_index` is within bounds of `classes`,
/// - `(class, case_id, image_id)` triples are unique,
/// - every class has at least one entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<ImageEntry>,
    pub classes: Vec<String>,
    pub source_root: PathBuf,
}

impl DatasetIndex {
    /// Build an index from parts, enforcing the type invariants.
    pub fn new(
        entries: Vec<ImageEntry>,
        classes: Vec<String>,
        source_root: PathBuf,
    ) -> Result<Self, DatasetError> {
        let index = DatasetIndex {
            entries,
            classes,
            source_root,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.entries.is_empty() {
            return Err(DatasetError::EmptyManifest);
        }
        let mut seen = HashSet::new();
        let mut class_counts = vec![0usize; self.classes.len()];
        for (i, e) in self.entries.iter().enumerate() {
            if e.class_index >= self.classes.len() {
                return Err(DatasetError::ClassIndexOutOfBounds {
                    image_id: e.image_id.clone(),
                    class_index: e.class_index,
                    n_classes: self.classes.len(),
                });
            }
            class_counts[e.class_index] += 1;
            if !seen.insert((e.class_index, e.case_id.clone(), e.image_id.clone())) {
                return Err(DatasetError::DuplicateEntry {
                    line: i as u64 + 2, // header is line 1
                    class: self.classes[e.class_index].clone(),
                    case_id: e.case_id.clone(),
                    image_id: e.image_id.clone(),
                });
            }
        }
        for (ci, count) in class_counts.iter().enumerate() {
            if *count == 0 {
                return Err(DatasetError::EmptyClass(self.classes[ci].clone()));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Entry indices grouped by class, in entry order.
    pub fn entries_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes.len()];
        for (i, e) in self.entries.iter().enumerate() {
            by_class[e.class_index].push(i);
        }
        by_class
    }

    /// Per class, entry indices grouped by case id (sorted by case id for
    /// deterministic iteration).
    pub fn cases_by_class(&self) -> Vec<BTreeMap<String, Vec<usize>>> {
        let mut out = vec![BTreeMap::new(); self.classes.len()];
        for (i, e) in self.entries.iter().enumerate() {
            out[e.class_index]
                .entry(e.case_id.clone())
                .or_insert_with(Vec::new)
                .push(i);
        }
        out
    }

    /// Absolute path of an entry's image file.
    pub fn resolve(&self, entry: &ImageEntry) -> PathBuf {
        self.source_root.join(&entry.path)
    }

    /// Restrict the index to the given class indices, renumbering classes in
    /// the order supplied. Used to evaluate an N-way subset of a wider set.
    pub fn restrict_classes(&self, keep: &[usize]) -> Result<DatasetIndex, DatasetError> {
        let mut remap = HashMap::new();
        let mut classes = Vec::with_capacity(keep.len());
        for (new_idx, &old_idx) in keep.iter().enumerate() {
            if old_idx >= self.classes.len() {
                return Err(DatasetError::ClassIndexOutOfBounds {
                    image_id: String::new(),
                    class_index: old_idx,
                    n_classes: self.classes.len(),
                });
            }
            remap.insert(old_idx, new_idx);
            classes.push(self.classes[old_idx].clone());
        }
        let entries = self
            .entries
            .iter()
            .filter_map(|e| {
                remap.get(&e.class_index).map(|&new_idx| ImageEntry {
                    class_index: new_idx,
                    ..e.clone()
                })
            })
            .collect();
        DatasetIndex::new(entries, classes, self.source_root.clone())
    }
}

/// Decoded-image cache over a [`DatasetIndex`].
///
/// Decoding is pure per image, so the cache is shared behind a mutex and
/// entries are decoded at most once.
pub struct ImageStore {
    index: DatasetIndex,
    by_identity: HashMap<(usize, String, String), usize>,
    cache: Mutex<HashMap<usize, Arc<PixelImage>>>,
}

impl ImageStore {
    pub fn new(index: DatasetIndex) -> Self {
        let by_identity = index
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.class_index, e.case_id.clone(), e.image_id.clone()), i))
            .collect();
        ImageStore {
            index,
            by_identity,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    /// Position of an entry in the index, keyed by its identity triple.
    pub fn entry_position(&self, entry: &ImageEntry) -> Option<usize> {
        self.by_identity
            .get(&(
                entry.class_index,
                entry.case_id.clone(),
                entry.image_id.clone(),
            ))
            .copied()
    }

    /// Decode (or fetch from cache) the image behind an episode entry.
    pub fn pixels_for(&self, entry: &ImageEntry) -> Result<Arc<PixelImage>, DatasetError> {
        match self.entry_position(entry) {
            Some(i) => self.pixels(i),
            None => Err(DatasetError::UnresolvedPath {
                image_id: entry.image_id.clone(),
                path: entry.path.clone(),
            }),
        }
    }

    /// Decode (or fetch from cache) the image for entry `entry_idx`.
    pub fn pixels(&self, entry_idx: usize) -> Result<Arc<PixelImage>, DatasetError> {
        if let Some(img) = self.cache.lock().unwrap().get(&entry_idx) {
            return Ok(Arc::clone(img));
        }
        let entry = &self.index.entries[entry_idx];
        let path = self.index.resolve(entry);
        let img = Arc::new(PixelImage::open(&path)?);
        self.cache
            .lock()
            .unwrap()
            .insert(entry_idx, Arc::clone(&img));
        Ok(img)
    }
}
