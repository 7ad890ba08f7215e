//! JSONL helpers and ground-truth ingestion.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lexicon::SynonymLexicon;
use crate::metrics::GroundTruth;

/// Reads one JSON value per non-blank line. Errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Ground truth keyed by image id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruthIndex(BTreeMap<String, GroundTruth>);

impl GroundTruthIndex {
    pub fn get(&self, image_id: &str) -> Result<&GroundTruth> {
        self.0
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn insert(&mut self, truth: GroundTruth) {
        self.0.insert(truth.image_id.clone(), truth);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GroundTruth> {
        self.0.values()
    }
}

impl FromIterator<GroundTruth> for GroundTruthIndex {
    fn from_iter<I: IntoIterator<Item = GroundTruth>>(iter: I) -> Self {
        let mut index = GroundTruthIndex::default();
        for t in iter {
            index.insert(t);
        }
        index
    }
}

/// Loads a detections file (`{"image_id", "objects"}` per line), mapping
/// object names to canonical classes. Unknown names are errors.
pub fn load_ground_truth(path: impl AsRef<Path>, lexicon: &SynonymLexicon) -> Result<GroundTruthIndex> {
    let path = path.as_ref();
    let raw: Vec<GroundTruth> = read_jsonl(path)?;
    let mut index = GroundTruthIndex::default();
    for (i, t) in raw.into_iter().enumerate() {
        let t = t.resolve(lexicon).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        index.insert(t);
    }
    Ok(index)
}
