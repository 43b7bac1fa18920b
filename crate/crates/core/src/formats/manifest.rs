use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::FormatError;
use crate::dataset::AugmentationRecord;

/// A file referenced by path together with its SHA-256 at write time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self, FormatError> {
        Ok(FileRef {
            path: path.to_path_buf(),
            sha256: super::file_hash(path)?,
        })
    }

    /// Errors when the file on disk no longer matches the recorded hash.
    pub fn verify(&self) -> Result<(), FormatError> {
        let actual = super::file_hash(&self.path)?;
        if actual != self.sha256 {
            return Err(FormatError::MalformedHeader(format!(
                "{} changed since the manifest was written (sha256 {} != {})",
                self.path.display(),
                actual,
                self.sha256
            )));
        }
        Ok(())
    }
}

/// Serialized auxiliary dataset. Concept labels are stored one bit string
/// per image (`'1'` = concept present), aligned with `image_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub embeddings: FileRef,
    pub crop_embeddings: Option<FileRef>,
    pub threshold: f64,
    pub seed: u64,
    pub concept_set: Vec<String>,
    pub image_ids: Vec<String>,
    pub class_labels: Vec<usize>,
    pub concept_labels: Vec<String>,
    pub augmentations: Vec<AugmentationRecord>,
}

impl DatasetManifest {
    fn validate(&self) -> Result<(), FormatError> {
        let n = self.image_ids.len();
        if self.class_labels.len() != n || self.concept_labels.len() != n {
            return Err(FormatError::DimMismatch(format!(
                "{} images but {} class labels and {} concept labels",
                n,
                self.class_labels.len(),
                self.concept_labels.len()
            )));
        }
        let k = self.concept_set.len();
        for (i, bits) in self.concept_labels.iter().enumerate() {
            if bits.len() != k || bits.bytes().any(|b| b != b'0' && b != b'1') {
                return Err(FormatError::Invariant {
                    line: i + 1,
                    field: "concept_labels".into(),
                    message: format!("expected {k} binary digits, got {bits:?}"),
                });
            }
        }
        if let Some(a) = self.augmentations.iter().find(|a| a.concept_index >= k) {
            return Err(FormatError::Invariant {
                line: 0,
                field: "augmentations".into(),
                message: format!("concept index {} out of range", a.concept_index),
            });
        }
        Ok(())
    }
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), FormatError> {
    m.validate()?;
    let mut text = serde_json::to_string_pretty(m).expect("manifest always serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| FormatError::MalformedRecord {
            line: e.line(),
            message: e.to_string(),
        })?;
    m.validate()?;
    Ok(m)
}
