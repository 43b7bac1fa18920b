//! On-disk artifacts: embedding matrices, detections, vocabularies, model
//! bundles and the auxiliary-dataset manifest.
//!
//! Binary layouts share one framing: a 4-byte magic, a 1-byte version, a
//! single JSON header line terminated by `\n`, then a little-endian `f32`
//! payload. Line-oriented formats are JSON Lines so errors can name a line.

mod bundle;
mod detections;
mod embeddings;
mod manifest;
mod vocabulary;

use std::io::{self, BufRead, Write};
use std::path::PathBuf;

pub use bundle::{read_bundle, write_bundle, BundleHeader, ModelBundle, BUNDLE_MAGIC};
pub use detections::{read_detections, write_detections, BoundingBox, DetectionRecord};
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingMatrix, EMBEDDING_MAGIC};
pub use manifest::{read_manifest, write_manifest, DatasetManifest, FileRef};
pub use vocabulary::{read_vocabulary, write_vocabulary, ConceptVocabulary};

pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: invalid field `{field}`: {message}")]
    Invariant {
        line: usize,
        field: String,
        message: String,
    },
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn write_framed<W: Write, H: serde::Serialize>(
    out: &mut W,
    magic: &[u8; 4],
    header: &H,
    payload: &[f32],
) -> io::Result<()> {
    out.write_all(magic)?;
    out.write_all(&[FORMAT_VERSION])?;
    let line = serde_json::to_string(header).map_err(io::Error::other)?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Reads magic, version and header line; returns the parsed header and the
/// raw payload bytes that follow it.
pub(crate) fn read_framed<R: BufRead, H: serde::de::DeserializeOwned>(
    input: &mut R,
    magic: &[u8; 4],
) -> Result<(H, Vec<u8>), FormatError> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        let n = input
            .read(&mut head[got..])
            .map_err(|e| FormatError::io("<stream>", e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got < 4 || &head[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: *magic,
            found: head[..got.min(4)].to_vec(),
        });
    }
    if got < 5 {
        return Err(FormatError::MalformedHeader("missing version byte".into()));
    }
    if head[4] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(head[4]));
    }
    let mut line = Vec::new();
    input
        .read_until(b'\n', &mut line)
        .map_err(|e| FormatError::io("<stream>", e))?;
    if line.last() != Some(&b'\n') {
        return Err(FormatError::MalformedHeader(
            "header line is not newline-terminated".into(),
        ));
    }
    line.pop();
    let header: H =
        serde_json::from_slice(&line).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let mut payload = Vec::new();
    input
        .read_to_end(&mut payload)
        .map_err(|e| FormatError::io("<stream>", e))?;
    Ok((header, payload))
}

/// Decodes exactly `count` little-endian floats from `bytes[*offset..]`.
pub(crate) fn take_f32(
    bytes: &[u8],
    offset: &mut usize,
    count: usize,
) -> Result<Vec<f32>, FormatError> {
    let need = count * 4;
    let available = bytes.len().saturating_sub(*offset);
    if available < need {
        return Err(FormatError::TruncatedPayload {
            expected: *offset + need,
            found: bytes.len(),
        });
    }
    let out = bytes[*offset..*offset + need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *offset += need;
    Ok(out)
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn file_hash(path: &std::path::Path) -> Result<String, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    Ok(content_hash(&bytes))
}
