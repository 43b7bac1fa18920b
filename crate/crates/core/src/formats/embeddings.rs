use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{read_framed, take_f32, write_framed, FormatError};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"VLGC";

/// Row-major matrix of backbone embeddings keyed by string ids.
///
/// Values are held as `f32`, the on-disk precision; numerical code converts
/// to `f64` through [`EmbeddingMatrix::to_matrix`] or [`EmbeddingMatrix::row`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    d: usize,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self, FormatError> {
        if values.len() != ids.len() * dim {
            return Err(FormatError::DimMismatch(format!(
                "{} ids x {} dims needs {} values, got {}",
                ids.len(),
                dim,
                ids.len() * dim,
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(FormatError::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                row: pos / dim.max(1),
                col: pos % dim.max(1),
            });
        }
        Ok(EmbeddingMatrix { ids, dim, values })
    }

    /// Builds from an `n x d` f64 matrix, rounding to f32.
    pub fn from_matrix(ids: Vec<String>, m: &DMatrix<f64>) -> Result<Self, FormatError> {
        let (n, d) = m.shape();
        if ids.len() != n {
            return Err(FormatError::DimMismatch(format!(
                "{} ids for {n} rows",
                ids.len()
            )));
        }
        let mut values = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                values.push(m[(i, j)] as f32);
            }
        }
        Self::new(ids, d, values)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn row_f32(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.row_f32(i).iter().map(|&v| v as f64))
    }

    /// `n x d` matrix in f64.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.len(), self.dim, self.values.iter().map(|&v| v as f64))
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), self.dim);
        for (r, &i) in rows.iter().enumerate() {
            for (j, &v) in self.row_f32(i).iter().enumerate() {
                m[(r, j)] = v as f64;
            }
        }
        m
    }

    /// Sub-matrix with the given rows, ids carried along.
    pub fn subset(&self, rows: &[usize]) -> EmbeddingMatrix {
        let ids = rows.iter().map(|&i| self.ids[i].clone()).collect();
        let values = rows
            .iter()
            .flat_map(|&i| self.row_f32(i).iter().copied())
            .collect();
        EmbeddingMatrix {
            ids,
            dim: self.dim,
            values,
        }
    }
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), FormatError> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        n: m.len(),
        d: m.dim,
        ids: m.ids.clone(),
    };
    write_framed(&mut out, &EMBEDDING_MAGIC, &header, &m.values)
        .and_then(|_| out.flush())
        .map_err(|e| FormatError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let (header, payload): (Header, _) = read_framed(&mut BufReader::new(file), &EMBEDDING_MAGIC)?;
    decode(header, &payload)
}

fn decode(header: Header, payload: &[u8]) -> Result<EmbeddingMatrix, FormatError> {
    if header.ids.len() != header.n {
        return Err(FormatError::DimMismatch(format!(
            "header declares n={} but lists {} ids",
            header.n,
            header.ids.len()
        )));
    }
    let mut offset = 0;
    let values = take_f32(payload, &mut offset, header.n * header.d)?;
    if offset != payload.len() {
        return Err(FormatError::DimMismatch(format!(
            "{} trailing payload bytes after {}x{} matrix",
            payload.len() - offset,
            header.n,
            header.d
        )));
    }
    EmbeddingMatrix::new(header.ids, header.d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::FORMAT_VERSION;

    fn raw_file(header: &str, floats: &[f32]) -> Vec<u8> {
        let mut bytes = EMBEDDING_MAGIC.to_vec();
        bytes.push(FORMAT_VERSION);
        bytes.extend_from_slice(header.as_bytes());
        bytes.push(b'\n');
        for f in floats {
            bytes.extend_from_slice(&f.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn two_by_three_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let m = EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            3,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        write_embeddings(&m, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.row(1).as_slice(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn empty_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let m = EmbeddingMatrix::new(vec![], 8, vec![]).unwrap();
        write_embeddings(&m, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn short_rows_are_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let bytes = raw_file(r#"{"n":2,"d":4,"ids":["a","b"]}"#, &[0.0; 6]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(FormatError::TruncatedPayload {
                expected: 32,
                found: 24
            })
        ));
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");

        let mut bytes = raw_file(r#"{"n":1,"d":1,"ids":["a"]}"#, &[1.0]);
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(FormatError::BadMagic { .. })
        ));

        std::fs::write(&path, raw_file(r#"{"n":2,"d":1,"ids":["a"]}"#, &[1.0, 2.0])).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(FormatError::DimMismatch(_))
        ));

        std::fs::write(&path, raw_file(r#"{"n":1,"d":1,"ids":["a"]}"#, &[1.0, 2.0])).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(FormatError::DimMismatch(_))
        ));

        std::fs::write(
            &path,
            raw_file(r#"{"n":2,"d":1,"ids":["a","a"]}"#, &[1.0, 2.0]),
        )
        .unwrap();
        assert!(matches!(read_embeddings(&path), Err(FormatError::DuplicateId(id)) if id == "a"));

        std::fs::write(
            &path,
            raw_file(r#"{"n":1,"d":2,"ids":["a"]}"#, &[1.0, f32::NAN]),
        )
        .unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(FormatError::NonFinite { row: 0, col: 1 })
        ));

        let mut bytes = raw_file(r#"{"n":1,"d":1,"ids":["a"]}"#, &[1.0]);
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(FormatError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let m = EmbeddingMatrix::new(vec![], 1, vec![]).unwrap();
        let err = write_embeddings(&m, Path::new("/nonexistent-dir/x/e.bin")).unwrap_err();
        assert!(matches!(err, FormatError::Io { .. }));
    }
}
