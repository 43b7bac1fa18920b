use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{read_framed, take_f32, write_framed, FormatError};
use crate::cbl::ConceptBottleneck;
use crate::sparse_final::SparseFinalLayer;

pub const BUNDLE_MAGIC: [u8; 4] = *b"CBMB";

/// Metadata line of a model bundle. `classes` is absent for a bundle that
/// only carries a trained bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub k: usize,
    pub d: usize,
    pub classes: Option<usize>,
    pub concepts: Vec<String>,
    pub cbl_bias: bool,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    pub lambda: Option<f64>,
    pub alpha_mix: Option<f64>,
    pub nec: Option<f64>,
    pub config_hash: String,
}

/// Serialized concept bottleneck plus an optional sparse final layer.
///
/// Payload order after the header: `W_c` (k x d, row-major), the bottleneck
/// bias (k, when `cbl_bias`), `W_F` (C x k, row-major) and `b_F` (C), the
/// last two only when `classes` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub header: BundleHeader,
    pub cbl_weights: Vec<f32>,
    pub cbl_bias: Option<Vec<f32>>,
    pub final_weights: Option<Vec<f32>>,
    pub final_bias: Option<Vec<f32>>,
}

fn to_f32_rows(m: &DMatrix<f64>) -> Vec<f32> {
    let (r, c) = m.shape();
    (0..r)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)] as f32)
        .collect()
}

fn from_f32_rows(rows: usize, cols: usize, v: &[f32]) -> DMatrix<f64> {
    DMatrix::from_row_iterator(rows, cols, v.iter().map(|&x| x as f64))
}

fn to_vec64(v: &[f32]) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| x as f64))
}

impl ModelBundle {
    pub fn from_models(
        cb: &ConceptBottleneck,
        layer: Option<&SparseFinalLayer>,
        concepts: Vec<String>,
        config_hash: String,
    ) -> Self {
        let (k, d) = cb.weights.shape();
        let header = BundleHeader {
            k,
            d,
            classes: layer.map(|l| l.weights.nrows()),
            concepts,
            cbl_bias: cb.bias.is_some(),
            norm_mean: cb.norm_mean.iter().map(|&x| x as f32).collect(),
            norm_std: cb.norm_std.iter().map(|&x| x as f32).collect(),
            lambda: layer.map(|l| l.lambda),
            alpha_mix: layer.map(|l| l.alpha_mix),
            nec: layer.map(|l| l.nec),
            config_hash,
        };
        ModelBundle {
            header,
            cbl_weights: to_f32_rows(&cb.weights),
            cbl_bias: cb
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&x| x as f32).collect()),
            final_weights: layer.map(|l| to_f32_rows(&l.weights)),
            final_bias: layer.map(|l| l.bias.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn bottleneck(&self) -> ConceptBottleneck {
        let h = &self.header;
        ConceptBottleneck {
            weights: from_f32_rows(h.k, h.d, &self.cbl_weights),
            bias: self.cbl_bias.as_deref().map(to_vec64),
            norm_mean: to_vec64(&h.norm_mean),
            norm_std: to_vec64(&h.norm_std),
        }
    }

    /// The final layer, with its NEC recomputed from the stored weights.
    pub fn final_layer(&self) -> Option<SparseFinalLayer> {
        let h = &self.header;
        let c = h.classes?;
        let weights = from_f32_rows(c, h.k, self.final_weights.as_deref()?);
        let bias = to_vec64(self.final_bias.as_deref()?);
        Some(SparseFinalLayer::new(
            weights,
            bias,
            h.lambda.unwrap_or(0.0),
            h.alpha_mix.unwrap_or(1.0),
        ))
    }

    fn validate(&self) -> Result<(), FormatError> {
        let h = &self.header;
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(FormatError::DimMismatch(format!(
                    "{what}: expected {want} values, found {got}"
                )))
            }
        };
        check("norm_mean", h.norm_mean.len(), h.k)?;
        check("norm_std", h.norm_std.len(), h.k)?;
        if !h.concepts.is_empty() {
            check("concepts", h.concepts.len(), h.k)?;
        }
        check("W_c", self.cbl_weights.len(), h.k * h.d)?;
        match (&self.cbl_bias, h.cbl_bias) {
            (Some(b), true) => check("cbl bias", b.len(), h.k)?,
            (None, false) => {}
            _ => return Err(FormatError::DimMismatch("cbl bias presence".into())),
        }
        match (h.classes, &self.final_weights, &self.final_bias) {
            (Some(c), Some(w), Some(b)) => {
                check("W_F", w.len(), c * h.k)?;
                check("b_F", b.len(), c)?;
            }
            (None, None, None) => {}
            _ => return Err(FormatError::DimMismatch("final layer presence".into())),
        }
        if let Some(i) = h.norm_std.iter().position(|&s| !(s > 0.0)) {
            return Err(FormatError::DimMismatch(format!(
                "norm_std[{i}] must be strictly positive"
            )));
        }
        Ok(())
    }
}

pub fn write_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), FormatError> {
    bundle.validate()?;
    let mut payload = bundle.cbl_weights.clone();
    if let Some(b) = &bundle.cbl_bias {
        payload.extend_from_slice(b);
    }
    if let (Some(w), Some(b)) = (&bundle.final_weights, &bundle.final_bias) {
        payload.extend_from_slice(w);
        payload.extend_from_slice(b);
    }
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_framed(&mut out, &BUNDLE_MAGIC, &bundle.header, &payload)
        .and_then(|_| out.flush())
        .map_err(|e| FormatError::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<ModelBundle, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let (header, payload): (BundleHeader, Vec<u8>) =
        read_framed(&mut BufReader::new(file), &BUNDLE_MAGIC)?;
    let mut off = 0;
    let cbl_weights = take_f32(&payload, &mut off, header.k * header.d)?;
    let cbl_bias = if header.cbl_bias {
        Some(take_f32(&payload, &mut off, header.k)?)
    } else {
        None
    };
    let (final_weights, final_bias) = match header.classes {
        Some(c) => (
            Some(take_f32(&payload, &mut off, c * header.k)?),
            Some(take_f32(&payload, &mut off, c)?),
        ),
        None => (None, None),
    };
    if off != payload.len() {
        return Err(FormatError::DimMismatch(format!(
            "{} trailing payload bytes",
            payload.len() - off
        )));
    }
    let bundle = ModelBundle {
        header,
        cbl_weights,
        cbl_bias,
        final_weights,
        final_bias,
    };
    bundle.validate()?;
    Ok(bundle)
}
