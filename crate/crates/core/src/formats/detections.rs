use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FormatError;

/// A grounded detection: pixel box, detector confidence and the concept
/// phrase the detector was prompted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub coords: [f64; 4],
    pub confidence: f64,
    pub concept: String,
}

impl BoundingBox {
    /// Returns the offending field name and a message on violation.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let [x0, y0, x1, y1] = self.coords;
        if self.coords.iter().any(|c| !c.is_finite()) {
            return Err(("coords", "non-finite coordinate".into()));
        }
        if x0 >= x1 {
            return Err(("coords", format!("x_min {x0} >= x_max {x1}")));
        }
        if y0 >= y1 {
            return Err(("coords", format!("y_min {y0} >= y_max {y1}")));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(("confidence", format!("{} outside [0, 1]", self.confidence)));
        }
        if self.concept.is_empty() {
            return Err(("concept", "empty concept string".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_label: usize,
    pub boxes: Vec<BoundingBox>,
}

pub fn write_detections(records: &[DetectionRecord], path: &Path) -> Result<(), FormatError> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("detection records always serialize");
        writeln!(out, "{line}").map_err(|e| FormatError::io(path, e))?;
    }
    out.flush().map_err(|e| FormatError::io(path, e))
}

/// Reads one JSON record per line. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| FormatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| FormatError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        if record.image_id.is_empty() {
            return Err(FormatError::Invariant {
                line: line_no,
                field: "image_id".into(),
                message: "empty image id".into(),
            });
        }
        for (b, bx) in record.boxes.iter().enumerate() {
            bx.check()
                .map_err(|(field, message)| FormatError::Invariant {
                    line: line_no,
                    field: format!("boxes[{b}].{field}"),
                    message,
                })?;
        }
        records.push(record);
    }
    Ok(records)
}
