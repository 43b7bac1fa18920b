use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FormatError;

/// Candidate concepts and, per class, the indices of the concepts the
/// detector was prompted with for images of that class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptVocabulary {
    pub concepts: Vec<String>,
    pub class_candidates: BTreeMap<usize, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Concept {
        name: String,
    },
    Class {
        class: usize,
        candidates: Vec<usize>,
    },
}

impl ConceptVocabulary {
    pub fn new(
        concepts: Vec<String>,
        class_candidates: BTreeMap<usize, Vec<usize>>,
    ) -> Result<Self, FormatError> {
        let v = ConceptVocabulary {
            concepts,
            class_candidates,
        };
        v.validate()?;
        Ok(v)
    }

    /// Vocabulary where every class sees every concept.
    pub fn uniform(concepts: Vec<String>, num_classes: usize) -> Self {
        let all: Vec<usize> = (0..concepts.len()).collect();
        ConceptVocabulary {
            class_candidates: (0..num_classes).map(|c| (c, all.clone())).collect(),
            concepts,
        }
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == concept)
    }

    fn validate(&self) -> Result<(), FormatError> {
        let mut seen = HashSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            if c.is_empty() {
                return Err(FormatError::Invariant {
                    line: i + 1,
                    field: "name".into(),
                    message: "empty concept".into(),
                });
            }
            if !seen.insert(c.as_str()) {
                return Err(FormatError::DuplicateId(c.clone()));
            }
        }
        for (class, cands) in &self.class_candidates {
            if let Some(bad) = cands.iter().find(|&&j| j >= self.concepts.len()) {
                return Err(FormatError::Invariant {
                    line: 0,
                    field: format!("class {class} candidates"),
                    message: format!(
                        "index {bad} out of range for {} concepts",
                        self.concepts.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Concept lines first (in index order), then one line per class.
pub fn write_vocabulary(v: &ConceptVocabulary, path: &Path) -> Result<(), FormatError> {
    let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let lines = v
        .concepts
        .iter()
        .map(|name| Line::Concept { name: name.clone() })
        .chain(v.class_candidates.iter().map(|(&class, c)| Line::Class {
            class,
            candidates: c.clone(),
        }));
    for line in lines {
        let s = serde_json::to_string(&line).expect("vocabulary lines always serialize");
        writeln!(out, "{s}").map_err(|e| FormatError::io(path, e))?;
    }
    out.flush().map_err(|e| FormatError::io(path, e))
}

pub fn read_vocabulary(path: &Path) -> Result<ConceptVocabulary, FormatError> {
    let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut concepts = Vec::new();
    let mut class_candidates = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| FormatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| FormatError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        match parsed {
            Line::Concept { name } => concepts.push(name),
            Line::Class { class, candidates } => {
                if class_candidates.insert(class, candidates).is_some() {
                    return Err(FormatError::Invariant {
                        line: line_no,
                        field: "class".into(),
                        message: format!("class {class} listed twice"),
                    });
                }
            }
        }
    }
    ConceptVocabulary::new(concepts, class_candidates)
}
