//! Concept bottleneck models over frozen embeddings: dataset assembly from
//! detector output, concept-layer training, sparse final layers along an
//! elastic-net path, evaluation, explanations and an information-leakage
//! analysis for random bottlenecks.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbl;
pub mod dataset;
pub mod explain;
pub mod formats;
pub mod leakage;
pub mod metrics;
pub mod pipeline;
pub mod sparse_final;
pub mod synth;

pub use cbl::{train_cbl, CblTrainConfig, ConceptBottleneck, TrainedCbl};
pub use dataset::{AuxiliaryDataset, ConceptLabel};
pub use formats::{EmbeddingMatrix, FormatError, ModelBundle};
pub use sparse_final::{solve_elastic_net, solve_path, PathConfig, SparseFinalLayer};
