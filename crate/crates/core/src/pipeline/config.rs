use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cbl::CblTrainConfig;
use crate::metrics::DEFAULT_NEC_LEVELS;
use crate::sparse_final::PathConfig;
use crate::synth::PlantedConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    pub embeddings: PathBuf,
    pub detections: PathBuf,
    pub vocabulary: PathBuf,
    pub crop_embeddings: Option<PathBuf>,
    pub test_embeddings: Option<PathBuf>,
    pub test_detections: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathSettings {
    fn default() -> Self {
        let fixture = Path::new("fixture");
        PathSettings {
            embeddings: fixture.join("embeddings.vlgc"),
            detections: fixture.join("detections.jsonl"),
            vocabulary: fixture.join("vocabulary.jsonl"),
            crop_embeddings: Some(fixture.join("crops.vlgc")),
            test_embeddings: Some(fixture.join("test_embeddings.vlgc")),
            test_detections: Some(fixture.join("test_detections.jsonl")),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalSettings {
    pub alpha_mix: f64,
    pub path_points: usize,
    pub min_ratio: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// One bundle is written per target.
    pub target_necs: Vec<usize>,
}

impl Default for FinalSettings {
    fn default() -> Self {
        let p = PathConfig::default();
        FinalSettings {
            alpha_mix: p.alpha_mix,
            path_points: p.num_points,
            min_ratio: p.min_ratio,
            tol: p.tol,
            max_iter: p.max_iter,
            target_necs: DEFAULT_NEC_LEVELS.to_vec(),
        }
    }
}

impl FinalSettings {
    pub fn path_config(&self) -> PathConfig {
        PathConfig {
            alpha_mix: self.alpha_mix,
            num_points: self.path_points,
            min_ratio: self.min_ratio,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub levels: Vec<usize>,
    /// Width of the random bottleneck baseline; 0 skips it.
    pub random_k: usize,
    /// NEC of the model that `explain` and `audit-prune` inspect.
    pub explain_nec: usize,
    /// Bundle to explain instead of the `explain_nec` one.
    pub explain_model: Option<PathBuf>,
    /// Rows to explain; empty means all.
    pub explain_ids: Vec<String>,
    pub top_n: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            levels: DEFAULT_NEC_LEVELS.to_vec(),
            random_k: 0,
            explain_nec: 5,
            explain_model: None,
            explain_ids: Vec::new(),
            top_n: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub planted: PlantedConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            planted: PlantedConfig::default(),
            n_train: 2000,
            n_test: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSettings {
    pub d: usize,
    pub trials: usize,
    pub k_grid: Vec<usize>,
    /// Rows of the multi-output check.
    pub outputs: usize,
}

impl Default for TheoremSettings {
    fn default() -> Self {
        TheoremSettings {
            d: 64,
            trials: 1000,
            k_grid: vec![1, 8, 16, 32, 48, 63, 64, 80],
            outputs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathSettings,
    /// Detection confidence threshold; boxes need `confidence > threshold`.
    pub threshold: f64,
    pub seed: u64,
    pub cbl: CblTrainConfig,
    #[serde(rename = "final")]
    pub final_layer: FinalSettings,
    pub eval: EvalSettings,
    pub synth: SynthSettings,
    pub theorem: TheoremSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathSettings::default(),
            threshold: 0.15,
            seed: 0,
            cbl: CblTrainConfig::default(),
            final_layer: FinalSettings::default(),
            eval: EvalSettings::default(),
            synth: SynthSettings::default(),
            theorem: TheoremSettings::default(),
        }
    }
}

impl RunConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::formats::content_hash(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Range checks that do not depend on the stage.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |f: &str, m: String| PipelineError::config(f, m);
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(err(
                "threshold",
                format!("{} not in [0, 1]", self.threshold),
            ));
        }
        self.cbl.validate()?;
        let f = &self.final_layer;
        if !(f.alpha_mix > 0.0 && f.alpha_mix <= 1.0) {
            return Err(err(
                "final.alpha_mix",
                format!("{} not in (0, 1]", f.alpha_mix),
            ));
        }
        if f.path_points == 0 {
            return Err(err("final.path_points", "must be positive".into()));
        }
        if !(f.min_ratio > 0.0 && f.min_ratio < 1.0) {
            return Err(err(
                "final.min_ratio",
                format!("{} not in (0, 1)", f.min_ratio),
            ));
        }
        if f.target_necs.contains(&0) {
            return Err(err("final.target_necs", "targets must be positive".into()));
        }
        for &level in &self.eval.levels {
            if !f.target_necs.contains(&level) {
                return Err(err(
                    "eval.levels",
                    format!("level {level} is not among final.target_necs"),
                ));
            }
        }
        if !f.target_necs.contains(&self.eval.explain_nec) {
            return Err(err(
                "eval.explain_nec",
                format!("{} is not among final.target_necs", self.eval.explain_nec),
            ));
        }
        if self.eval.top_n == 0 {
            return Err(err("eval.top_n", "must be positive".into()));
        }
        if self.theorem.d == 0 || self.theorem.trials == 0 || self.theorem.outputs == 0 {
            return Err(err(
                "theorem",
                "d, trials and outputs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn require_file(field: &str, path: &Path) -> Result<(), PipelineError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(PipelineError::config(
                field,
                format!("{} does not exist", path.display()),
            ))
        }
    }

    pub fn require_optional<'a>(
        field: &str,
        path: &'a Option<PathBuf>,
    ) -> Result<&'a Path, PipelineError> {
        let p = path
            .as_deref()
            .ok_or_else(|| PipelineError::config(field, "not set"))?;
        Self::require_file(field, p)?;
        Ok(p)
    }
}

/// Sets a dotted key (`cbl.learning_rate`) in a parsed TOML table. The value
/// is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        PipelineError::config(assignment, "override must look like key.path=value")
    })?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| PipelineError::config(key, "empty override key"))?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::config(key, format!("`{part}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Reads the config file (when given), applies overrides and validates.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, PipelineError> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| PipelineError::config("--config", format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| PipelineError::config(p.display().to_string(), e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| {
            PipelineError::config("config", e.to_string().trim().to_string())
        })?;
    cfg.validate()?;
    Ok(cfg)
}
