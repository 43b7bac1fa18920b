use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{write_json, write_text, PipelineError, RunConfig, StageManifest};
use crate::cbl::{train_cbl, ConceptBottleneck};
use crate::dataset::{assemble, emit_augmentations, AuxiliaryDataset};
use crate::explain::{explain_batch, negative_reasoning_rate};
use crate::formats::{
    read_bundle, read_detections, read_embeddings, read_manifest, read_vocabulary, write_bundle,
    write_detections, write_embeddings, write_manifest, write_vocabulary, EmbeddingMatrix, FileRef,
    ModelBundle,
};
use crate::leakage::{random_cbl_baseline, run_leakage_experiment, LeakageResult, LeakageSetup};
use crate::metrics::{
    accuracy_from_logits, anec, nonzero_distribution, prediction_change_on_concepts,
};
use crate::sparse_final::{
    select_for_nec, solve_elastic_net, solve_path, SolverOptions, SparseFinalLayer,
};
use crate::synth::PlantedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    BuildDataset,
    TrainCbl,
    TrainFinal,
    EvalAnec,
    Explain,
    AuditPrune,
    VerifyTheorem,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] = [
        Stage::Synth,
        Stage::BuildDataset,
        Stage::TrainCbl,
        Stage::TrainFinal,
        Stage::EvalAnec,
        Stage::Explain,
        Stage::AuditPrune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildDataset => "build-dataset",
            Stage::TrainCbl => "train-cbl",
            Stage::TrainFinal => "train-final",
            Stage::EvalAnec => "eval-anec",
            Stage::Explain => "explain",
            Stage::AuditPrune => "audit-prune",
            Stage::VerifyTheorem => "verify-theorem",
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildDataset => "dataset",
            Stage::TrainCbl => "cbl",
            Stage::TrainFinal => "final",
            Stage::EvalAnec => "eval",
            Stage::Explain => "explain",
            Stage::AuditPrune => "audit",
            Stage::VerifyTheorem => "theorem",
        }
    }

    pub fn dir(self, cfg: &RunConfig) -> PathBuf {
        cfg.paths.output_dir.join(self.dir_name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when the recorded manifest was current and nothing ran.
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

struct Layout<'a> {
    cfg: &'a RunConfig,
}

impl Layout<'_> {
    fn dataset_manifest(&self) -> PathBuf {
        Stage::BuildDataset.dir(self.cfg).join("manifest.json")
    }
    fn cbl_bundle(&self) -> PathBuf {
        Stage::TrainCbl.dir(self.cfg).join("model.cbmb")
    }
    fn split(&self) -> PathBuf {
        Stage::TrainCbl.dir(self.cfg).join("split.json")
    }
    fn nec_bundle(&self, nec: usize) -> PathBuf {
        Stage::TrainFinal
            .dir(self.cfg)
            .join(format!("nec_{nec}.cbmb"))
    }
    fn dense_bundle(&self) -> PathBuf {
        Stage::TrainFinal.dir(self.cfg).join("dense.cbmb")
    }
    fn explain_model(&self) -> PathBuf {
        self.cfg
            .eval
            .explain_model
            .clone()
            .unwrap_or_else(|| self.nec_bundle(self.cfg.eval.explain_nec))
    }
    fn theorem_summary(&self) -> PathBuf {
        Stage::VerifyTheorem.dir(self.cfg).join("summary.json")
    }
}

/// Runs one stage, or skips it when its manifest is current and `force` is
/// off. `verify-theorem` returns an acceptance error after writing its
/// reports when a check fails.
pub fn run_stage(
    stage: Stage,
    cfg: &RunConfig,
    force: bool,
) -> Result<StageOutcome, PipelineError> {
    let dir = stage.dir(cfg);
    let inputs = stage_inputs(stage, cfg)?;
    let hash = cfg.hash();
    let outcome = match StageManifest::read(&dir) {
        Some(m) if !force && m.is_current(&hash, &inputs) => StageOutcome {
            stage,
            skipped: true,
            outputs: m.outputs.into_iter().map(|r| r.path).collect(),
            summary: "up to date".into(),
        },
        _ => {
            std::fs::create_dir_all(&dir).map_err(|e| crate::formats::FormatError::io(&dir, e))?;
            let (outputs, summary) = match stage {
                Stage::Synth => synth(cfg)?,
                Stage::BuildDataset => build_dataset(cfg)?,
                Stage::TrainCbl => train_cbl_stage(cfg)?,
                Stage::TrainFinal => train_final(cfg)?,
                Stage::EvalAnec => eval_anec(cfg)?,
                Stage::Explain => explain(cfg)?,
                Stage::AuditPrune => audit_prune(cfg)?,
                Stage::VerifyTheorem => verify_theorem(cfg)?,
            };
            StageManifest::build(stage.name(), &hash, &inputs, &outputs)?.write(&dir)?;
            StageOutcome {
                stage,
                skipped: false,
                outputs,
                summary,
            }
        }
    };
    if stage == Stage::VerifyTheorem {
        let layout = Layout { cfg };
        let text = std::fs::read_to_string(layout.theorem_summary())
            .map_err(|e| crate::formats::FormatError::io(layout.theorem_summary(), e))?;
        let summary: TheoremSummary = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Data(format!("theorem summary: {e}")))?;
        if !summary.passed {
            return Err(PipelineError::Acceptance(format!(
                "bound_holds={} multiclass_bound_holds={} exact_recovery={} strictly_decreasing={}",
                summary.bound_holds,
                summary.multiclass_bound_holds,
                summary.exact_recovery,
                summary.strictly_decreasing
            )));
        }
    }
    Ok(outcome)
}

fn require_input(path: &Path, producer: Stage) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Data(format!(
            "{} is missing; run `{}` first",
            path.display(),
            producer.name()
        )))
    }
}

fn stage_inputs(stage: Stage, cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let p = &cfg.paths;
    let layout = Layout { cfg };
    let mut inputs = Vec::new();
    let test_files = |inputs: &mut Vec<PathBuf>| -> Result<(), PipelineError> {
        inputs.push(
            RunConfig::require_optional("paths.test_embeddings", &p.test_embeddings)?.to_path_buf(),
        );
        inputs.push(
            RunConfig::require_optional("paths.test_detections", &p.test_detections)?.to_path_buf(),
        );
        Ok(())
    };
    match stage {
        Stage::Synth | Stage::VerifyTheorem => {}
        Stage::BuildDataset => {
            RunConfig::require_file("paths.embeddings", &p.embeddings)?;
            RunConfig::require_file("paths.detections", &p.detections)?;
            RunConfig::require_file("paths.vocabulary", &p.vocabulary)?;
            inputs.extend([
                p.embeddings.clone(),
                p.detections.clone(),
                p.vocabulary.clone(),
            ]);
            if let Some(c) = &p.crop_embeddings {
                RunConfig::require_file("paths.crop_embeddings", c)?;
                inputs.push(c.clone());
            }
        }
        Stage::TrainCbl => {
            require_input(&layout.dataset_manifest(), Stage::BuildDataset)?;
            inputs.push(layout.dataset_manifest());
        }
        Stage::TrainFinal => {
            require_input(&layout.dataset_manifest(), Stage::BuildDataset)?;
            require_input(&layout.cbl_bundle(), Stage::TrainCbl)?;
            inputs.extend([
                layout.dataset_manifest(),
                layout.cbl_bundle(),
                layout.split(),
            ]);
        }
        Stage::EvalAnec => {
            require_input(&layout.cbl_bundle(), Stage::TrainCbl)?;
            inputs.push(layout.cbl_bundle());
            for &level in &cfg.eval.levels {
                require_input(&layout.nec_bundle(level), Stage::TrainFinal)?;
                inputs.push(layout.nec_bundle(level));
            }
            require_input(&layout.dense_bundle(), Stage::TrainFinal)?;
            inputs.push(layout.dense_bundle());
            if cfg.eval.random_k > 0 {
                inputs.extend([layout.dataset_manifest(), layout.split()]);
            }
            test_files(&mut inputs)?;
        }
        Stage::Explain => {
            let model = layout.explain_model();
            if cfg.eval.explain_model.is_some() {
                RunConfig::require_file("eval.explain_model", &model)?;
            } else {
                require_input(&model, Stage::TrainFinal)?;
            }
            inputs.push(model);
            inputs.push(
                RunConfig::require_optional("paths.test_embeddings", &p.test_embeddings)?
                    .to_path_buf(),
            );
        }
        Stage::AuditPrune => {
            require_input(&layout.nec_bundle(cfg.eval.explain_nec), Stage::TrainFinal)?;
            require_input(&layout.dense_bundle(), Stage::TrainFinal)?;
            inputs.extend([
                layout.nec_bundle(cfg.eval.explain_nec),
                layout.dense_bundle(),
            ]);
            test_files(&mut inputs)?;
        }
    }
    Ok(inputs)
}

type StageResult = Result<(Vec<PathBuf>, String), PipelineError>;

fn synth(cfg: &RunConfig) -> StageResult {
    let p = &cfg.paths;
    let s = &cfg.synth;
    if s.n_train == 0 {
        return Err(PipelineError::config("synth.n_train", "must be positive"));
    }
    let planted = PlantedModel::new(s.planted.clone())?;
    let train = planted.generate(s.n_train, cfg.seed);
    let mut outputs = vec![
        p.embeddings.clone(),
        p.detections.clone(),
        p.vocabulary.clone(),
    ];
    for path in &outputs {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| crate::formats::FormatError::io(parent, e))?;
        }
    }
    write_embeddings(&train.embeddings, &p.embeddings)?;
    write_detections(&train.detections, &p.detections)?;
    write_vocabulary(&planted.vocabulary(), &p.vocabulary)?;
    if let Some(c) = &p.crop_embeddings {
        write_embeddings(&train.crop_embeddings, c)?;
        outputs.push(c.clone());
    }
    if let (Some(te), Some(td)) = (&p.test_embeddings, &p.test_detections) {
        if s.n_test == 0 {
            return Err(PipelineError::config(
                "synth.n_test",
                "must be positive when test paths are set",
            ));
        }
        let test = planted.generate(s.n_test, cfg.seed ^ 0x7E57_0000_0000_0001);
        write_embeddings(&test.embeddings, te)?;
        write_detections(&test.detections, td)?;
        outputs.extend([te.clone(), td.clone()]);
    }
    let truth = Stage::Synth.dir(cfg).join("planted.json");
    write_json(
        &truth,
        &serde_json::json!({
            "config": s.planted,
            "n_train": s.n_train,
            "n_test": s.n_test,
            "true_final_nonzeros": planted.true_final.iter().filter(|v| **v != 0.0).count(),
        }),
    )?;
    outputs.push(truth);
    Ok((outputs, format!("{} training images", s.n_train)))
}

fn build_dataset(cfg: &RunConfig) -> StageResult {
    let p = &cfg.paths;
    let emb = read_embeddings(&p.embeddings)?;
    let records = read_detections(&p.detections)?;
    let vocab = read_vocabulary(&p.vocabulary)?;
    let mut ds = assemble(&emb, &records, &vocab, cfg.threshold)?;
    let crop_ref = match &p.crop_embeddings {
        Some(c) => {
            ds.augmentations =
                emit_augmentations(&records, &ds.concept_set, cfg.threshold, cfg.seed);
            let crops = read_embeddings(c)?;
            if let Some(a) = ds
                .augmentations
                .iter()
                .find(|a| crops.index_of(&a.crop_embedding_id).is_none())
            {
                return Err(PipelineError::Data(format!(
                    "crop embedding {} missing from {}",
                    a.crop_embedding_id,
                    c.display()
                )));
            }
            Some(FileRef::of(c)?)
        }
        None => None,
    };
    let manifest = ds.to_manifest(FileRef::of(&p.embeddings)?, crop_ref, cfg.seed);
    let out = Layout { cfg }.dataset_manifest();
    write_manifest(&manifest, &out)?;
    let positives: usize = ds.concept_labels.iter().map(|l| l.count_ones()).sum();
    let summary_path = Stage::BuildDataset.dir(cfg).join("summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "images": ds.len(),
            "concepts": ds.num_concepts(),
            "positive_labels": positives,
            "augmentations": ds.augmentations.len(),
            "threshold": cfg.threshold,
        }),
    )?;
    Ok((
        vec![out, summary_path],
        format!("{} images, {} concepts", ds.len(), ds.num_concepts()),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct Split {
    train_rows: Vec<usize>,
    val_rows: Vec<usize>,
    pos_scale: f64,
}

fn load_dataset(
    cfg: &RunConfig,
) -> Result<(AuxiliaryDataset, Option<EmbeddingMatrix>), PipelineError> {
    let m = read_manifest(&Layout { cfg }.dataset_manifest())?;
    let ds = AuxiliaryDataset::from_manifest(&m)?;
    let crops = match &m.crop_embeddings {
        Some(r) => {
            r.verify()?;
            Some(read_embeddings(&r.path)?)
        }
        None => None,
    };
    Ok((ds, crops))
}

fn train_cbl_stage(cfg: &RunConfig) -> StageResult {
    let (ds, crops) = load_dataset(cfg)?;
    let trained = train_cbl(&ds, crops.as_ref(), &cfg.cbl)?;
    let layout = Layout { cfg };
    let dir = Stage::TrainCbl.dir(cfg);
    let bundle = ModelBundle::from_models(
        &trained.bottleneck,
        None,
        ds.concept_set.clone(),
        cfg.hash(),
    );
    write_bundle(&bundle, &layout.cbl_bundle())?;
    let mut csv = String::from("epoch,train_loss,mean_val_auc,min_val_auc");
    for name in &ds.concept_set {
        write!(csv, ",auc_{name}").expect("string write");
    }
    csv.push('\n');
    for e in &trained.log {
        let aucs: Vec<f64> = e.val_auc.iter().flatten().copied().collect();
        let (mean, min) = if aucs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                aucs.iter().sum::<f64>() / aucs.len() as f64,
                aucs.iter().copied().fold(f64::INFINITY, f64::min),
            )
        };
        write!(csv, "{},{},{},{}", e.epoch, e.train_loss, mean, min).expect("string write");
        for auc in &e.val_auc {
            match auc {
                Some(a) => write!(csv, ",{a}"),
                None => write!(csv, ","),
            }
            .expect("string write");
        }
        csv.push('\n');
    }
    let log_path = dir.join("training_log.csv");
    write_text(&log_path, &csv)?;
    write_json(
        &layout.split(),
        &Split {
            train_rows: trained.train_rows.clone(),
            val_rows: trained.val_rows.clone(),
            pos_scale: trained.pos_scale,
        },
    )?;
    let last = trained.log.last().map_or(f64::NAN, |e| e.train_loss);
    Ok((
        vec![layout.cbl_bundle(), log_path, layout.split()],
        format!("final train loss {last:.5}"),
    ))
}

fn read_split(cfg: &RunConfig) -> Result<Split, PipelineError> {
    let path = Layout { cfg }.split();
    let text =
        std::fs::read_to_string(&path).map_err(|e| crate::formats::FormatError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn labels_at(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

fn train_final(cfg: &RunConfig) -> StageResult {
    let (ds, _) = load_dataset(cfg)?;
    let layout = Layout { cfg };
    let bundle = read_bundle(&layout.cbl_bundle())?;
    let cb = bundle.bottleneck();
    let split = read_split(cfg)?;
    let x = cb.concept_logits(&ds.embeddings.to_matrix(), true)?;
    let (x_train, x_val) = (rows(&x, &split.train_rows), rows(&x, &split.val_rows));
    let (y_train, y_val) = (
        labels_at(&ds.class_labels, &split.train_rows),
        labels_at(&ds.class_labels, &split.val_rows),
    );
    let c = num_classes(&ds.class_labels);
    let pc = cfg.final_layer.path_config();
    let path = solve_path(&x_train, &y_train, &x_val, &y_val, c, &pc)?;

    let dir = Stage::TrainFinal.dir(cfg);
    let mut csv = String::from("index,lambda,nec,train_accuracy,val_accuracy\n");
    for (i, e) in path.entries.iter().enumerate() {
        writeln!(
            csv,
            "{i},{},{},{},{}",
            e.lambda, e.nec, e.train_accuracy, e.val_accuracy
        )
        .expect("string write");
    }
    let path_csv = dir.join("path.csv");
    write_text(&path_csv, &csv)?;
    let mut outputs = vec![path_csv];

    let save = |layer: &SparseFinalLayer, out: PathBuf| -> Result<PathBuf, PipelineError> {
        let b = ModelBundle::from_models(&cb, Some(layer), ds.concept_set.clone(), cfg.hash());
        write_bundle(&b, &out)?;
        Ok(out)
    };
    let mut selected = String::from("target_nec,nec,lambda,val_accuracy\n");
    for &target in &cfg.final_layer.target_necs {
        let layer = select_for_nec(&path, target as f64)?;
        let val_acc = accuracy_from_logits(&layer.logits(&x_val), &y_val);
        writeln!(
            selected,
            "{target},{},{},{val_acc}",
            layer.nec, layer.lambda
        )
        .expect("string write");
        outputs.push(save(&layer, layout.nec_bundle(target))?);
    }
    let selected_csv = dir.join("selected.csv");
    write_text(&selected_csv, &selected)?;
    outputs.push(selected_csv);

    let dense = solve_elastic_net(
        &x_train,
        &y_train,
        c,
        0.0,
        pc.alpha_mix,
        path.entries.last().map(|e| &e.layer),
        SolverOptions {
            tol: pc.tol,
            max_iter: pc.max_iter,
        },
    )?;
    outputs.push(save(&dense, layout.dense_bundle())?);
    Ok((
        outputs,
        format!(
            "{} path points, lambda_max {:.6}",
            path.entries.len(),
            path.lambda_max
        ),
    ))
}

struct TestSet {
    z: DMatrix<f64>,
    labels: Vec<usize>,
}

fn load_test(cfg: &RunConfig) -> Result<TestSet, PipelineError> {
    let p = &cfg.paths;
    let emb_path = RunConfig::require_optional("paths.test_embeddings", &p.test_embeddings)?;
    let det_path = RunConfig::require_optional("paths.test_detections", &p.test_detections)?;
    let emb = read_embeddings(emb_path)?;
    let records = read_detections(det_path)?;
    let index: HashMap<&str, usize> = emb
        .ids()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let idx = records
        .iter()
        .map(|r| {
            index.get(r.image_id.as_str()).copied().ok_or_else(|| {
                PipelineError::Data(format!("test image {} has no embedding", r.image_id))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TestSet {
        z: emb.select_rows(&idx),
        labels: records.iter().map(|r| r.class_label).collect(),
    })
}

fn load_layer(
    path: &Path,
) -> Result<(ConceptBottleneck, SparseFinalLayer, Vec<String>), PipelineError> {
    let b = read_bundle(path)?;
    let layer = b
        .final_layer()
        .ok_or_else(|| PipelineError::Data(format!("{} has no final layer", path.display())))?;
    Ok((b.bottleneck(), layer, b.header.concepts.clone()))
}

#[derive(Debug, Serialize)]
struct AnecJson {
    levels: Vec<usize>,
    accuracy: Vec<f64>,
    nec: Vec<f64>,
    anec5: Option<f64>,
    anec_avg: f64,
    dense_accuracy: f64,
    test_size: usize,
    random: Option<RandomJson>,
}

#[derive(Debug, Serialize)]
struct RandomJson {
    k: usize,
    accuracy: Vec<f64>,
    anec5: Option<f64>,
    anec_avg: f64,
}

fn eval_anec(cfg: &RunConfig) -> StageResult {
    let layout = Layout { cfg };
    let test = load_test(cfg)?;
    let cb = read_bundle(&layout.cbl_bundle())?.bottleneck();
    let concepts = cb.concept_logits(&test.z, true)?;
    let levels = &cfg.eval.levels;
    let mut accuracy = Vec::with_capacity(levels.len());
    let mut necs = Vec::with_capacity(levels.len());
    for &level in levels {
        let (_, layer, _) = load_layer(&layout.nec_bundle(level))?;
        accuracy.push(accuracy_from_logits(&layer.logits(&concepts), &test.labels));
        necs.push(layer.nec);
    }
    let (_, dense, _) = load_layer(&layout.dense_bundle())?;
    let dense_accuracy = accuracy_from_logits(&dense.logits(&concepts), &test.labels);
    let avg = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let at5 = |v: &[f64]| levels.iter().position(|&l| l == 5).map(|i| v[i]);

    let random = if cfg.eval.random_k > 0 {
        let (ds, _) = load_dataset(cfg)?;
        let split = read_split(cfg)?;
        let z = ds.embeddings.to_matrix();
        let c = num_classes(&ds.class_labels);
        let baseline = random_cbl_baseline(
            &rows(&z, &split.train_rows),
            &labels_at(&ds.class_labels, &split.train_rows),
            &rows(&z, &split.val_rows),
            &labels_at(&ds.class_labels, &split.val_rows),
            c,
            cfg.eval.random_k,
            cfg.seed ^ 0x0BAD_5EED,
            &cfg.final_layer.path_config(),
        )?;
        let report = anec(
            &baseline.path,
            &baseline.bottleneck,
            &test.z,
            &test.labels,
            levels,
        )?;
        let acc: Vec<f64> = levels.iter().map(|l| report.per_nec[l]).collect();
        Some(RandomJson {
            k: cfg.eval.random_k,
            anec5: at5(&acc),
            anec_avg: avg(&acc),
            accuracy: acc,
        })
    } else {
        None
    };

    let mut csv = String::from("nec_level,nec,accuracy");
    if random.is_some() {
        csv.push_str(",random_accuracy");
    }
    csv.push('\n');
    for (i, level) in levels.iter().enumerate() {
        write!(csv, "{level},{},{}", necs[i], accuracy[i]).expect("string write");
        if let Some(r) = &random {
            write!(csv, ",{}", r.accuracy[i]).expect("string write");
        }
        csv.push('\n');
    }
    writeln!(csv, "dense,{},{dense_accuracy}", dense.nec).expect("string write");
    let dir = Stage::EvalAnec.dir(cfg);
    let csv_path = dir.join("anec.csv");
    write_text(&csv_path, &csv)?;
    let report = AnecJson {
        levels: levels.clone(),
        anec5: at5(&accuracy),
        anec_avg: avg(&accuracy),
        accuracy,
        nec: necs,
        dense_accuracy,
        test_size: test.labels.len(),
        random,
    };
    let json_path = dir.join("anec.json");
    write_json(&json_path, &report)?;
    Ok((
        vec![csv_path, json_path],
        format!(
            "ANEC-5 {} ANEC-avg {:.4} dense {:.4}",
            report.anec5.map_or("n/a".into(), |v| format!("{v:.4}")),
            report.anec_avg,
            report.dense_accuracy
        ),
    ))
}

fn explain(cfg: &RunConfig) -> StageResult {
    let layout = Layout { cfg };
    let emb_path =
        RunConfig::require_optional("paths.test_embeddings", &cfg.paths.test_embeddings)?;
    let emb = read_embeddings(emb_path)?;
    let (ids, rows_idx): (Vec<String>, Vec<usize>) = if cfg.eval.explain_ids.is_empty() {
        (emb.ids().to_vec(), (0..emb.len()).collect())
    } else {
        let idx = cfg
            .eval
            .explain_ids
            .iter()
            .map(|id| {
                emb.index_of(id).ok_or_else(|| {
                    PipelineError::config(
                        "eval.explain_ids",
                        format!("{id} not in {}", emb_path.display()),
                    )
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        (cfg.eval.explain_ids.clone(), idx)
    };
    let (cb, layer, names) = load_layer(&layout.explain_model())?;
    let concepts = cb.concept_logits(&emb.select_rows(&rows_idx), true)?;
    let explanations = explain_batch(&layer, &concepts, &names, &ids, cfg.eval.top_n)?;
    let mut jsonl = String::new();
    let mut csv = String::from(
        "sample_id,predicted_class,rank,concept_index,concept,concept_logit,contribution\n",
    );
    for e in &explanations {
        jsonl.push_str(&serde_json::to_string(e).expect("explanation serializes"));
        jsonl.push('\n');
        for (rank, entry) in e.entries.iter().enumerate() {
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                e.sample_id,
                e.predicted_class,
                rank + 1,
                entry.concept_index,
                entry.concept,
                entry.concept_logit,
                entry.contribution
            )
            .expect("string write");
        }
    }
    let dir = Stage::Explain.dir(cfg);
    let jsonl_path = dir.join("explanations.jsonl");
    let csv_path = dir.join("contributions.csv");
    write_text(&jsonl_path, &jsonl)?;
    write_text(&csv_path, &csv)?;
    let rate = negative_reasoning_rate(&explanations);
    let summary_path = dir.join("summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "samples": explanations.len(),
            "nec": layer.nec,
            "top_n": cfg.eval.top_n,
            "negative_reasoning_rate": rate,
        }),
    )?;
    Ok((
        vec![jsonl_path, csv_path, summary_path],
        format!(
            "{} explanations, negative rate {rate:.4}",
            explanations.len()
        ),
    ))
}

fn audit_prune(cfg: &RunConfig) -> StageResult {
    let layout = Layout { cfg };
    let test = load_test(cfg)?;
    let (cb, sparse, _) = load_layer(&layout.nec_bundle(cfg.eval.explain_nec))?;
    let (_, dense, _) = load_layer(&layout.dense_bundle())?;
    let concepts = cb.concept_logits(&test.z, true)?;
    let top_n = cfg.eval.top_n;
    let sparse_change = prediction_change_on_concepts(&sparse, &concepts, top_n);
    let dense_change = prediction_change_on_concepts(&dense, &concepts, top_n);
    let mut csv = String::from("model,nonzeros,classes\n");
    for (name, layer) in [("sparse", &sparse), ("dense", &dense)] {
        for (count, classes) in nonzero_distribution(layer).histogram {
            writeln!(csv, "{name},{count},{classes}").expect("string write");
        }
    }
    let dir = Stage::AuditPrune.dir(cfg);
    let hist_path = dir.join("nonzero_histogram.csv");
    write_text(&hist_path, &csv)?;
    let audit_path = dir.join("audit.json");
    write_json(
        &audit_path,
        &serde_json::json!({
            "top_n": top_n,
            "sparse_nec": sparse.nec,
            "sparse_change": sparse_change,
            "dense_nec": dense.nec,
            "dense_change": dense_change,
        }),
    )?;
    Ok((
        vec![hist_path, audit_path],
        format!("prediction change sparse {sparse_change:.4} dense {dense_change:.4}"),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct TheoremSummary {
    d: usize,
    trials: usize,
    lambda_max: f64,
    bound_holds: bool,
    multiclass_bound_holds: bool,
    exact_recovery: bool,
    strictly_decreasing: bool,
    passed: bool,
}

fn theorem_csv(result: &LeakageResult) -> String {
    let mut csv = String::from("k,mean_error,std_error,bound\n");
    for r in &result.per_k {
        writeln!(csv, "{},{},{},{}", r.k, r.mean_error, r.std_error, r.bound)
            .expect("string write");
    }
    csv
}

/// Summed mean error within the summed per-row bound for every `k < d`;
/// exact recovery (relative to `λ_max Σ‖w_i‖²`) for `k ≥ d`.
pub fn multiclass_holds(result: &LeakageResult, d: usize) -> bool {
    result.per_k.iter().all(|r| {
        if r.k < d {
            r.mean_error <= r.bound
        } else {
            r.mean_error <= crate::leakage::EXACT_RECOVERY_TOL * result.scale
        }
    })
}

fn verify_theorem(cfg: &RunConfig) -> StageResult {
    let t = &cfg.theorem;
    let single = LeakageSetup::random(t.d, 1, t.k_grid.clone(), t.trials, cfg.seed);
    let single_result = run_leakage_experiment(&single)?;
    let check = single_result.check(t.d);

    let multi = LeakageSetup::random(
        t.d,
        t.outputs,
        t.k_grid.clone(),
        t.trials,
        cfg.seed ^ 0x00C0_4011,
    );
    let multi_result = run_leakage_experiment(&multi)?;
    let multi_holds = multiclass_holds(&multi_result, t.d);

    let dir = Stage::VerifyTheorem.dir(cfg);
    let csv_path = dir.join("theorem.csv");
    write_text(&csv_path, &theorem_csv(&single_result))?;
    let multi_path = dir.join("multiclass.csv");
    write_text(&multi_path, &theorem_csv(&multi_result))?;
    let summary = TheoremSummary {
        d: t.d,
        trials: t.trials,
        lambda_max: single_result.lambda_max,
        bound_holds: check.bound_holds,
        multiclass_bound_holds: multi_holds,
        exact_recovery: check.exact_recovery,
        strictly_decreasing: check.strictly_decreasing,
        passed: check.passed() && multi_holds,
    };
    let summary_path = Layout { cfg }.theorem_summary();
    write_json(&summary_path, &summary)?;
    Ok((
        vec![csv_path, multi_path, summary_path],
        format!(
            "{} k values, lambda_max {:.4}",
            t.k_grid.len(),
            summary.lambda_max
        ),
    ))
}
