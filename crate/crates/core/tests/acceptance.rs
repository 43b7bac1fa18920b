//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cbmkit::cbl::{bce_multilabel_loss, bce_weight_gradient, fit_normalization, ConceptBottleneck};
use cbmkit::dataset::{crop_id, AugmentationRecord, ConceptLabel};
use cbmkit::explain::explain_concepts;
use cbmkit::formats::{
    read_bundle, read_detections, read_embeddings, read_manifest, read_vocabulary, write_bundle,
    write_detections, write_embeddings, write_manifest, write_vocabulary, BoundingBox,
    ConceptVocabulary, DatasetManifest, DetectionRecord, EmbeddingMatrix, FileRef, FormatError,
    ModelBundle,
};
use cbmkit::leakage::{gaussian_matrix, gaussian_vector, run_leakage_experiment, LeakageSetup};
use cbmkit::metrics::{prediction_change_on_concepts, roc_auc};
use cbmkit::pipeline::{load_config, multiclass_holds, run_stage, RunConfig, Stage};
use cbmkit::sparse_final::{
    ce_gradient, compute_lambda_max, cross_entropy, kkt_residual, nec, objective, prune_to_nec,
    solve_elastic_net, solve_path, PathConfig, SolverOptions, SparseFinalLayer,
};
use cbmkit::synth::oracles::{
    brute_force_nec, coordinate_descent_oracle, finite_difference, naive_matvec,
};
use cbmkit::synth::PlantedModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const THEOREM_K: [usize; 8] = [1, 8, 16, 32, 48, 63, 64, 80];

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let setup = LeakageSetup::random(64, 1, THEOREM_K.to_vec(), 1000, 2024);
    let result = run_leakage_experiment(&setup).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let check = result.check(64);
    let w2 = setup.w_rows[0].norm_squared();
    for r in &result.per_k {
        if r.k < 64 {
            let bound = result.lambda_max * (1.0 - r.k as f64 / 64.0) * w2;
            ensure(r.mean_error <= bound * 1.02, || {
                format!(
                    "k={} mean {:.4} above 1.02 x bound {:.4}",
                    r.k, r.mean_error, bound
                )
            })?;
        } else {
            ensure(r.mean_error <= 1e-8 * result.lambda_max * w2, || {
                format!("k={} mean {:e} not exact", r.k, r.mean_error)
            })?;
        }
    }
    ensure(check.exact_recovery, || {
        format!(
            "worst k>=d trial error {:e}",
            result.exact_recovery_max_error
        )
    })?;
    let below: Vec<f64> = result
        .per_k
        .iter()
        .filter(|r| r.k < 64)
        .map(|r| r.mean_error)
        .collect();
    ensure(below.windows(2).all(|p| p[1] < p[0]), || {
        format!("not decreasing: {below:?}")
    })?;
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "mean/bound at k=1: {:.3}, k=32: {:.3}, k=63: {:.3}; {:.1}s",
        result.per_k[0].mean_error / result.per_k[0].bound,
        result.per_k[3].mean_error / result.per_k[3].bound,
        result.per_k[5].mean_error / result.per_k[5].bound,
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let setup = LeakageSetup::random(64, 3, THEOREM_K.to_vec(), 1000, 99);
    let result = run_leakage_experiment(&setup).map_err(|e| e.to_string())?;
    let lmax = setup.cov.lambda_max();
    for r in &result.per_k {
        let summed: f64 = setup
            .w_rows
            .iter()
            .map(|w| {
                if r.k >= 64 {
                    0.0
                } else {
                    lmax * (1.0 - r.k as f64 / 64.0) * w.norm_squared()
                }
            })
            .sum();
        let allowed = if r.k >= 64 {
            1e-8 * result.scale
        } else {
            summed
        };
        ensure(r.mean_error <= allowed, || {
            format!(
                "k={} summed error {:.4} > summed bound {:.4}",
                r.k, r.mean_error, summed
            )
        })?;
    }
    ensure(multiclass_holds(&result, 64), || {
        "library check disagrees".into()
    })?;
    let worst = result
        .per_k
        .iter()
        .filter(|r| r.k < 64)
        .map(|r| r.mean_error / r.bound)
        .fold(0.0, f64::max);
    Ok(format!(
        "C=3, 8 k values, worst summed error/bound {worst:.3}"
    ))
}

struct Instance {
    x: DMatrix<f64>,
    y: Vec<usize>,
    classes: usize,
    alpha: f64,
}

fn random_instances(count: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(20..=40);
            let k = rng.random_range(2..=10);
            let classes = rng.random_range(2..=3);
            let x = gaussian_matrix(n, k, &mut rng);
            let w = gaussian_matrix(classes, k, &mut rng) * 1.5;
            let logits = &x * w.transpose();
            let y = (0..n)
                .map(|i| {
                    let row: Vec<f64> = (0..classes)
                        .map(|c| logits[(i, c)] + rng.random::<f64>())
                        .collect();
                    cbmkit::metrics::argmax(row)
                })
                .collect();
            let alpha = [0.5, 0.8, 0.95, 1.0][rng.random_range(0..4)];
            Instance {
                x,
                y,
                classes,
                alpha,
            }
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let tight = SolverOptions {
        tol: 1e-10,
        max_iter: 500_000,
    };
    let mut worst_rel: f64 = 0.0;
    let mut path_points = 0;
    for (i, inst) in random_instances(20, 3).iter().enumerate() {
        let lmax = compute_lambda_max(&inst.x, &inst.y, inst.classes, inst.alpha)
            .map_err(|e| e.to_string())?;
        let lambda = lmax * rng.random_range(0.05..0.6);
        let ours = solve_elastic_net(
            &inst.x,
            &inst.y,
            inst.classes,
            lambda,
            inst.alpha,
            None,
            tight,
        )
        .map_err(|e| format!("instance {i}: {e}"))?;
        let cd = coordinate_descent_oracle(
            &inst.x,
            &inst.y,
            inst.classes,
            lambda,
            inst.alpha,
            1e-13,
            1_000_000,
        );
        let obj =
            objective(&ours, &inst.x, &inst.y, lambda, inst.alpha).map_err(|e| e.to_string())?;
        let rel = (obj - cd.objective).abs() / cd.objective.abs();
        worst_rel = worst_rel.max(rel);
        ensure(rel <= 1e-6, || {
            format!("instance {i}: objectives {obj} vs {}", cd.objective)
        })?;
        let same_support = ours
            .weights
            .iter()
            .zip(cd.weights.iter())
            .all(|(a, b)| (*a != 0.0) == (*b != 0.0));
        ensure(same_support, || format!("instance {i}: supports differ"))?;

        let cfg = PathConfig {
            num_points: 15,
            min_ratio: 0.01,
            alpha_mix: inst.alpha,
            ..Default::default()
        };
        let path = solve_path(&inst.x, &inst.y, &inst.x, &inst.y, inst.classes, &cfg)
            .map_err(|e| e.to_string())?;
        for e in &path.entries {
            let r = kkt_residual(
                &inst.x,
                &inst.y,
                &e.layer.weights,
                &e.layer.bias,
                e.lambda,
                inst.alpha,
            )
            .map_err(|e| e.to_string())?;
            ensure(r <= cfg.tol, || {
                format!("instance {i}: KKT {r:e} at lambda {}", e.lambda)
            })?;
            path_points += 1;
        }
    }
    Ok(format!("20 instances, worst objective gap {worst_rel:.1e}, {path_points} path points within KKT tol"))
}

fn criterion_4(planted: &Planted) -> Outcome {
    let mut fixtures: Vec<(DMatrix<f64>, Vec<usize>, usize, f64)> = random_instances(20, 4)
        .into_iter()
        .map(|i| (i.x, i.y, i.classes, i.alpha))
        .collect();
    fixtures.push((
        planted.test_concepts.clone(),
        planted.test_labels.clone(),
        6,
        0.99,
    ));
    let opts = SolverOptions::default();
    let mut any_nonzero = false;
    for (i, (x, y, c, alpha)) in fixtures.iter().enumerate() {
        let lmax = compute_lambda_max(x, y, *c, *alpha).map_err(|e| e.to_string())?;
        let at =
            solve_elastic_net(x, y, *c, lmax, *alpha, None, opts).map_err(|e| e.to_string())?;
        ensure(at.weights.iter().all(|&v| v == 0.0), || {
            format!("fixture {i}: nonzero at lambda_max")
        })?;
        let below = solve_elastic_net(x, y, *c, 0.99 * lmax, *alpha, None, opts)
            .map_err(|e| e.to_string())?;
        any_nonzero |= below.weights.iter().any(|&v| v != 0.0);
    }
    ensure(any_nonzero, || {
        "no fixture activates at 0.99 lambda_max".into()
    })?;
    Ok(format!(
        "{} fixtures zero at lambda_max, nonzero entries at 0.99 lambda_max",
        fixtures.len()
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..100 {
        let (c, k) = (rng.random_range(1..8), rng.random_range(1..40));
        let density: f64 = rng.random();
        let w = DMatrix::from_fn(c, k, |_, _| {
            if rng.random::<f64>() < density {
                rng.random_range(-2.0..2.0)
            } else {
                0.0
            }
        });
        ensure(nec(&w) == brute_force_nec(&w), || {
            format!("matrix {t}: nec mismatch")
        })?;
        let layer = SparseFinalLayer::new(w, DVector::zeros(c), 0.1, 0.99);
        let target = rng.random_range(0.0..=layer.nec);
        let pruned = prune_to_nec(&layer, target).map_err(|e| e.to_string())?;
        let want = (target * c as f64).round() as usize;
        ensure(pruned.nonzeros() == want, || {
            format!("matrix {t}: {} nonzeros, want {want}", pruned.nonzeros())
        })?;
    }
    let mut w = gaussian_matrix(6, 24, &mut rng);
    for i in 0..6 {
        let keep = rng.random_range(0..=5);
        for j in keep..24 {
            w[(i, j)] = 0.0;
        }
    }
    let layer = SparseFinalLayer::new(w, gaussian_vector(6, &mut rng), 0.1, 0.99);
    let x = gaussian_matrix(2000, 24, &mut rng);
    let change = prediction_change_on_concepts(&layer, &x, 5);
    ensure(change == 0.0, || {
        format!("top-5 pruning of a <=5 layer changed {change}")
    })?;
    Ok("100 random matrices; exact prune counts; identity top-5 change 0".into())
}

fn rel_grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let (n, k, d) = (
            rng.random_range(2..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let z = gaussian_matrix(n, d, &mut rng);
        let targets: Vec<ConceptLabel> = (0..n)
            .map(|_| ConceptLabel::from_bits((0..k).map(|_| rng.random::<bool>()).collect()))
            .collect();
        let w = gaussian_matrix(k, d, &mut rng);
        let b = gaussian_vector(k, &mut rng);
        let scale = rng.random_range(0.5..5.0);
        let cb = ConceptBottleneck::new(w.clone(), Some(b.clone()));
        let (_, gw, gb) =
            bce_weight_gradient(&cb, &z, &targets, scale).map_err(|e| e.to_string())?;
        let params: Vec<f64> = w.iter().chain(b.iter()).copied().collect();
        let f = |p: &[f64]| {
            let cb = ConceptBottleneck::new(
                DMatrix::from_column_slice(k, d, &p[..k * d]),
                Some(DVector::from_column_slice(&p[k * d..])),
            );
            bce_multilabel_loss(&cb.concept_logits(&z, false).unwrap(), &targets, scale).unwrap()
        };
        let analytic: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
        let e = rel_grad_error(&analytic, &finite_difference(f, &params, 1e-6));
        ensure(e <= 1e-5, || format!("BCE gradient error {e:e}"))?;
        worst = worst.max(e);

        let classes = rng.random_range(2..=8);
        let x = gaussian_matrix(n, k, &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let wf = gaussian_matrix(classes, k, &mut rng);
        let bf = gaussian_vector(classes, &mut rng);
        let (gw, gb) = ce_gradient(&x, &y, &wf, &bf).map_err(|e| e.to_string())?;
        let params: Vec<f64> = wf.iter().chain(bf.iter()).copied().collect();
        let f = |p: &[f64]| {
            cross_entropy(
                &x,
                &y,
                &DMatrix::from_column_slice(classes, k, &p[..classes * k]),
                &DVector::from_column_slice(&p[classes * k..]),
            )
            .unwrap()
        };
        let analytic: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
        let e = rel_grad_error(&analytic, &finite_difference(f, &params, 1e-6));
        ensure(e <= 1e-5, || format!("CE gradient error {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!(
        "25 BCE + 25 CE instances, worst relative error {worst:.1e}"
    ))
}

fn criterion_10(planted: &Planted) -> Outcome {
    let bundle = read_bundle(&planted.out.join("final/nec_5.cbmb")).map_err(|e| e.to_string())?;
    let layer = bundle.final_layer().ok_or("bundle has no final layer")?;
    let names = bundle.header.concepts.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = planted.test_concepts.nrows();
    let mut worst: f64 = 0.0;
    for s in 0..1000 {
        let row = rng.random_range(0..n);
        let x = planted.test_concepts.row(row).transpose();
        let e =
            explain_concepts(&layer, &x, &names, &format!("s{s}"), 5).map_err(|e| e.to_string())?;
        let logits = naive_matvec(&layer.weights, x.as_slice());
        let expected = logits[e.predicted_class] + layer.bias[e.predicted_class];
        let rebuilt =
            e.entries.iter().map(|en| en.contribution).sum::<f64>() + e.remainder + e.bias;
        let err = (rebuilt - expected).abs();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("sample {s}: off by {err:e}"))?;
    }
    Ok(format!(
        "1000 samples, worst reconstruction error {worst:.1e}"
    ))
}

fn expect_err(
    r: Result<impl std::fmt::Debug, FormatError>,
    want: fn(&FormatError) -> bool,
    what: &str,
) -> Result<(), String> {
    match r {
        Err(e) if want(&e) => Ok(()),
        Err(e) => Err(format!("{what}: wrong error {e}")),
        Ok(v) => Err(format!("{what}: accepted corrupt input {v:?}")),
    }
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name);
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    for trial in 0..10 {
        let (n, d) = (rng.random_range(1..50), rng.random_range(1..20));
        let ids: Vec<String> = (0..n).map(|i| format!("img-{trial}-{i}")).collect();
        let values: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let emb = EmbeddingMatrix::new(ids.clone(), d, values).map_err(|e| e.to_string())?;
        write_embeddings(&emb, &p("e.vlgc")).map_err(|e| e.to_string())?;
        ensure(
            read_embeddings(&p("e.vlgc")).map_err(|e| e.to_string())? == emb,
            || "embeddings differ".into(),
        )?;

        let concepts: Vec<String> = (0..rng.random_range(1..10))
            .map(|j| format!("concept {j} \"q\""))
            .collect();
        let records: Vec<DetectionRecord> = ids
            .iter()
            .map(|id| DetectionRecord {
                image_id: id.clone(),
                class_label: rng.random_range(0..5),
                boxes: (0..rng.random_range(0..4))
                    .map(|_| {
                        let (x0, y0) = (rng.random::<f64>() * 100.0, rng.random::<f64>() * 100.0);
                        BoundingBox {
                            coords: [
                                x0,
                                y0,
                                x0 + 1.0 + rng.random::<f64>(),
                                y0 + 0.1 + rng.random::<f64>(),
                            ],
                            confidence: rng.random(),
                            concept: concepts[rng.random_range(0..concepts.len())].clone(),
                        }
                    })
                    .collect(),
            })
            .collect();
        write_detections(&records, &p("d.jsonl")).map_err(|e| e.to_string())?;
        ensure(
            read_detections(&p("d.jsonl")).map_err(|e| e.to_string())? == records,
            || "detections differ".into(),
        )?;

        let mut cands = BTreeMap::new();
        for c in 0..rng.random_range(0..5) {
            cands.insert(
                c,
                (0..concepts.len())
                    .filter(|_| rng.random::<bool>())
                    .collect(),
            );
        }
        let vocab = ConceptVocabulary::new(concepts.clone(), cands).map_err(|e| e.to_string())?;
        write_vocabulary(&vocab, &p("v.jsonl")).map_err(|e| e.to_string())?;
        ensure(
            read_vocabulary(&p("v.jsonl")).map_err(|e| e.to_string())? == vocab,
            || "vocabulary differs".into(),
        )?;

        let (k, classes) = (concepts.len(), rng.random_range(2..6));
        let mut cb = ConceptBottleneck::new(
            gaussian_matrix(k, d, &mut rng),
            Some(gaussian_vector(k, &mut rng)),
        );
        cb = fit_normalization(&cb, &emb.to_matrix()).unwrap_or(cb);
        let layer = SparseFinalLayer::new(
            gaussian_matrix(classes, k, &mut rng),
            gaussian_vector(classes, &mut rng),
            0.01,
            0.99,
        );
        let bundle = ModelBundle::from_models(
            &cb,
            (trial % 2 == 0).then_some(&layer),
            concepts.clone(),
            format!("{trial:064x}"),
        );
        write_bundle(&bundle, &p("m.cbmb")).map_err(|e| e.to_string())?;
        ensure(
            read_bundle(&p("m.cbmb")).map_err(|e| e.to_string())? == bundle,
            || "bundle differs".into(),
        )?;

        let manifest = DatasetManifest {
            embeddings: FileRef::of(&p("e.vlgc")).map_err(|e| e.to_string())?,
            crop_embeddings: None,
            threshold: rng.random(),
            seed: rng.random(),
            concept_set: concepts.clone(),
            image_ids: ids.clone(),
            class_labels: ids.iter().map(|_| rng.random_range(0..classes)).collect(),
            concept_labels: ids
                .iter()
                .map(|_| {
                    ConceptLabel::from_bits((0..k).map(|_| rng.random()).collect()).to_bit_string()
                })
                .collect(),
            augmentations: vec![AugmentationRecord {
                image_id: ids[0].clone(),
                box_index: 0,
                concept_index: k - 1,
                crop_embedding_id: crop_id(&ids[0], 0),
            }],
        };
        write_manifest(&manifest, &p("ds.json")).map_err(|e| e.to_string())?;
        ensure(
            read_manifest(&p("ds.json")).map_err(|e| e.to_string())? == manifest,
            || "manifest differs".into(),
        )?;
    }

    // corrupt fixtures
    let good = fs::read(p("e.vlgc")).map_err(|e| e.to_string())?;
    let write = |name: &str, bytes: &[u8]| fs::write(p(name), bytes).map_err(|e| e.to_string());
    let mut bad = good.clone();
    bad[0] = b'X';
    write("bad_magic.vlgc", &bad)?;
    expect_err(
        read_embeddings(&p("bad_magic.vlgc")),
        |e| matches!(e, FormatError::BadMagic { .. }),
        "magic",
    )?;
    let mut bad = good.clone();
    bad[4] = 9;
    write("bad_version.vlgc", &bad)?;
    expect_err(
        read_embeddings(&p("bad_version.vlgc")),
        |e| matches!(e, FormatError::UnsupportedVersion(9)),
        "version",
    )?;
    write("truncated.vlgc", &good[..good.len() - 3])?;
    expect_err(
        read_embeddings(&p("truncated.vlgc")),
        |e| matches!(e, FormatError::TruncatedPayload { .. }),
        "truncation",
    )?;
    write("no_header.vlgc", b"VLGC\x01{\"n\":1")?;
    expect_err(
        read_embeddings(&p("no_header.vlgc")),
        |e| matches!(e, FormatError::MalformedHeader(_)),
        "header",
    )?;
    let bundle = fs::read(p("m.cbmb")).map_err(|e| e.to_string())?;
    write("truncated.cbmb", &bundle[..bundle.len() - 1])?;
    expect_err(
        read_bundle(&p("truncated.cbmb")),
        |e| matches!(e, FormatError::TruncatedPayload { .. }),
        "bundle truncation",
    )?;
    expect_err(
        read_bundle(&p("e.vlgc")),
        |e| matches!(e, FormatError::BadMagic { .. }),
        "bundle magic",
    )?;

    write(
        "d_bad.jsonl",
        b"{\"image_id\":\"a\",\"class_label\":0,\"boxes\":[]}\n{not json}\n",
    )?;
    expect_err(
        read_detections(&p("d_bad.jsonl")),
        |e| matches!(e, FormatError::MalformedRecord { line: 2, .. }),
        "detections json",
    )?;
    write(
        "d_box.jsonl",
        br#"{"image_id":"a","class_label":0,"boxes":[{"coords":[5,0,1,1],"confidence":0.5,"concept":"x"}]}"#,
    )?;
    expect_err(
        read_detections(&p("d_box.jsonl")),
        |e| matches!(e, FormatError::Invariant { line: 1, .. }),
        "box invariant",
    )?;
    write(
        "d_conf.jsonl",
        br#"{"image_id":"a","class_label":0,"boxes":[{"coords":[0,0,1,1],"confidence":1.5,"concept":"x"}]}"#,
    )?;
    expect_err(
        read_detections(&p("d_conf.jsonl")),
        |e| matches!(e, FormatError::Invariant { .. }),
        "confidence",
    )?;
    write(
        "v_dup.jsonl",
        b"{\"kind\":\"concept\",\"name\":\"a\"}\n{\"kind\":\"concept\",\"name\":\"a\"}\n",
    )?;
    expect_err(
        read_vocabulary(&p("v_dup.jsonl")),
        |e| matches!(e, FormatError::DuplicateId(_)),
        "duplicate concept",
    )?;
    let text = fs::read_to_string(p("ds.json")).map_err(|e| e.to_string())?;
    let mut m: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    m["concept_labels"][0] = Value::String("2".into());
    write("ds_bad.json", m.to_string().as_bytes())?;
    expect_err(
        read_manifest(&p("ds_bad.json")),
        |e| matches!(e, FormatError::Invariant { .. }),
        "manifest bits",
    )?;
    write("ds_trunc.json", &text.as_bytes()[..text.len() / 2])?;
    expect_err(
        read_manifest(&p("ds_trunc.json")),
        |e| matches!(e, FormatError::MalformedRecord { .. }),
        "manifest json",
    )?;

    Ok("10 randomized fixtures x 5 formats bit-exact; 13 corrupt files rejected with the designated error".into())
}

/// Outputs of one planted pipeline run.
struct Planted {
    out: PathBuf,
    cfg: RunConfig,
    elapsed: Duration,
    test_concepts: DMatrix<f64>,
    test_labels: Vec<usize>,
}

fn planted_config(root: &Path) -> Result<RunConfig, String> {
    let base = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/planted.toml");
    let fx = root.join("fixture");
    let set = |key: &str, file: &str| format!("paths.{key}=\"{}\"", fx.join(file).display());
    let overrides = vec![
        set("embeddings", "embeddings.vlgc"),
        set("detections", "detections.jsonl"),
        set("vocabulary", "vocabulary.jsonl"),
        set("crop_embeddings", "crops.vlgc"),
        set("test_embeddings", "test_embeddings.vlgc"),
        set("test_detections", "test_detections.jsonl"),
        format!("paths.output_dir=\"{}\"", root.join("out").display()),
    ];
    load_config(Some(&base), &overrides).map_err(|e| e.to_string())
}

fn run_pipeline(root: &Path, threads: usize) -> Result<Planted, String> {
    let cfg = planted_config(root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    pool.install(|| {
        for stage in Stage::PIPELINE {
            run_stage(stage, &cfg, true).map_err(|e| format!("{}: {e}", stage.name()))?;
        }
        Ok::<_, String>(())
    })?;
    let elapsed = start.elapsed();
    let bundle =
        read_bundle(&cfg.paths.output_dir.join("cbl/model.cbmb")).map_err(|e| e.to_string())?;
    let test =
        read_embeddings(cfg.paths.test_embeddings.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let records =
        read_detections(cfg.paths.test_detections.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let z = test.to_matrix();
    let test_concepts = bundle
        .bottleneck()
        .concept_logits(&z, true)
        .map_err(|e| e.to_string())?;
    Ok(Planted {
        out: cfg.paths.output_dir.clone(),
        test_labels: records.iter().map(|r| r.class_label).collect(),
        cfg,
        elapsed,
        test_concepts,
    })
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn accuracy_at(list: &Value, levels: &Value, nec: u64) -> Result<f64, String> {
    let idx = levels
        .as_array()
        .and_then(|l| l.iter().position(|v| v.as_u64() == Some(nec)))
        .ok_or(format!("NEC {nec} not reported"))?;
    list[idx].as_f64().ok_or("accuracy missing".into())
}

fn criterion_6(planted: &Planted) -> Outcome {
    // ground truth: the planted threshold test on the stored test embeddings
    let model = PlantedModel::new(planted.cfg.synth.planted.clone()).map_err(|e| e.to_string())?;
    let test = read_embeddings(planted.cfg.paths.test_embeddings.as_ref().unwrap())
        .map_err(|e| e.to_string())?;
    let truth: Vec<Vec<bool>> = (0..test.len())
        .map(|i| model.clean_bits(&test.row(i)))
        .collect();
    let bundle = read_bundle(&planted.out.join("cbl/model.cbmb")).map_err(|e| e.to_string())?;
    ensure(bundle.header.concepts == model.concept_names, || {
        "concept order differs from the planted model".into()
    })?;
    let mut min_auc = f64::INFINITY;
    for j in 0..model.concept_names.len() {
        let scores: Vec<f64> = planted.test_concepts.column(j).iter().copied().collect();
        let labels: Vec<bool> = truth.iter().map(|t| t[j]).collect();
        let auc = roc_auc(&scores, &labels).ok_or(format!("concept {j} has one class only"))?;
        min_auc = min_auc.min(auc);
    }
    ensure(min_auc >= 0.95, || format!("min test AUC {min_auc:.4}"))?;
    let anec = read_json(&planted.out.join("eval/anec.json"))?;
    let a5 = anec["anec5"].as_f64().ok_or("anec5 missing")?;
    let dense = anec["dense_accuracy"].as_f64().ok_or("dense missing")?;
    ensure(a5 >= dense - 0.02, || {
        format!("ANEC-5 {a5:.4} vs dense {dense:.4}")
    })?;
    ensure(planted.elapsed < Duration::from_secs(300), || {
        format!("pipeline took {:?}", planted.elapsed)
    })?;
    Ok(format!(
        "min test AUC {min_auc:.4}; ANEC-5 {a5:.4} vs dense {dense:.4}; single-threaded pipeline {:.1}s",
        planted.elapsed.as_secs_f64()
    ))
}

fn criterion_7(planted: &Planted) -> Outcome {
    let anec = read_json(&planted.out.join("eval/anec.json"))?;
    let levels = &anec["levels"];
    let t5 = accuracy_at(&anec["accuracy"], levels, 5)?;
    let t30 = accuracy_at(&anec["accuracy"], levels, 30)?;
    let r5 = accuracy_at(&anec["random"]["accuracy"], levels, 5)?;
    let r30 = accuracy_at(&anec["random"]["accuracy"], levels, 30)?;
    ensure(t5 - r5 >= 0.10, || {
        format!("NEC-5 gap {:.1} points", 100.0 * (t5 - r5))
    })?;
    ensure((t30 - r30).abs() <= 0.05, || {
        format!("NEC-30 gap {:.1} points", 100.0 * (t30 - r30))
    })?;
    Ok(format!(
        "NEC-5 trained {t5:.4} vs random {r5:.4} (gap {:.1}); NEC-30 {t30:.4} vs {r30:.4} (gap {:.1})",
        100.0 * (t5 - r5),
        100.0 * (t30 - r30)
    ))
}

fn criterion_8(planted: &Planted) -> Outcome {
    let audit = read_json(&planted.out.join("audit/audit.json"))?;
    let sparse = audit["sparse_change"]
        .as_f64()
        .ok_or("sparse_change missing")?;
    let dense = audit["dense_change"]
        .as_f64()
        .ok_or("dense_change missing")?;
    ensure(sparse <= dense && dense > 0.0, || {
        format!("sparse {sparse} vs dense {dense}")
    })?;
    Ok(format!(
        "top-5 change: NEC-5 model {:.2}%, dense model {:.2}%",
        100.0 * sparse,
        100.0 * dense
    ))
}

fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(files)
}

/// Reruns every stage in place with four threads and compares each file,
/// fixtures included, against the single-threaded first run.
fn criterion_12(first: &Planted, before: &BTreeMap<PathBuf, Vec<u8>>) -> Outcome {
    let root = first.out.parent().unwrap();
    run_pipeline(root, 4)?;
    let after = snapshot(root)?;
    let names = |m: &BTreeMap<PathBuf, Vec<u8>>| m.keys().cloned().collect::<Vec<_>>();
    ensure(names(before) == names(&after), || {
        "runs produced different file sets".into()
    })?;
    for (rel, bytes) in before {
        ensure(after[rel] == *bytes, || {
            format!("{} differs", rel.display())
        })?;
    }
    let total: usize = before.values().map(Vec::len).sum();
    Ok(format!(
        "{} files ({} KiB) byte-identical across a 1-thread and a 4-thread run",
        before.len(),
        total / 1024
    ))
}

fn main() {
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let mut record = |n: u8, f: &mut dyn FnMut() -> Outcome| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2}: {tag} - {detail}");
        results.push((n, r));
    };

    let root = tempfile::tempdir().expect("temp dir");
    let planted = run_pipeline(root.path(), 1);
    let first_run = snapshot(root.path());

    record(1, &mut criterion_1);
    record(2, &mut criterion_2);
    record(3, &mut criterion_3);
    let needs_run = |f: fn(&Planted) -> Outcome| {
        let planted = &planted;
        move || {
            planted
                .as_ref()
                .map_err(|e| format!("planted pipeline failed: {e}"))
                .and_then(f)
        }
    };
    record(4, &mut needs_run(criterion_4));
    record(5, &mut criterion_5);
    record(6, &mut needs_run(criterion_6));
    record(7, &mut needs_run(criterion_7));
    record(8, &mut needs_run(criterion_8));
    record(9, &mut criterion_9);
    record(10, &mut needs_run(criterion_10));
    record(11, &mut criterion_11);
    record(12, &mut || {
        let p = planted
            .as_ref()
            .map_err(|e| format!("planted pipeline failed: {e}"))?;
        criterion_12(p, first_run.as_ref()?)
    });

    let failed: Vec<u8> = results
        .iter()
        .filter(|(_, r)| r.is_err())
        .map(|(n, _)| *n)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
