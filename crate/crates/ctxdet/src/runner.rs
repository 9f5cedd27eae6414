//! Experiment commands: pretraining, fine-tuning, evaluation, incremental
//! runs, gradient checks, ablation sweeps, and scene/affinity dumps. Every
//! command is a pure function of (config, checkpoints) and embeds the
//! resolved config in its output directory.

use crate::anchors::match_priors;
use crate::config::{ExperimentConfig, Precision};
use crate::context::{
    self, affinity_dump, CtFlags, CtParamIds, SourceScoreSet,
};
use crate::detector::{
    self, finetune, leaf_params, predict_with, pretrain_source,
    ClsPathwayPublic, DetectorConfig, StepLog, Variant,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_detections, EvalReport};
use crate::incremental::{
    build_incremental_trainset, joint_class_index, setup_incremental, INC_ADAPTER,
};
use crate::rng::{derive_seed, Rng};
use crate::synthdata::{
    default_benchmark, dump_scenes, sample_episode, source_test_set, source_train_scene,
    target_stream_scene, target_test_set, Benchmark, Domain, EpisodeSpec, Scene,
};
use crate::tensor::{
    finite_diff_check, load_checkpoint, save_checkpoint, ParamStore, Real, Tape, Tensor,
};
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ── Output plumbing ──────────────────────────────────────────────────

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let value = serde_json::to_value(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    write_json(&dir.join("config.json"), &value)
}

fn write_metrics(dir: &Path, logs: &[StepLog]) -> Result<()> {
    let path = dir.join("metrics.jsonl");
    let mut file =
        fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for log in logs {
        let line = serde_json::to_string(log).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

// ── Evaluation helpers ───────────────────────────────────────────────

fn scene_gts(
    scenes: &[Scene],
    map_class: &dyn Fn(usize) -> Result<usize>,
) -> Result<Vec<Vec<(usize, crate::anchors::BBox)>>> {
    scenes
        .iter()
        .map(|s| {
            s.annotations
                .iter()
                .map(|a| Ok((map_class(a.class_id)?, a.bbox)))
                .collect()
        })
        .collect()
}

/// Evaluates a checkpoint on the fixed target test set. Always runs the
/// double-precision path so the report is bitwise reproducible.
pub fn eval_target_model(
    store: &ParamStore<f64>,
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    cfg: &ExperimentConfig,
    variant: Variant,
    meta: Value,
) -> Result<EvalReport> {
    let scenes = target_test_set(bench)?;
    let dets = predict_with(
        store,
        &scenes,
        dcfg,
        ClsPathwayPublic::Target {
            variant,
            flags: cfg.ct,
        },
    )?;
    let gts = scene_gts(&scenes, &|id| {
        bench
            .target_index(id)
            .ok_or_else(|| Error::Input(format!("class {id} not in target set")))
    })?;
    let names: Vec<String> = bench.target.iter().map(|c| c.name.clone()).collect();
    Ok(evaluate_detections(
        &dets,
        &gts,
        &names,
        cfg.eval.iou_threshold,
        cfg.eval.interpolation,
        cfg.eval.confusion_score_floor,
        meta,
    ))
}

/// Source-pathway evaluation on the fixed source test set.
pub fn eval_source_model(
    store: &ParamStore<f64>,
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    cfg: &ExperimentConfig,
    meta: Value,
) -> Result<EvalReport> {
    let scenes = source_test_set(bench)?;
    let dets = predict_with(store, &scenes, dcfg, ClsPathwayPublic::Source)?;
    let gts = scene_gts(&scenes, &|id| {
        bench
            .source_index(id)
            .ok_or_else(|| Error::Input(format!("class {id} not in source set")))
    })?;
    let names: Vec<String> = bench.source.iter().map(|c| c.name.clone()).collect();
    Ok(evaluate_detections(
        &dets,
        &gts,
        &names,
        cfg.eval.iou_threshold,
        cfg.eval.interpolation,
        cfg.eval.confusion_score_floor,
        meta,
    ))
}

/// Joint-head evaluation over one domain's test set; mAP is averaged over
/// that domain's class slice of the joint space.
fn eval_joint_model(
    store: &ParamStore<f64>,
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    cfg: &ExperimentConfig,
    scenes: &[Scene],
    meta: Value,
) -> Result<EvalReport> {
    let dets = predict_with(
        store,
        scenes,
        dcfg,
        ClsPathwayPublic::Joint { flags: cfg.ct },
    )?;
    let gts = scene_gts(scenes, &|id| joint_class_index(bench, id))?;
    let mut names: Vec<String> = bench.source.iter().map(|c| c.name.clone()).collect();
    names.extend(bench.target.iter().map(|c| c.name.clone()));
    Ok(evaluate_detections(
        &dets,
        &gts,
        &names,
        cfg.eval.iou_threshold,
        cfg.eval.interpolation,
        cfg.eval.confusion_score_floor,
        meta,
    ))
}

/// Mean AP over a class-index slice of a report (classes without AP skipped).
pub fn domain_map(report: &EvalReport, range: std::ops::Range<usize>) -> f64 {
    let aps: Vec<f64> = report
        .classes
        .iter()
        .filter(|c| range.contains(&c.class_index))
        .filter_map(|c| c.ap)
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

// ── Commands ─────────────────────────────────────────────────────────

pub fn cmd_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Value> {
    cfg.validate_for_pretrain()?;
    ensure_dir(out_dir)?;
    write_config(out_dir, cfg)?;
    let bench = default_benchmark();
    let dcfg = cfg.detector();
    let tcfg = cfg.train_cfg_pretrain();
    let (logs, store64) = match cfg.precision {
        Precision::Single => {
            let (store, logs) = pretrain_source::<f32>(&bench, &dcfg, &tcfg)?;
            save_checkpoint(&out_dir.join("checkpoint.ckpt"), &store)?;
            (logs, store.cast::<f64>())
        }
        Precision::Double => {
            let (store, logs) = pretrain_source::<f64>(&bench, &dcfg, &tcfg)?;
            save_checkpoint(&out_dir.join("checkpoint.ckpt"), &store)?;
            (logs, store)
        }
    };
    write_metrics(out_dir, &logs)?;
    let report = eval_source_model(
        &store64,
        &bench,
        &dcfg,
        cfg,
        json!({"phase": "pretrain", "seed": cfg.seed}),
    )?;
    write_json(
        &out_dir.join("eval.json"),
        &serde_json::to_value(&report).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    let summary = json!({
        "steps": logs.len(),
        "final_loss": logs.last().map(|l| l.loss),
        "loss_decreasing": detector::loss_trend_decreasing(&logs, 100),
        "source_map": report.map,
        "checkpoint": out_dir.join("checkpoint.ckpt"),
    });
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Fine-tunes one variant from a source checkpoint and evaluates it.
/// Shared by `cmd_finetune`, `cmd_ablate`, and the acceptance suite.
pub fn finetune_and_eval<F: Real>(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    source: &ParamStore<F>,
    variant: Variant,
    shots: usize,
    trial: u64,
) -> Result<(ParamStore<F>, Vec<StepLog>, EvalReport)> {
    let episode = sample_episode(
        bench,
        &EpisodeSpec {
            shots,
            trial,
            seed: cfg.seed,
        },
    )?;
    let tcfg = cfg.train_cfg_finetune(derive_seed(cfg.seed, trial.wrapping_add(1)));
    let (store, logs) = finetune(
        bench,
        dcfg,
        &tcfg,
        variant,
        &cfg.ct,
        &cfg.transfer,
        source,
        &episode.train,
    )?;
    let report = eval_target_model(
        &store.cast::<f64>(),
        bench,
        dcfg,
        cfg,
        variant,
        json!({
            "phase": "finetune",
            "variant": variant.name(),
            "shots": shots,
            "trial": trial,
            "seed": cfg.seed,
        }),
    )?;
    Ok((store, logs, report))
}

pub fn cmd_finetune(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<Value> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    write_config(out_dir, cfg)?;
    let bench = default_benchmark();
    let dcfg = cfg.detector();
    let (report, logs) = match cfg.precision {
        Precision::Single => {
            let source = load_checkpoint::<f32>(checkpoint)?;
            let (store, logs, report) =
                finetune_and_eval(cfg, &bench, &dcfg, &source, cfg.variant, cfg.shots, cfg.trial)?;
            save_checkpoint(&out_dir.join("checkpoint.ckpt"), &store)?;
            (report, logs)
        }
        Precision::Double => {
            let source = load_checkpoint::<f64>(checkpoint)?;
            let (store, logs, report) =
                finetune_and_eval(cfg, &bench, &dcfg, &source, cfg.variant, cfg.shots, cfg.trial)?;
            save_checkpoint(&out_dir.join("checkpoint.ckpt"), &store)?;
            (report, logs)
        }
    };
    write_metrics(out_dir, &logs)?;
    write_json(
        &out_dir.join("eval.json"),
        &serde_json::to_value(&report).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    let summary = json!({
        "variant": cfg.variant.name(),
        "shots": cfg.shots,
        "trial": cfg.trial,
        "target_map": report.map,
        "checkpoint": out_dir.join("checkpoint.ckpt"),
    });
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    domain: Domain,
    out_dir: Option<&Path>,
) -> Result<Value> {
    cfg.validate()?;
    let bench = default_benchmark();
    let dcfg = cfg.detector();
    let store = load_checkpoint::<f64>(checkpoint)?;
    let meta = json!({
        "checkpoint": checkpoint,
        "variant": cfg.variant.name(),
        "seed": cfg.seed,
        "shots": cfg.shots,
        "trial": cfg.trial,
        "domain": domain,
    });
    let report = match domain {
        Domain::Target => eval_target_model(&store, &bench, &dcfg, cfg, cfg.variant, meta)?,
        Domain::Source => eval_source_model(&store, &bench, &dcfg, cfg, meta)?,
    };
    println!("{}", report.render_table());
    if cfg.variant.uses_attention() && domain == Domain::Target {
        let concentration = affinity_concentration(&store, &bench, &dcfg, cfg, 40)?;
        println!(
            "mean top-3 affinity mass on context-class positives: {concentration:.3}"
        );
    }
    let value = serde_json::to_value(&report).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_config(dir, cfg)?;
        write_json(&dir.join("eval.json"), &value)?;
    }
    Ok(value)
}

/// Before/after source and target mAP for the incremental protocol.
#[derive(Clone, Debug, Serialize)]
pub struct IncrementalReport {
    pub before_source_map: f64,
    pub before_target_map: f64,
    pub after_source_map: f64,
    pub after_target_map: f64,
    pub source_retention: f64,
    pub target_gain: f64,
}

pub fn incremental_run<F: Real>(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    source: &ParamStore<F>,
) -> Result<(ParamStore<F>, IncrementalReport)> {
    // before: pretrained source pathway, and the untrained joint head
    let source64 = source.cast::<f64>();
    let before_source = eval_source_model(&source64, bench, dcfg, cfg, json!({"phase": "before"}))?;

    let mut store = setup_incremental(source, dcfg, &cfg.ct, derive_seed(cfg.seed, 0x1AC))?;
    let before_target = {
        let scenes = target_test_set(bench)?;
        let report = eval_joint_model(
            &store.cast::<f64>(),
            bench,
            dcfg,
            cfg,
            &scenes,
            json!({"phase": "before"}),
        )?;
        domain_map(&report, bench.num_source()..bench.num_source() + bench.num_target())
    };

    let episode = sample_episode(
        bench,
        &EpisodeSpec {
            shots: cfg.shots,
            trial: cfg.trial,
            seed: cfg.seed,
        },
    )?;
    let trainset = build_incremental_trainset(bench, &episode, cfg.shots, cfg.seed)?;
    let tcfg = cfg.train_cfg_incremental(derive_seed(cfg.seed, 0x1AD));
    let prepared: Vec<(Scene, detector::SceneTargets)> = trainset
        .iter()
        .map(|s| {
            let boxes = s
                .annotations
                .iter()
                .map(|a| Ok((a.bbox, joint_class_index(bench, a.class_id)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((s.clone(), detector::SceneTargets { boxes }))
        })
        .collect::<Result<Vec<_>>>()?;
    let logs = detector::run_incremental_training(&mut store, dcfg, &tcfg, cfg.ct, &prepared)?;

    let store64 = store.cast::<f64>();
    let after_source_report = eval_joint_model(
        &store64,
        bench,
        dcfg,
        cfg,
        &source_test_set(bench)?,
        json!({"phase": "after", "domain": "source"}),
    )?;
    let after_target_report = eval_joint_model(
        &store64,
        bench,
        dcfg,
        cfg,
        &target_test_set(bench)?,
        json!({"phase": "after", "domain": "target"}),
    )?;
    let after_source = domain_map(&after_source_report, 0..bench.num_source());
    let after_target = domain_map(
        &after_target_report,
        bench.num_source()..bench.num_source() + bench.num_target(),
    );
    let report = IncrementalReport {
        before_source_map: before_source.map,
        before_target_map: before_target,
        after_source_map: after_source,
        after_target_map: after_target,
        source_retention: if before_source.map > 0.0 {
            after_source / before_source.map
        } else {
            0.0
        },
        target_gain: after_target - before_target,
    };
    let _ = logs;
    Ok((store, report))
}

pub fn cmd_incremental(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<Value> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    write_config(out_dir, cfg)?;
    let bench = default_benchmark();
    let dcfg = cfg.detector();
    let report = match cfg.precision {
        Precision::Single => {
            let source = load_checkpoint::<f32>(checkpoint)?;
            let (store, report) = incremental_run(cfg, &bench, &dcfg, &source)?;
            save_checkpoint(&out_dir.join("checkpoint.ckpt"), &store)?;
            report
        }
        Precision::Double => {
            let source = load_checkpoint::<f64>(checkpoint)?;
            let (store, report) = incremental_run(cfg, &bench, &dcfg, &source)?;
            save_checkpoint(&out_dir.join("checkpoint.ckpt"), &store)?;
            report
        }
    };
    let value = serde_json::to_value(&report).map_err(|e| Error::Serde(e.to_string()))?;
    write_json(&out_dir.join("incremental.json"), &value)?;
    println!(
        "S-mAP {:.4} -> {:.4} (retention {:.1}%), T-mAP {:.4} -> {:.4}",
        report.before_source_map,
        report.after_source_map,
        100.0 * report.source_retention,
        report.before_target_map,
        report.after_target_map
    );
    Ok(value)
}

// ── Ablation sweep ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct AblateRow {
    pub variant: String,
    pub shots: usize,
    pub trial: u64,
    pub target_map: f64,
}

pub struct SweepSpec {
    pub variants: Vec<Variant>,
    pub shots: Vec<usize>,
    pub trials: Vec<u64>,
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    sweep: &SweepSpec,
    out_dir: &Path,
) -> Result<Value> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    write_config(out_dir, cfg)?;
    let bench = default_benchmark();
    let dcfg = cfg.detector();
    let source = load_checkpoint::<f32>(checkpoint)?;

    let mut jobs = Vec::new();
    for &variant in &sweep.variants {
        for &shots in &sweep.shots {
            for &trial in &sweep.trials {
                jobs.push((variant, shots, trial));
            }
        }
    }
    use rayon::prelude::*;
    let rows: Vec<AblateRow> = jobs
        .par_iter()
        .map(|&(variant, shots, trial)| {
            let (_, _, report) =
                finetune_and_eval(cfg, &bench, &dcfg, &source, variant, shots, trial)?;
            Ok(AblateRow {
                variant: variant.name().to_string(),
                shots,
                trial,
                target_map: report.map,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = String::new();
    table.push_str(&format!(
        "{:<18} {:>6} {:>6} {:>8}\n",
        "variant", "shots", "trial", "mAP"
    ));
    for row in &rows {
        table.push_str(&format!(
            "{:<18} {:>6} {:>6} {:>8.4}\n",
            row.variant, row.shots, row.trial, row.target_map
        ));
    }
    // per-(variant, shots) means over trials
    let mut means: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for row in &rows {
        let e = means.entry((row.variant.clone(), row.shots)).or_insert((0.0, 0));
        e.0 += row.target_map;
        e.1 += 1;
    }
    table.push('\n');
    for ((variant, shots), (sum, n)) in &means {
        table.push_str(&format!(
            "{variant:<18} {shots:>6} {:>6} {:>8.4}\n",
            "mean",
            sum / *n as f64
        ));
    }
    println!("{table}");
    let value = json!({
        "rows": rows,
        "means": means
            .iter()
            .map(|((v, s), (sum, n))| json!({
                "variant": v, "shots": s, "mean_map": sum / *n as f64
            }))
            .collect::<Vec<_>>(),
    });
    write_json(&out_dir.join("ablate.json"), &value)?;
    fs::write(out_dir.join("ablate.txt"), table)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    Ok(value)
}

// ── Scene and affinity dumps ─────────────────────────────────────────

pub fn cmd_dump_scenes(
    cfg: &ExperimentConfig,
    domain: Domain,
    count: usize,
    out_dir: &Path,
) -> Result<Value> {
    ensure_dir(out_dir)?;
    write_config(out_dir, cfg)?;
    let bench = default_benchmark();
    let scenes: Vec<Scene> = (0..count)
        .map(|i| match domain {
            Domain::Source => source_train_scene(&bench, i as u64, cfg.seed),
            Domain::Target => target_stream_scene(&bench, i as u64, cfg.seed),
        })
        .collect::<Result<Vec<_>>>()?;
    dump_scenes(out_dir, &scenes, &bench)?;
    Ok(json!({"scenes": count, "domain": domain, "dir": out_dir}))
}

pub fn cmd_dump_affinity(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    scene_index: u64,
    prior_index: usize,
    k: usize,
    out: Option<&Path>,
) -> Result<Value> {
    let bench = default_benchmark();
    let dcfg = cfg.detector();
    let store = load_checkpoint::<f64>(checkpoint)?;
    let scene = target_stream_scene(&bench, scene_index, cfg.seed)?;
    let priors = dcfg.priors()?;

    let mut tape = Tape::<f64>::new();
    let ids = leaf_params(&mut tape, &store, &|_| false);
    let image = tape.leaf(scene.image.clone(), false);
    let fwd = detector::scene_forward(
        &mut tape,
        &ids,
        image,
        &dcfg,
        detector::ClsPathway::Target {
            variant: cfg.variant,
            flags: cfg.ct,
        },
        false,
    )?;
    let (a_id, provenance) = match (fwd.affinity, fwd.field_provenance) {
        (Some(a), Some(p)) => (a, p),
        _ => {
            return Err(Error::Parameter(
                "affinity dump requires an attention variant".into(),
            ))
        }
    };
    let dump = affinity_dump(tape.value(a_id), &provenance, &priors, prior_index, k)?;
    let value = serde_json::to_value(&dump).map_err(|e| Error::Serde(e.to_string()))?;
    if let Some(path) = out {
        write_json(path, &value)?;
    } else {
        println!(
            "{}",
            serde_json::to_string_pretty(&value).map_err(|e| Error::Serde(e.to_string()))?
        );
    }
    Ok(value)
}

/// Mean top-3 softmax affinity mass over positive priors of
/// context-dependent target classes, averaged across test scenes.
pub fn affinity_concentration(
    store: &ParamStore<f64>,
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    cfg: &ExperimentConfig,
    num_scenes: usize,
) -> Result<f64> {
    let scenes = target_test_set(bench)?;
    let priors = dcfg.priors()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in scenes.iter().take(num_scenes) {
        let context_classes: Vec<(crate::anchors::BBox, usize)> = scene
            .annotations
            .iter()
            .filter(|a| {
                bench
                    .target_index(a.class_id)
                    .map(|i| bench.target[i].context_glyph.is_some())
                    .unwrap_or(false)
            })
            .map(|a| (a.bbox, a.class_id))
            .collect();
        if context_classes.is_empty() {
            continue;
        }
        let mut tape = Tape::<f64>::new();
        let ids = leaf_params(&mut tape, store, &|_| false);
        let image = tape.leaf(scene.image.clone(), false);
        let fwd = detector::scene_forward(
            &mut tape,
            &ids,
            image,
            dcfg,
            detector::ClsPathway::Target {
                variant: cfg.variant,
                flags: cfg.ct,
            },
            false,
        )?;
        let (Some(a_id), Some(provenance)) = (fwd.affinity, fwd.field_provenance) else {
            continue;
        };
        let matches = match_priors(&context_classes, &priors, 0.5)?;
        let a = tape.value(a_id);
        for (pi, m) in matches.iter().enumerate() {
            if matches!(m, crate::anchors::Match::Positive(_)) {
                let topk =
                    context::top_k_affinity(a, &provenance, pi, 3.min(provenance.len()))?;
                total += topk.iter().map(|(_, w)| w).sum::<f64>();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Input(
            "no positive priors of context-dependent classes found".into(),
        ));
    }
    Ok(total / count as f64)
}

// ── Gradient check command ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Parameter with the worst relative error.
    pub worst_param: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub checks: Vec<GradCheckEntry>,
    pub all_pass: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
const GRADCHECK_EPSILON: f64 = 1e-6;
/// The whole-model check sums hundreds of terms, so its loss magnitude
/// pushes the 1e-6-step difference quotient into f64 roundoff for the
/// smallest gradient elements; a wider step keeps roundoff ~1e-11 while
/// truncation stays far below the tolerance on this smooth instance.
const GRADCHECK_FULL_MODEL_EPSILON: f64 = 2e-5;

/// Mini detector used for whole-model gradient checks: 8x8 input collapsing
/// to three 1x1 feature scales.
pub fn gradcheck_detector_config() -> DetectorConfig {
    let ratios = vec![1.0, 2.0, 0.5];
    DetectorConfig {
        image_size: 8,
        num_source_classes: 12,
        num_target_classes: 4,
        scales: vec![
            crate::anchors::ScaleSpec { grid_h: 1, grid_w: 1, ratios: ratios.clone(), base_size: 0.4 },
            crate::anchors::ScaleSpec { grid_h: 1, grid_w: 1, ratios: ratios.clone(), base_size: 0.6 },
            crate::anchors::ScaleSpec { grid_h: 1, grid_w: 1, ratios, base_size: 0.8 },
        ],
        pooling: crate::context::PoolingConfig::pass_through(3),
    }
}

type LossAndGrads = Result<(f64, BTreeMap<String, Tensor<f64>>)>;

fn check_into_eps(
    summary: &mut Vec<GradCheckEntry>,
    name: &str,
    params: &mut ParamStore<f64>,
    epsilon: f64,
    loss_fn: impl Fn(&ParamStore<f64>) -> LossAndGrads,
) -> Result<()> {
    let report = finite_diff_check(loss_fn, params, epsilon, GRADCHECK_TOLERANCE)
        .map_err(|e| Error::Numerical(format!("{name}: {e}")))?;
    let worst_param = report
        .per_param
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
        .map(|p| format!("{}[{}]", p.name, p.at_index))
        .unwrap_or_default();
    summary.push(GradCheckEntry {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        pass: report.passed(),
        worst_param,
    });
    Ok(())
}

fn check_into(
    summary: &mut Vec<GradCheckEntry>,
    name: &str,
    params: &mut ParamStore<f64>,
    loss_fn: impl Fn(&ParamStore<f64>) -> LossAndGrads,
) -> Result<()> {
    check_into_eps(summary, name, params, GRADCHECK_EPSILON, loss_fn)
}

/// Finite-difference verification of every differentiable operation, the
/// attention module, and the full fine-tuning loss on a mini detector.
pub fn gradcheck_all(draws: usize) -> Result<GradCheckSummary> {
    let mut checks = Vec::new();
    let mut rng = Rng::seed_from_u64(0x6AD);

    // elementary ops on randomized small shapes
    for draw in 0..draws {
        let m = 1 + rng.below(4);
        let k = 1 + rng.below(4);
        let n = 1 + rng.below(3);
        let mut params = ParamStore::<f64>::new();
        params.insert("a", Tensor::gaussian(vec![m, k], 1.0, &mut rng));
        params.insert("b", Tensor::gaussian(vec![k, n], 1.0, &mut rng));
        let classes: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
        let cls = classes.clone();
        check_into(
            &mut checks,
            &format!("matmul+softmax+ce[{draw}]"),
            &mut params,
            move |p| {
                let mut tape = Tape::<f64>::new();
                let a = tape.leaf(p.get("a")?.clone(), true);
                let b = tape.leaf(p.get("b")?.clone(), true);
                let c = tape.matmul(a, b)?;
                let y = tape.softmax_rows(c)?;
                let sum_y = tape.sum_all(y);
                let ce = tape.cross_entropy_sum(c, cls.clone())?;
                let loss = tape.add(sum_y, ce)?;
                let grads = tape.backward(loss)?;
                let mut out = BTreeMap::new();
                out.insert("a".to_string(), grads.wrt(&tape, a));
                out.insert("b".to_string(), grads.wrt(&tape, b));
                Ok((tape.value(loss).item(), out))
            },
        )?;
    }

    for draw in 0..draws {
        let h = 3 + rng.below(4);
        let w = 3 + rng.below(4);
        let c = 1 + rng.below(3);
        let kernel = 1 + rng.below(2);
        let stride = 1 + rng.below(2);
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::gaussian(vec![h, w, c], 1.0, &mut rng));
        check_into(
            &mut checks,
            &format!("pool-max-avg[{draw}]"),
            &mut params,
            move |p| {
                let mut tape = Tape::<f64>::new();
                let x = tape.leaf(p.get("x")?.clone(), true);
                let mx = tape.max_pool(x, kernel, stride, true)?;
                let av = tape.avg_pool(x, kernel, stride, true)?;
                let s1 = tape.sum_all(mx);
                let s2 = tape.sum_all(av);
                // weight the sums so the max branch is not drowned out
                let s1s = tape.scale(s1, 1.7);
                let loss = tape.add(s1s, s2)?;
                let grads = tape.backward(loss)?;
                let mut out = BTreeMap::new();
                out.insert("x".to_string(), grads.wrt(&tape, x));
                Ok((tape.value(loss).item(), out))
            },
        )?;
    }

    for draw in 0..draws {
        let h = 4 + rng.below(3);
        let cin = 1 + rng.below(2);
        let cout = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::gaussian(vec![h, h, cin], 1.0, &mut rng));
        params.insert("w", Tensor::gaussian(vec![3, 3, cin, cout], 0.5, &mut rng));
        params.insert("b", Tensor::gaussian(vec![cout], 0.5, &mut rng));
        check_into(
            &mut checks,
            &format!("conv+bias+relu[{draw}]"),
            &mut params,
            move |p| {
                let mut tape = Tape::<f64>::new();
                let x = tape.leaf(p.get("x")?.clone(), true);
                let w = tape.leaf(p.get("w")?.clone(), true);
                let b = tape.leaf(p.get("b")?.clone(), true);
                let y = tape.conv2d(x, w, stride, 1)?;
                let y = tape.add_bias(y, b)?;
                let y = tape.relu(y);
                let loss = tape.sum_all(y);
                let grads = tape.backward(loss)?;
                let mut out = BTreeMap::new();
                out.insert("x".to_string(), grads.wrt(&tape, x));
                out.insert("w".to_string(), grads.wrt(&tape, w));
                out.insert("b".to_string(), grads.wrt(&tape, b));
                Ok((tape.value(loss).item(), out))
            },
        )?;
    }

    for draw in 0..draws {
        let m = 2 + rng.below(3);
        let n = 2 + rng.below(2);
        let c = 2 + rng.below(3);
        let mut params = ParamStore::<f64>::new();
        params.insert("a", Tensor::gaussian(vec![m, c], 1.0, &mut rng));
        params.insert("b", Tensor::gaussian(vec![n, c], 1.0, &mut rng));
        check_into(
            &mut checks,
            &format!("sqdist+normalize[{draw}]"),
            &mut params,
            move |p| {
                let mut tape = Tape::<f64>::new();
                let a = tape.leaf(p.get("a")?.clone(), true);
                let b = tape.leaf(p.get("b")?.clone(), true);
                let an = tape.normalize_rows(a)?;
                let d = tape.pairwise_neg_sqdist(an, b)?;
                let sm = tape.softmax_rows(d)?;
                let loss = tape.sum_all(sm);
                let targets: Vec<f64> = (0..m * n).map(|i| (i % 2) as f64).collect();
                let bce = tape.bce_logits_sum(d, targets)?;
                let total = tape.add(loss, bce)?;
                let grads = tape.backward(total)?;
                let mut out = BTreeMap::new();
                out.insert("a".to_string(), grads.wrt(&tape, a));
                out.insert("b".to_string(), grads.wrt(&tape, b));
                Ok((tape.value(total).item(), out))
            },
        )?;
    }

    for draw in 0..draws {
        let m = 2 + rng.below(3);
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::gaussian(vec![m, 4], 1.0, &mut rng));
        let target: Vec<f64> = (0..m * 4).map(|_| rng.next_gaussian()).collect();
        check_into(
            &mut checks,
            &format!("smooth-l1[{draw}]"),
            &mut params,
            move |p| {
                let mut tape = Tape::<f64>::new();
                let x = tape.leaf(p.get("x")?.clone(), true);
                let loss = tape.smooth_l1_sum(x, target.iter().map(|&v| v).collect())?;
                let grads = tape.backward(loss)?;
                let mut out = BTreeMap::new();
                out.insert("x".to_string(), grads.wrt(&tape, x));
                Ok((tape.value(loss).item(), out))
            },
        )?;
    }

    // attention module: all weights plus the upstream scores
    {
        let grids = vec![
            crate::context::ScaleGrid { h: 2, w: 2, m: 1 },
            crate::context::ScaleGrid { h: 1, w: 1, m: 2 },
        ];
        let c_s = 5;
        let c_t = 3;
        let flags = CtFlags::default();
        let mut params = ParamStore::<f64>::new();
        // start away from zero so every path carries signal
        for name in [context::CT_F, context::CT_G, context::CT_H, context::CT_PHI] {
            params.insert(name, Tensor::gaussian(vec![c_s, c_s], 0.3, &mut rng));
        }
        params.insert(context::CT_THETA, Tensor::gaussian(vec![c_s, c_t], 0.3, &mut rng));
        for (k, g) in grids.iter().enumerate() {
            params.insert(
                format!("scores.k{k}"),
                Tensor::gaussian(vec![g.h, g.w, g.m * c_s], 1.0, &mut rng),
            );
        }
        let grids_c = grids.clone();
        let pooling = crate::context::PoolingConfig {
            per_scale: vec![Some((2, 2)), None],
            ceil_mode: true,
        };
        check_into(
            &mut checks,
            "attention-chain(f,g,h,phi,theta,P)",
            &mut params,
            move |p| {
                let mut tape = Tape::<f64>::new();
                let per_scale: Vec<crate::tensor::NodeId> = (0..grids_c.len())
                    .map(|k| Ok(tape.leaf(p.get(&format!("scores.k{k}"))?.clone(), true)))
                    .collect::<Result<Vec<_>>>()?;
                let scores =
                    SourceScoreSet::from_per_scale(&mut tape, per_scale.clone(), grids_c.clone(), c_s)?;
                let ct_ids = CtParamIds::leaf(&mut tape, p, grids_c.len(), &flags, true)?;
                let fwd = context::forward(&mut tape, &scores, &ct_ids, &pooling, &flags, false)?;
                let classes: Vec<usize> =
                    (0..tape.value(fwd.y_logits).shape()[0]).map(|r| r % c_t).collect();
                let loss = tape.cross_entropy_sum(fwd.y_logits, classes)?;
                let grads = tape.backward(loss)?;
                let mut out = BTreeMap::new();
                out.insert(context::CT_F.to_string(), grads.wrt(&tape, ct_ids.f.unwrap()));
                out.insert(context::CT_G.to_string(), grads.wrt(&tape, ct_ids.g.unwrap()));
                out.insert(context::CT_H.to_string(), grads.wrt(&tape, ct_ids.h.unwrap()));
                out.insert(context::CT_PHI.to_string(), grads.wrt(&tape, ct_ids.phi.unwrap()));
                out.insert(context::CT_THETA.to_string(), grads.wrt(&tape, ct_ids.thetas[0]));
                for (k, &id) in per_scale.iter().enumerate() {
                    out.insert(format!("scores.k{k}"), grads.wrt(&tape, id));
                }
                Ok((tape.value(loss).item(), out))
            },
        )?;
    }

    // full fine-tuning loss on the mini detector; FD over the most upstream
    // conv, the head biases, the attention weights, and the adapter covers
    // every backward path in one graph
    {
        let dcfg = gradcheck_detector_config();
        let bench = default_benchmark();
        let flags = CtFlags::default();
        let mut params = ParamStore::<f64>::new();
        let mut init_rng = Rng::seed_from_u64(0xF00D);
        detector::init_detector_params(&mut params, &dcfg, &mut init_rng);
        // re-randomize at a moderate scale: the training init leaves head
        // scores around 1e-3 (gradients under finite-difference noise), while
        // large weights push softmax tails below it; this band keeps every
        // checked element resolvable by central differences
        for name in params.names() {
            let shape = params.get(&name)?.shape().to_vec();
            let sigma = if name.ends_with(".b") { 0.08 } else { 0.12 };
            params.insert(name, Tensor::gaussian(shape, sigma, &mut init_rng));
        }
        // attention weights at O(1) so the gates are peaked; near-uniform
        // gates make the embedding gradients cancel to the noise floor
        for name in [context::CT_F, context::CT_G, context::CT_H, context::CT_PHI] {
            params.insert(name, Tensor::gaussian(vec![12, 12], 1.0, &mut init_rng));
        }
        params.insert(context::CT_THETA, Tensor::gaussian(vec![12, 4], 1.0, &mut init_rng));
        params.insert(INC_ADAPTER, Tensor::gaussian(vec![12, 12], 0.3, &mut init_rng));

        let image = Tensor::<f64>::gaussian(vec![8, 8, 3], 0.4, &mut init_rng);
        let gt = vec![
            (crate::anchors::BBox::new(0.5, 0.5, 0.42, 0.38), bench.source[2].id),
            (crate::anchors::BBox::new(0.4, 0.6, 0.55, 0.6), bench.target[1].id),
        ];
        let priors = dcfg.priors()?;
        let targets = detector::SceneTargets {
            boxes: gt
                .iter()
                .map(|&(b, id)| Ok((b, joint_class_index(&bench, id)?)))
                .collect::<Result<Vec<_>>>()?,
        };
        let checked: Vec<String> = vec![
            "backbone.conv1.w".into(),
            "backbone.conv1.b".into(),
            "head.bbox.k0.b".into(),
            "head.bg.k0.b".into(),
            "head.obj.k0.b".into(),
            context::CT_F.into(),
            context::CT_G.into(),
            context::CT_H.into(),
            context::CT_PHI.into(),
            context::CT_THETA.into(),
            INC_ADAPTER.into(),
        ];
        let dcfg_c = dcfg.clone();
        check_into_eps(
            &mut checks,
            "full-finetune-loss(mini-detector)",
            &mut params,
            GRADCHECK_FULL_MODEL_EPSILON,
            move |p| {
                let mut tape = Tape::<f64>::new();
                let ids = leaf_params(&mut tape, p, &|_| true);
                let image_id = tape.leaf(image.clone(), false);
                let fwd = detector::scene_forward(
                    &mut tape,
                    &ids,
                    image_id,
                    &dcfg_c,
                    detector::ClsPathway::Joint { flags },
                    false,
                )?;
                let parts = detector::multibox_loss(
                    &mut tape, fwd.loc, fwd.bg, fwd.cls_logits, &targets, &priors, 3,
                )?
                .ok_or_else(|| Error::Input("no positives in gradcheck scene".into()))?;
                let grads = tape.backward(parts.total)?;
                let mut out = BTreeMap::new();
                for name in &checked {
                    let id = ids
                        .get(name)
                        .copied()
                        .ok_or_else(|| Error::Parameter(format!("missing {name}")))?;
                    out.insert(name.clone(), grads.wrt(&tape, id));
                }
                Ok((tape.value(parts.total).item(), out))
            },
        )?;
    }

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(GradCheckSummary {
        tolerance: GRADCHECK_TOLERANCE,
        checks,
        all_pass,
    })
}

pub fn cmd_gradcheck(draws: usize) -> Result<(Value, bool)> {
    let summary = gradcheck_all(draws)?;
    for check in &summary.checks {
        println!(
            "{} {:<40} max rel err {:.3e} ({})",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.max_rel_err,
            check.worst_param
        );
    }
    let all = summary.all_pass;
    Ok((
        serde_json::to_value(&summary).map_err(|e| Error::Serde(e.to_string()))?,
        all,
    ))
}

/// Resolves an output directory, defaulting beneath `runs/`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>, name: &str) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(name))
}
