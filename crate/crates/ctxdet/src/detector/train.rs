//! Pretraining, transfer fine-tuning in every head-pathway variant, and
//! detection inference.

use super::loss::{multibox_loss, SceneTargets};
use super::{
    backbone_forward, heads_forward, init_detector_params, init_target_conv_params, leaf_params,
    target_conv_forward, DetectorConfig, ParamIds,
};
use crate::anchors::{decode_offsets, nms, PriorBoxSet};
use crate::context::{
    self, forward as ct_forward, init_ct_params, CtFlags, CtMode, CtParamIds,
    ThetaMode, CT_THETA,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::synthdata::{source_train_scene, Benchmark, Scene};
use crate::tensor::{sgd_step, LrSchedule, NodeId, OptimizerState, ParamStore, Real, Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ── Variants ─────────────────────────────────────────────────────────

/// Head-pathway variants: which classifier produces target scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fresh per-scale conv classifier on backbone features; the source
    /// classifier is dropped.
    Baseline,
    /// Target matrix directly on preserved source scores, no attention.
    SourceOnly,
    /// Attention pathway on a re-initialized (not preserved) score head.
    TransformerOnly,
    /// Preserved source scores plus the attention pathway.
    #[default]
    Full,
    /// Trains like `Full`, drops the attention stages at inference.
    UnloadAtTest,
    /// Self-attention among prior boxes, no field construction.
    NonLocal,
}

impl Variant {
    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            Variant::TransformerOnly | Variant::Full | Variant::UnloadAtTest | Variant::NonLocal
        )
    }

    /// Folds the variant into the module mode flag.
    pub fn effective_flags(self, base: CtFlags) -> CtFlags {
        let mode = match self {
            Variant::UnloadAtTest => CtMode::UnloadAtTest,
            Variant::NonLocal => CtMode::NonLocal,
            _ => CtMode::Full,
        };
        CtFlags { mode, ..base }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Variant::Baseline),
            "source-only" => Ok(Variant::SourceOnly),
            "transformer-only" => Ok(Variant::TransformerOnly),
            "full" => Ok(Variant::Full),
            "unload-at-test" => Ok(Variant::UnloadAtTest),
            "non-local" => Ok(Variant::NonLocal),
            other => Err(Error::Parameter(format!(
                "unknown variant {other:?} (expected baseline, source-only, \
                 transformer-only, full, unload-at-test, non-local)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SourceOnly => "source-only",
            Variant::TransformerOnly => "transformer-only",
            Variant::Full => "full",
            Variant::UnloadAtTest => "unload-at-test",
            Variant::NonLocal => "non-local",
        }
    }
}

/// Trainability of a transferred head group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Initialized from the source checkpoint and trained.
    #[default]
    Finetune,
    /// Same trainability as `Finetune`; names the intent for the score head,
    /// whose source weights are kept rather than re-initialized.
    Preserve,
    /// Kept bit-identical through fine-tuning.
    Freeze,
}

impl HeadMode {
    fn frozen(self) -> bool {
        self == HeadMode::Freeze
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransferConfig {
    pub backbone: HeadMode,
    pub bbox: HeadMode,
    pub bg: HeadMode,
    pub source_obj: HeadMode,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            backbone: HeadMode::Finetune,
            bbox: HeadMode::Finetune,
            bg: HeadMode::Finetune,
            source_obj: HeadMode::Preserve,
        }
    }
}

impl TransferConfig {
    pub fn is_frozen(&self, name: &str) -> bool {
        if name.starts_with("backbone.") {
            self.backbone.frozen()
        } else if name.starts_with("head.bbox.") {
            self.bbox.frozen()
        } else if name.starts_with("head.bg.") {
            self.bg.frozen()
        } else if name.starts_with("head.obj.") {
            self.source_obj.frozen()
        } else {
            false
        }
    }
}

// ── Training configuration ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCfg {
    pub steps: u64,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<(u64, f64)>,
    pub hnm_ratio: usize,
    pub seed: u64,
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub loss_loc: f64,
    pub loss_bg: f64,
    pub loss_cls: f64,
    pub lr: f64,
}

/// Trailing-window trend check: the mean over the last `window` steps must
/// sit below the mean over the first `window`.
pub fn loss_trend_decreasing(logs: &[StepLog], window: usize) -> bool {
    if logs.len() < 2 {
        return false;
    }
    let w = window.min(logs.len() / 2).max(1);
    let head: f64 = logs[..w].iter().map(|l| l.loss).sum::<f64>() / w as f64;
    let tail: f64 = logs[logs.len() - w..].iter().map(|l| l.loss).sum::<f64>() / w as f64;
    tail < head
}

// ── Classification pathways ──────────────────────────────────────────

/// Which logits feed the classification term.
#[derive(Clone, Copy)]
pub(crate) enum ClsPathway {
    /// Source scores P (pretraining).
    Source,
    /// One of the target-domain variants.
    Target { variant: Variant, flags: CtFlags },
    /// Adapter-corrected source logits concatenated with target logits.
    Joint { flags: CtFlags },
}

pub(crate) struct SceneForward {
    pub cls_logits: NodeId,
    pub loc: NodeId,
    pub bg: NodeId,
    /// Raw affinity matrix when an attention pathway ran.
    pub affinity: Option<NodeId>,
    pub field_provenance: Option<Vec<crate::anchors::Provenance>>,
    /// Row-wise class probabilities for inference.
    pub probs: NodeId,
}

pub(crate) fn scene_forward<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    image: NodeId,
    dcfg: &DetectorConfig,
    pathway: ClsPathway,
    inference: bool,
) -> Result<SceneForward> {
    let features = backbone_forward(tape, ids, image, dcfg)?;
    let heads = heads_forward(tape, ids, &features, dcfg)?;
    let (cls_logits, affinity, provenance) = match pathway {
        ClsPathway::Source => (heads.scores.flat, None, None),
        ClsPathway::Target { variant, flags } => match variant {
            Variant::Baseline => {
                let logits = target_conv_forward(tape, ids, &features, dcfg)?;
                (logits, None, None)
            }
            Variant::SourceOnly => {
                let theta_flags = CtFlags {
                    embedding: context::EmbeddingMode::None,
                    theta: flags.theta,
                    ..CtFlags::default()
                };
                let ct_ids = ct_ids_from_map(ids, dcfg.num_scales(), &theta_flags)?;
                let (logits, _) = context::target_obj(
                    tape,
                    heads.scores.flat,
                    &ct_ids,
                    &heads.scores.grids,
                    &theta_flags,
                )?;
                (logits, None, None)
            }
            _ => {
                let eff = variant.effective_flags(flags);
                let ct_ids = ct_ids_from_map(ids, dcfg.num_scales(), &eff)?;
                let out = ct_forward(tape, &heads.scores, &ct_ids, &dcfg.pooling, &eff, inference)?;
                (
                    out.y_logits,
                    out.affinity,
                    out.fields.map(|f| f.provenance),
                )
            }
        },
        ClsPathway::Joint { flags } => {
            let adapter = ids
                .get(crate::incremental::INC_ADAPTER)
                .copied()
                .ok_or_else(|| Error::Parameter("missing incremental adapter".into()))?;
            let corrected = {
                let pa = tape.matmul(heads.scores.flat, adapter)?;
                tape.add(heads.scores.flat, pa)?
            };
            let eff = Variant::Full.effective_flags(flags);
            let ct_ids = ct_ids_from_map(ids, dcfg.num_scales(), &eff)?;
            let out = ct_forward(tape, &heads.scores, &ct_ids, &dcfg.pooling, &eff, inference)?;
            let logits = tape.concat_cols(corrected, out.y_logits)?;
            (logits, out.affinity, out.fields.map(|f| f.provenance))
        }
    };
    let probs = tape.softmax_rows(cls_logits)?;
    Ok(SceneForward {
        cls_logits,
        loc: heads.loc,
        bg: heads.bg,
        affinity,
        field_provenance: provenance,
        probs,
    })
}

/// Builds context-module ids from an already-leafed parameter map.
fn ct_ids_from_map(ids: &ParamIds, num_scales: usize, flags: &CtFlags) -> Result<CtParamIds> {
    let find = |name: &str| -> Result<NodeId> {
        ids.get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name:?} on tape")))
    };
    let (f, g, h, phi) = if flags.embedding == context::EmbeddingMode::None {
        (None, None, None, None)
    } else {
        (
            Some(find(context::CT_F)?),
            Some(find(context::CT_G)?),
            Some(find(context::CT_H)?),
            Some(find(context::CT_PHI)?),
        )
    };
    let thetas = match flags.theta {
        ThetaMode::Shared => vec![find(CT_THETA)?],
        ThetaMode::PerScale => (0..num_scales)
            .map(|k| find(&context::theta_name(k)))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(CtParamIds { f, g, h, phi, thetas })
}

// ── Training loop ────────────────────────────────────────────────────

struct SceneGrad<F: Real> {
    grads: BTreeMap<String, Tensor<F>>,
    loss: f64,
    parts: (f64, f64, f64),
}

#[allow(clippy::too_many_arguments)]
fn scene_gradient<F: Real>(
    store: &ParamStore<F>,
    scene: &Scene,
    targets: &SceneTargets,
    dcfg: &DetectorConfig,
    priors: &PriorBoxSet,
    pathway: ClsPathway,
    hnm_ratio: usize,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Option<SceneGrad<F>>> {
    let mut tape = Tape::new();
    let ids = leaf_params(&mut tape, store, trainable);
    let image = tape.leaf(scene.image.cast::<F>(), false);
    let fwd = scene_forward(&mut tape, &ids, image, dcfg, pathway, false)?;
    let Some(parts) = multibox_loss(
        &mut tape,
        fwd.loc,
        fwd.bg,
        fwd.cls_logits,
        targets,
        priors,
        hnm_ratio,
    )?
    else {
        return Ok(None);
    };
    let grads_all = tape.backward(parts.total)?;
    let mut grads = BTreeMap::new();
    for (name, &id) in &ids {
        if tape.value(id).requires_grad {
            grads.insert(name.clone(), grads_all.wrt(&tape, id));
        }
    }
    Ok(Some(SceneGrad {
        grads,
        loss: tape.value(parts.total).item().to_f64(),
        parts: (parts.loc, parts.bg, parts.cls),
    }))
}

/// Shared SGD loop over a scene sampler.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_training<F: Real>(
    store: &mut ParamStore<F>,
    dcfg: &DetectorConfig,
    tcfg: &TrainCfg,
    pathway: ClsPathway,
    transfer: &TransferConfig,
    sample_batch: &(dyn Fn(u64) -> Result<Vec<(Scene, SceneTargets)>> + Sync),
) -> Result<Vec<StepLog>> {
    let priors = dcfg.priors()?;
    let mut optimizer = OptimizerState::<F>::new(
        tcfg.learning_rate,
        tcfg.momentum,
        tcfg.weight_decay,
        LrSchedule::new(tcfg.milestones.clone()),
    )?;
    for name in store.names() {
        if transfer.is_frozen(&name) {
            optimizer.freeze(name);
        }
    }
    let trainable = |name: &str| !transfer.is_frozen(name);
    let mut logs = Vec::with_capacity(tcfg.steps as usize);

    for step in 0..tcfg.steps {
        let batch = sample_batch(step)?;
        let outcomes: Vec<Option<SceneGrad<F>>> = batch
            .par_iter()
            .map(|(scene, targets)| {
                scene_gradient(
                    store, scene, targets, dcfg, &priors, pathway, tcfg.hnm_ratio, &trainable,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let contributing: Vec<SceneGrad<F>> = outcomes.into_iter().flatten().collect();
        if contributing.is_empty() {
            continue;
        }
        let inv = F::from_f64(1.0 / contributing.len() as f64);
        let mut merged: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        let mut loss = 0.0;
        let mut parts = (0.0, 0.0, 0.0);
        for scene_grad in &contributing {
            loss += scene_grad.loss;
            parts.0 += scene_grad.parts.0;
            parts.1 += scene_grad.parts.1;
            parts.2 += scene_grad.parts.2;
            for (name, g) in &scene_grad.grads {
                match merged.get_mut(name) {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v * inv;
                        }
                    }
                    None => {
                        let mut scaled = g.clone();
                        for v in scaled.data_mut() {
                            *v *= inv;
                        }
                        merged.insert(name.clone(), scaled);
                    }
                }
            }
        }
        let n = contributing.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "loss diverged at step {step}: total={loss} loc={} bg={} cls={}",
                parts.0 / n,
                parts.1 / n,
                parts.2 / n
            )));
        }
        sgd_step(store, &merged, &mut optimizer, step)?;
        logs.push(StepLog {
            step,
            loss,
            loss_loc: parts.0 / n,
            loss_bg: parts.1 / n,
            loss_cls: parts.2 / n,
            lr: optimizer.lr_at(step),
        });
    }
    Ok(logs)
}

fn scene_targets(scene: &Scene, map_class: &dyn Fn(usize) -> Result<usize>) -> Result<SceneTargets> {
    let boxes = scene
        .annotations
        .iter()
        .map(|a| Ok((a.bbox, map_class(a.class_id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneTargets { boxes })
}

/// Trains the detector from scratch on the seeded source-domain stream.
pub fn pretrain_source<F: Real>(
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    tcfg: &TrainCfg,
) -> Result<(ParamStore<F>, Vec<StepLog>)> {
    let mut store = ParamStore::<F>::new();
    let mut rng = Rng::seed_from_u64(derive_seed(tcfg.seed, 0x1217));
    init_detector_params(&mut store, dcfg, &mut rng);
    let transfer = TransferConfig::default();
    let map = |class_id: usize| {
        bench
            .source_index(class_id)
            .ok_or_else(|| Error::Input(format!("class {class_id} not in the source set")))
    };
    let logs = run_training(
        &mut store,
        dcfg,
        tcfg,
        ClsPathway::Source,
        &transfer,
        &|step| {
            (0..tcfg.batch)
                .map(|i| {
                    let scene =
                        source_train_scene(bench, step * tcfg.batch as u64 + i as u64, tcfg.seed)?;
                    let targets = scene_targets(&scene, &map)?;
                    Ok((scene, targets))
                })
                .collect()
        },
    )?;
    Ok((store, logs))
}

/// Builds the fine-tuning parameter set for a variant from a pretrained
/// store: transferred heads are copied; the score head is preserved,
/// re-initialized, or dropped; pathway-specific weights are added.
pub fn setup_finetune<F: Real>(
    source: &ParamStore<F>,
    dcfg: &DetectorConfig,
    variant: Variant,
    flags: &CtFlags,
    seed: u64,
) -> Result<ParamStore<F>> {
    let mut store = ParamStore::<F>::new();
    for (name, tensor) in source.iter() {
        let is_obj = name.starts_with("head.obj.");
        let keep = match variant {
            Variant::Baseline => !is_obj,
            _ => true,
        };
        if keep && !is_obj {
            store.insert(name.clone(), tensor.clone());
        }
        if keep && is_obj && variant != Variant::TransformerOnly {
            store.insert(name.clone(), tensor.clone());
        }
    }
    let mut rng = Rng::seed_from_u64(derive_seed(seed, 0xF17E));
    match variant {
        Variant::Baseline => {
            init_target_conv_params(&mut store, dcfg, &mut rng);
        }
        Variant::SourceOnly => {
            match flags.theta {
                ThetaMode::Shared => store.insert(
                    CT_THETA,
                    Tensor::gaussian(
                        vec![dcfg.num_source_classes, dcfg.num_target_classes],
                        0.01,
                        &mut rng,
                    ),
                ),
                ThetaMode::PerScale => {
                    for k in 0..dcfg.num_scales() {
                        store.insert(
                            context::theta_name(k),
                            Tensor::gaussian(
                                vec![dcfg.num_source_classes, dcfg.num_target_classes],
                                0.01,
                                &mut rng,
                            ),
                        );
                    }
                }
            }
        }
        Variant::TransformerOnly => {
            // fresh score head: same architecture, no preserved knowledge
            let mut fresh = ParamStore::<F>::new();
            init_detector_params(&mut fresh, dcfg, &mut rng);
            for (name, tensor) in fresh.iter() {
                if name.starts_with("head.obj.") {
                    store.insert(name.clone(), tensor.clone());
                }
            }
            init_ct_params(
                &mut store,
                dcfg.num_source_classes,
                dcfg.num_target_classes,
                dcfg.num_scales(),
                flags,
                &mut rng,
            );
        }
        _ => {
            init_ct_params(
                &mut store,
                dcfg.num_source_classes,
                dcfg.num_target_classes,
                dcfg.num_scales(),
                flags,
                &mut rng,
            );
        }
    }
    Ok(store)
}

/// Fine-tunes a variant on target-domain training scenes.
#[allow(clippy::too_many_arguments)]
pub fn finetune<F: Real>(
    bench: &Benchmark,
    dcfg: &DetectorConfig,
    tcfg: &TrainCfg,
    variant: Variant,
    flags: &CtFlags,
    transfer: &TransferConfig,
    source: &ParamStore<F>,
    train_scenes: &[Scene],
) -> Result<(ParamStore<F>, Vec<StepLog>)> {
    if train_scenes.is_empty() {
        return Err(Error::Parameter("no training scenes".into()));
    }
    let mut store = setup_finetune(source, dcfg, variant, flags, tcfg.seed)?;
    let map = |class_id: usize| {
        bench
            .target_index(class_id)
            .ok_or_else(|| Error::Input(format!("class {class_id} not in the target set")))
    };
    let prepared: Vec<(Scene, SceneTargets)> = train_scenes
        .iter()
        .map(|s| Ok((s.clone(), scene_targets(s, &map)?)))
        .collect::<Result<Vec<_>>>()?;
    let logs = run_training(
        &mut store,
        dcfg,
        tcfg,
        ClsPathway::Target {
            variant,
            flags: *flags,
        },
        transfer,
        &|step| {
            let mut rng = Rng::seed_from_u64(derive_seed(tcfg.seed, 0xBA7C ^ step));
            Ok((0..tcfg.batch)
                .map(|_| {
                    let pick = rng.below(prepared.len());
                    (prepared[pick].0.clone(), SceneTargets {
                        boxes: prepared[pick].1.boxes.clone(),
                    })
                })
                .collect())
        },
    )?;
    Ok((store, logs))
}

/// Joint-pathway forward exposed for debugging examples; returns
/// (loc, bg, cls_logits).
pub fn scene_forward_dbg<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    image: NodeId,
    dcfg: &DetectorConfig,
    flags: CtFlags,
) -> Result<(NodeId, NodeId, NodeId)> {
    let fwd = scene_forward(tape, ids, image, dcfg, ClsPathway::Joint { flags }, false)?;
    Ok((fwd.loc, fwd.bg, fwd.cls_logits))
}

/// Incremental fine-tuning: joint-head pathway over a fixed prepared set,
/// sampled with replacement per step.
pub fn run_incremental_training<F: Real>(
    store: &mut ParamStore<F>,
    dcfg: &DetectorConfig,
    tcfg: &TrainCfg,
    flags: CtFlags,
    prepared: &[(Scene, SceneTargets)],
) -> Result<Vec<StepLog>> {
    if prepared.is_empty() {
        return Err(Error::Parameter("no incremental training scenes".into()));
    }
    run_training(
        store,
        dcfg,
        tcfg,
        ClsPathway::Joint { flags },
        &TransferConfig::default(),
        &|step| {
            let mut rng = Rng::seed_from_u64(derive_seed(tcfg.seed, 0x1BC7 ^ step));
            Ok((0..tcfg.batch)
                .map(|_| {
                    let pick = rng.below(prepared.len());
                    (
                        prepared[pick].0.clone(),
                        SceneTargets {
                            boxes: prepared[pick].1.boxes.clone(),
                        },
                    )
                })
                .collect())
        },
    )
}

// ── Inference ────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct Detection {
    pub bbox: crate::anchors::BBox,
    pub class_index: usize,
    pub score: f64,
}

pub const SCORE_THRESHOLD: f64 = 0.01;
pub const NMS_IOU: f64 = 0.45;
pub const TOP_K: usize = 200;

/// Runs one image through a pathway and post-processes detections:
/// decoded boxes scored by sigmoid(objectness) x class probability,
/// thresholded, per-class NMS, global top-k.
pub fn predict_scene<F: Real>(
    store: &ParamStore<F>,
    scene: &Scene,
    dcfg: &DetectorConfig,
    priors: &PriorBoxSet,
    pathway: ClsPathwayPublic,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let ids = leaf_params(&mut tape, store, &|_| false);
    let image = tape.leaf(scene.image.cast::<F>(), false);
    let fwd = scene_forward(&mut tape, &ids, image, dcfg, pathway.into_internal(), true)?;
    let loc = tape.value(fwd.loc);
    let bg = tape.value(fwd.bg);
    let probs = tape.value(fwd.probs);
    let (d_p, n_classes) = probs.dims2()?;

    let mut detections = Vec::new();
    for class in 0..n_classes {
        let mut candidates = Vec::new();
        for pi in 0..d_p {
            let obj = crate::tensor::kernels::sigmoid(bg.data()[pi]).to_f64();
            let score = obj * probs.data()[pi * n_classes + class].to_f64();
            if score > SCORE_THRESHOLD {
                let offsets = [
                    loc.data()[pi * 4].to_f64(),
                    loc.data()[pi * 4 + 1].to_f64(),
                    loc.data()[pi * 4 + 2].to_f64(),
                    loc.data()[pi * 4 + 3].to_f64(),
                ];
                candidates.push((decode_offsets(&offsets, &priors.boxes[pi]), score));
            }
        }
        for (bbox, score) in nms(&candidates, NMS_IOU, TOP_K) {
            detections.push(Detection {
                bbox,
                class_index: class,
                score,
            });
        }
    }
    detections.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.class_index.cmp(&b.class_index))
    });
    detections.truncate(TOP_K);
    Ok(detections)
}

/// Public pathway selector for inference.
#[derive(Clone, Copy)]
pub enum ClsPathwayPublic {
    Source,
    Target { variant: Variant, flags: CtFlags },
    Joint { flags: CtFlags },
}

impl ClsPathwayPublic {
    pub(crate) fn into_internal(self) -> ClsPathway {
        match self {
            ClsPathwayPublic::Source => ClsPathway::Source,
            ClsPathwayPublic::Target { variant, flags } => ClsPathway::Target { variant, flags },
            ClsPathwayPublic::Joint { flags } => ClsPathway::Joint { flags },
        }
    }
}

/// Parallel inference over many scenes, order-preserving.
pub fn predict_with<F: Real>(
    store: &ParamStore<F>,
    scenes: &[Scene],
    dcfg: &DetectorConfig,
    pathway: ClsPathwayPublic,
) -> Result<Vec<Vec<Detection>>> {
    let priors = dcfg.priors()?;
    scenes
        .par_iter()
        .map(|scene| predict_scene(store, scene, dcfg, &priors, pathway))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::default_benchmark;

    fn tiny_cfg() -> TrainCfg {
        TrainCfg {
            steps: 3,
            batch: 2,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![],
            hnm_ratio: 3,
            seed: 7,
        }
    }

    #[test]
    fn pretrain_steps_produce_logs_and_finite_loss() {
        let bench = default_benchmark();
        let dcfg = DetectorConfig::toy(12, 4);
        let (store, logs) = pretrain_source::<f32>(&bench, &dcfg, &tiny_cfg()).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(logs.iter().all(|l| l.loss.is_finite()));
        assert!(store.contains("backbone.conv1.w"));
        assert_eq!(store.step, 3);
    }

    #[test]
    fn setup_finetune_per_variant() {
        let _bench = default_benchmark();
        let dcfg = DetectorConfig::toy(12, 4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(1);
        init_detector_params(&mut store, &dcfg, &mut rng);
        let flags = CtFlags::default();

        let baseline = setup_finetune(&store, &dcfg, Variant::Baseline, &flags, 3).unwrap();
        assert!(!baseline.contains("head.obj.k0.w"));
        assert!(baseline.contains("head.tgt.k0.w"));
        assert!(!baseline.contains(CT_THETA));

        let source_only = setup_finetune(&store, &dcfg, Variant::SourceOnly, &flags, 3).unwrap();
        assert!(source_only.contains("head.obj.k0.w"));
        assert!(source_only.contains(CT_THETA));
        assert!(!source_only.contains(context::CT_F));
        // preserved bits
        assert_eq!(
            source_only.get("head.obj.k0.w").unwrap().data(),
            store.get("head.obj.k0.w").unwrap().data()
        );

        let full = setup_finetune(&store, &dcfg, Variant::Full, &flags, 3).unwrap();
        assert!(full.contains(context::CT_F));
        assert_eq!(
            full.get("head.obj.k0.w").unwrap().data(),
            store.get("head.obj.k0.w").unwrap().data()
        );

        let t_only = setup_finetune(&store, &dcfg, Variant::TransformerOnly, &flags, 3).unwrap();
        assert!(t_only.contains(context::CT_F));
        assert_ne!(
            t_only.get("head.obj.k0.w").unwrap().data(),
            store.get("head.obj.k0.w").unwrap().data()
        );
    }

    #[test]
    fn frozen_heads_stay_bit_identical() {
        let bench = default_benchmark();
        let dcfg = DetectorConfig::toy(12, 4);
        let (source, _) = pretrain_source::<f32>(&bench, &dcfg, &tiny_cfg()).unwrap();
        let episode = crate::synthdata::sample_episode(
            &bench,
            &crate::synthdata::EpisodeSpec { shots: 1, trial: 0, seed: 4 },
        )
        .unwrap();
        let transfer = TransferConfig {
            bg: HeadMode::Freeze,
            ..Default::default()
        };
        let before: Vec<f32> = source.get("head.bg.k0.w").unwrap().data().to_vec();
        let (tuned, _) = finetune(
            &bench,
            &dcfg,
            &tiny_cfg(),
            Variant::Full,
            &CtFlags::default(),
            &transfer,
            &source,
            &episode.train,
        )
        .unwrap();
        let after = tuned.get("head.bg.k0.w").unwrap().data();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and a non-frozen head moved
        assert_ne!(
            source.get("head.bbox.k0.w").unwrap().data(),
            tuned.get("head.bbox.k0.w").unwrap().data()
        );
    }

    #[test]
    fn predictions_scored_in_unit_interval() {
        let bench = default_benchmark();
        let dcfg = DetectorConfig::toy(12, 4);
        let (store, _) = pretrain_source::<f32>(&bench, &dcfg, &tiny_cfg()).unwrap();
        let scene = source_train_scene(&bench, 0, 3).unwrap();
        let priors = dcfg.priors().unwrap();
        let dets = predict_scene(
            &store,
            &scene,
            &dcfg,
            &priors,
            ClsPathwayPublic::Source,
        )
        .unwrap();
        for d in &dets {
            assert!(d.score > 0.0 && d.score < 1.0);
            let (x0, y0, x1, y1) = d.bbox.corners();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0);
        }
        assert!(dets.len() <= TOP_K);
    }
}
