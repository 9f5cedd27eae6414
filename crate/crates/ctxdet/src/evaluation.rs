//! VOC-style evaluation: per-class average precision at IoU 0.5 and the
//! per-class confusion decomposition (correct / localized-but-misclassified /
//! missed).

use crate::anchors::{iou, BBox};
use crate::detector::Detection;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// One class's detections across scenes.
#[derive(Clone, Debug)]
pub struct DetRecord {
    pub scene: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct GtRecord {
    pub scene: usize,
    pub bbox: BBox,
}

/// Greedy score-ordered matching (each ground truth claimable once) and
/// precision-recall integration.
///
/// Returns `None` when the class has neither ground truth nor detections
/// (skipped from the mean); zero ground truth with detections scores 0.
pub fn average_precision(
    dets: &[DetRecord],
    gts: &[GtRecord],
    iou_thresh: f64,
    interpolation: Interpolation,
) -> Option<f64> {
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    if dets.is_empty() {
        return Some(0.0);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        by_scene.entry(gt.scene).or_default().push(gi);
    }
    let mut matched = vec![false; gts.len()];
    let mut tp = vec![0.0f64; dets.len()];
    let mut fp = vec![0.0f64; dets.len()];
    for (rank, &di) in order.iter().enumerate() {
        let det = &dets[di];
        // best-IoU ground truth in the same scene
        let mut best: Option<(f64, usize)> = None;
        if let Some(scene_gts) = by_scene.get(&det.scene) {
            for &gi in scene_gts {
                let v = iou(&det.bbox, &gts[gi].bbox);
                if v >= iou_thresh && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
        }
        match best {
            Some((_, gi)) if !matched[gi] => {
                matched[gi] = true;
                tp[rank] = 1.0;
            }
            _ => fp[rank] = 1.0,
        }
    }

    let mut cum_tp = 0.0;
    let mut cum_fp = 0.0;
    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for i in 0..dets.len() {
        cum_tp += tp[i];
        cum_fp += fp[i];
        precision.push(cum_tp / (cum_tp + cum_fp));
        recall.push(cum_tp / n_gt);
    }

    Some(match interpolation {
        Interpolation::AllPoint => {
            // precision envelope, then sum over recall increments
            let mut env = precision.clone();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for i in 0..env.len() {
                let r = recall[i];
                if r > prev_r {
                    ap += (r - prev_r) * env[i];
                    prev_r = r;
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut acc = 0.0;
            for t in 0..=10 {
                let t = t as f64 / 10.0;
                let p = precision
                    .iter()
                    .zip(&recall)
                    .filter(|(_, &r)| r >= t)
                    .map(|(&p, _)| p)
                    .fold(0.0f64, f64::max);
                acc += p;
            }
            acc / 11.0
        }
    })
}

/// Per-class tally of the confusion decomposition.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConfusionTriple {
    pub correct: usize,
    /// Localized by a detection of the wrong class.
    pub confused: usize,
    pub missed: usize,
}

impl ConfusionTriple {
    pub fn total(&self) -> usize {
        self.correct + self.confused + self.missed
    }

    pub fn percentages(&self) -> (f64, f64, f64) {
        let t = self.total().max(1) as f64;
        (
            100.0 * self.correct as f64 / t,
            100.0 * self.confused as f64 / t,
            100.0 * self.missed as f64 / t,
        )
    }
}

/// For every ground truth, the highest-scoring detection of any class with
/// IoU >= `iou_thresh` and score >= `score_floor` decides its fate: correct
/// class, wrong class (confusion), or no such detection (miss).
pub fn confusion_breakdown(
    dets: &[(usize, usize, BBox, f64)],
    gts: &[(usize, usize, BBox)],
    iou_thresh: f64,
    score_floor: f64,
) -> BTreeMap<usize, ConfusionTriple> {
    let mut out: BTreeMap<usize, ConfusionTriple> = BTreeMap::new();
    for &(scene, gt_class, gt_box) in gts {
        let entry = out.entry(gt_class).or_default();
        let mut best: Option<(f64, usize, usize)> = None; // score, det index, det class
        for (di, &(d_scene, d_class, d_box, d_score)) in dets.iter().enumerate() {
            if d_scene != scene || d_score < score_floor {
                continue;
            }
            if iou(&d_box, &gt_box) < iou_thresh {
                continue;
            }
            if best.map_or(true, |(s, i, _)| d_score > s || (d_score == s && di < i)) {
                best = Some((d_score, di, d_class));
            }
        }
        match best {
            Some((_, _, class)) if class == gt_class => entry.correct += 1,
            Some(_) => entry.confused += 1,
            None => entry.missed += 1,
        }
    }
    out
}

// ── Reports ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_index: usize,
    pub name: String,
    /// Absent for classes with no ground truth and no detections.
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub correct_pct: f64,
    pub confused_pct: f64,
    pub missed_pct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub classes: Vec<ClassReport>,
    pub skipped_classes: Vec<usize>,
    pub meta: serde_json::Value,
}

impl EvalReport {
    /// Plain-text table: one row per class plus the mean.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>7} {:>6} {:>6} {:>6} {:>9} {:>9} {:>8}\n",
            "class", "AP", "GT", "TP", "FP", "correct%", "wrong%", "missed%"
        ));
        for c in &self.classes {
            out.push_str(&format!(
                "{:<18} {:>7} {:>6} {:>6} {:>6} {:>9.1} {:>9.1} {:>8.1}\n",
                c.name,
                c.ap.map_or("-".to_string(), |v| format!("{v:.4}")),
                c.gt_count,
                c.tp,
                c.fp,
                c.correct_pct,
                c.confused_pct,
                c.missed_pct
            ));
        }
        out.push_str(&format!("{:<18} {:>7.4}\n", "mAP", self.map));
        out
    }
}

/// Assembles AP, counts, and the confusion triple for every class.
pub fn evaluate_detections(
    per_scene_dets: &[Vec<Detection>],
    per_scene_gts: &[Vec<(usize, BBox)>],
    class_names: &[String],
    iou_thresh: f64,
    interpolation: Interpolation,
    score_floor: f64,
    meta: serde_json::Value,
) -> EvalReport {
    let num_classes = class_names.len();
    let mut flat_dets: Vec<(usize, usize, BBox, f64)> = Vec::new();
    for (scene, dets) in per_scene_dets.iter().enumerate() {
        for d in dets {
            flat_dets.push((scene, d.class_index, d.bbox, d.score));
        }
    }
    let mut flat_gts: Vec<(usize, usize, BBox)> = Vec::new();
    for (scene, gts) in per_scene_gts.iter().enumerate() {
        for &(class, bbox) in gts {
            flat_gts.push((scene, class, bbox));
        }
    }
    let confusion = confusion_breakdown(&flat_dets, &flat_gts, iou_thresh, score_floor);

    let mut classes = Vec::with_capacity(num_classes);
    let mut skipped = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for class in 0..num_classes {
        let dets: Vec<DetRecord> = flat_dets
            .iter()
            .filter(|(_, c, _, _)| *c == class)
            .map(|&(scene, _, bbox, score)| DetRecord { scene, bbox, score })
            .collect();
        let gts: Vec<GtRecord> = flat_gts
            .iter()
            .filter(|(_, c, _)| *c == class)
            .map(|&(scene, _, bbox)| GtRecord { scene, bbox })
            .collect();
        let ap = average_precision(&dets, &gts, iou_thresh, interpolation);
        match ap {
            Some(v) => {
                ap_sum += v;
                ap_n += 1;
            }
            None => skipped.push(class),
        }
        let (tp, fp, fn_count) = match_counts(&dets, &gts, iou_thresh);
        let triple = confusion.get(&class).copied().unwrap_or_default();
        let (correct_pct, confused_pct, missed_pct) = triple.percentages();
        classes.push(ClassReport {
            class_index: class,
            name: class_names[class].clone(),
            ap,
            gt_count: gts.len(),
            tp,
            fp,
            fn_count,
            correct_pct,
            confused_pct,
            missed_pct,
        });
    }
    EvalReport {
        map: if ap_n > 0 { ap_sum / ap_n as f64 } else { 0.0 },
        classes,
        skipped_classes: skipped,
        meta,
    }
}

fn match_counts(dets: &[DetRecord], gts: &[GtRecord], iou_thresh: f64) -> (usize, usize, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.scene != det.scene {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_thresh && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        if let Some((_, gi)) = best {
            if !matched[gi] {
                matched[gi] = true;
                tp += 1;
            }
        }
    }
    (tp, dets.len() - tp, gts.len() - tp)
}
