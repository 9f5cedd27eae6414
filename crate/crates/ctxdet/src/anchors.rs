//! Multi-scale prior boxes, IoU, ground-truth matching, offset coding, and
//! non-maximum suppression. All geometry is f64 in normalized [0,1] image
//! coordinates.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Center-size box in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection-over-union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Grid extents and box parameters for one feature scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Aspect ratios; determines the per-cell box count M_k.
    pub ratios: Vec<f64>,
    /// Base box side as a fraction of the image side.
    pub base_size: f64,
}

impl ScaleSpec {
    pub fn num_ratios(&self) -> usize {
        self.ratios.len()
    }
}

/// Where a prior (or context field) came from: scale, cell, and ratio slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scale: usize,
    pub cell: (usize, usize),
    pub ratio: usize,
}

/// All prior boxes of a detector, flattened in the canonical order:
/// ascending scale, then row-major cells, then ratio index. Every score
/// matrix in the crate uses this same row order.
#[derive(Clone, Debug)]
pub struct PriorBoxSet {
    pub scales: Vec<ScaleSpec>,
    pub boxes: Vec<BBox>,
    pub provenance: Vec<Provenance>,
}

impl PriorBoxSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tiles prior boxes over every scale in the documented flattening order.
pub fn generate_priors(scales: &[ScaleSpec]) -> Result<PriorBoxSet> {
    if scales.is_empty() {
        return Err(Error::Parameter("empty scale spec".into()));
    }
    for (k, s) in scales.iter().enumerate() {
        if s.grid_h == 0 || s.grid_w == 0 || s.ratios.is_empty() {
            return Err(Error::Parameter(format!(
                "scale {k} has empty grid or ratio set"
            )));
        }
        if s.base_size <= 0.0 {
            return Err(Error::Parameter(format!(
                "scale {k} base size must be positive"
            )));
        }
    }
    let mut boxes = Vec::new();
    let mut provenance = Vec::new();
    for (k, s) in scales.iter().enumerate() {
        for h in 0..s.grid_h {
            for w in 0..s.grid_w {
                let cx = (w as f64 + 0.5) / s.grid_w as f64;
                let cy = (h as f64 + 0.5) / s.grid_h as f64;
                for (m, &r) in s.ratios.iter().enumerate() {
                    let sr = r.sqrt();
                    boxes.push(BBox::new(cx, cy, s.base_size * sr, s.base_size / sr));
                    provenance.push(Provenance {
                        scale: k,
                        cell: (h, w),
                        ratio: m,
                    });
                }
            }
        }
    }
    Ok(PriorBoxSet {
        scales: scales.to_vec(),
        boxes,
        provenance,
    })
}

/// Closed-form prior count: sum over scales of H_k * W_k * M_k.
pub fn prior_count(scales: &[ScaleSpec]) -> usize {
    scales
        .iter()
        .map(|s| s.grid_h * s.grid_w * s.num_ratios())
        .sum()
}

/// Per-prior assignment after ground-truth matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Match {
    /// Index into the ground-truth list.
    Positive(usize),
    Negative,
}

/// Matches priors to ground truth: the best prior of every GT is forced
/// positive, then any prior with IoU above `pos_threshold` joins the best
/// such GT.
pub fn match_priors(
    gt: &[(BBox, usize)],
    priors: &PriorBoxSet,
    pos_threshold: f64,
) -> Result<Vec<Match>> {
    if priors.is_empty() {
        return Err(Error::Parameter("prior set is empty".into()));
    }
    for (g, _) in gt {
        if g.w <= 0.0 || g.h <= 0.0 {
            return Err(Error::Input(format!(
                "degenerate ground-truth box {g:?}"
            )));
        }
    }
    let mut assignment = vec![Match::Negative; priors.len()];
    if gt.is_empty() {
        return Ok(assignment);
    }

    let mut iou_matrix = vec![0.0f64; gt.len() * priors.len()];
    for (gi, (g, _)) in gt.iter().enumerate() {
        for (pi, p) in priors.boxes.iter().enumerate() {
            iou_matrix[gi * priors.len() + pi] = iou(g, p);
        }
    }

    // Force-match the best free prior to each GT so no GT is unrepresented.
    let mut forced = vec![false; priors.len()];
    for gi in 0..gt.len() {
        let mut best = None;
        for pi in 0..priors.len() {
            if forced[pi] {
                continue;
            }
            let v = iou_matrix[gi * priors.len() + pi];
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, pi));
            }
        }
        if let Some((_, pi)) = best {
            assignment[pi] = Match::Positive(gi);
            forced[pi] = true;
        }
    }

    // Threshold matches for the remaining priors.
    for pi in 0..priors.len() {
        if forced[pi] {
            continue;
        }
        let mut best = (pos_threshold, None);
        for gi in 0..gt.len() {
            let v = iou_matrix[gi * priors.len() + pi];
            if v > best.0 {
                best = (v, Some(gi));
            }
        }
        if let Some(gi) = best.1 {
            assignment[pi] = Match::Positive(gi);
        }
    }
    Ok(assignment)
}

/// SSD offset-encoding variances.
pub const VARIANCE_CENTER: f64 = 0.1;
pub const VARIANCE_SIZE: f64 = 0.2;

/// Encodes a ground-truth box against a prior as regression targets.
pub fn encode_offsets(gt: &BBox, prior: &BBox) -> Result<[f64; 4]> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Input(format!("nonpositive GT dims in {gt:?}")));
    }
    Ok([
        (gt.cx - prior.cx) / (prior.w * VARIANCE_CENTER),
        (gt.cy - prior.cy) / (prior.h * VARIANCE_CENTER),
        (gt.w / prior.w).ln() / VARIANCE_SIZE,
        (gt.h / prior.h).ln() / VARIANCE_SIZE,
    ])
}

/// Inverse of `encode_offsets`, clamped to the unit square.
pub fn decode_offsets(offsets: &[f64; 4], prior: &BBox) -> BBox {
    let cx = offsets[0] * VARIANCE_CENTER * prior.w + prior.cx;
    let cy = offsets[1] * VARIANCE_CENTER * prior.h + prior.cy;
    let w = (offsets[2] * VARIANCE_SIZE).exp() * prior.w;
    let h = (offsets[3] * VARIANCE_SIZE).exp() * prior.h;
    let (x0, y0, x1, y1) = BBox::new(cx, cy, w, h).corners();
    let x0 = x0.clamp(0.0, 1.0);
    let y0 = y0.clamp(0.0, 1.0);
    let x1 = x1.clamp(0.0, 1.0).max(x0 + 1e-6);
    let y1 = y1.clamp(0.0, 1.0).max(y0 + 1e-6);
    BBox::from_corners(x0, y0, x1, y1)
}

/// Greedy NMS keeping at most `top_k` survivors. Score ties break by the
/// original index so results are stable.
pub fn nms(detections: &[(BBox, f64)], iou_threshold: f64, top_k: usize) -> Vec<(BBox, f64)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].1
            .partial_cmp(&detections[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= top_k {
            break;
        }
        if kept
            .iter()
            .all(|&j| iou(&detections[i].0, &detections[j].0) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let mut out: Vec<(BBox, f64)> = kept.iter().map(|&i| detections[i]).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    out
}
