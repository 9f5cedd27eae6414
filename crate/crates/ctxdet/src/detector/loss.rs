//! Multibox training loss: smooth-L1 box regression over positives, binary
//! objectness with 3:1 hard-negative mining, and classification
//! cross-entropy over positives, all normalized by the positive count.

use crate::anchors::{encode_offsets, match_priors, BBox, Match, PriorBoxSet};
use crate::error::Result;
use crate::tensor::{NodeId, Real, Tape};

/// Ground truth for one scene with classes already mapped into the index
/// space of the classification logits.
pub struct SceneTargets {
    pub boxes: Vec<(BBox, usize)>,
}

/// Scalar loss node plus components (already normalized) for logging.
pub struct LossParts {
    pub total: NodeId,
    pub n_pos: usize,
    pub loc: f64,
    pub bg: f64,
    pub cls: f64,
}

/// Highest-loss negatives at `ratio` per positive. For a sigmoid head with
/// target 0 the per-prior loss is softplus(logit), monotone in the logit, but
/// we rank by the loss itself with index tie-breaks to keep selection stable.
pub fn hard_negative_indices<F: Real>(
    bg_logits: &[F],
    matches: &[Match],
    n_pos: usize,
    ratio: usize,
) -> Vec<usize> {
    let mut negatives: Vec<(f64, usize)> = matches
        .iter()
        .enumerate()
        .filter(|(_, m)| matches!(m, Match::Negative))
        .map(|(i, _)| {
            let x = bg_logits[i].to_f64();
            // bce(logit, 0) = max(x,0) + ln(1+e^{-|x|})
            let loss = x.max(0.0) + (-x.abs()).exp().ln_1p();
            (loss, i)
        })
        .collect();
    negatives.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let keep = (ratio * n_pos).min(negatives.len());
    let mut idx: Vec<usize> = negatives[..keep].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

/// Assembles the multibox loss for one scene.
///
/// Returns `None` when no prior matches any ground truth (the skip-batch
/// signal); the caller drops the scene from the step.
pub fn multibox_loss<F: Real>(
    tape: &mut Tape<F>,
    loc: NodeId,
    bg: NodeId,
    class_logits: NodeId,
    targets: &SceneTargets,
    priors: &PriorBoxSet,
    hnm_ratio: usize,
) -> Result<Option<LossParts>> {
    let matches = match_priors(&targets.boxes, priors, 0.5)?;
    let positives: Vec<(usize, usize)> = matches
        .iter()
        .enumerate()
        .filter_map(|(pi, m)| match m {
            Match::Positive(gi) => Some((pi, *gi)),
            Match::Negative => None,
        })
        .collect();
    let n_pos = positives.len();
    if n_pos == 0 {
        return Ok(None);
    }
    let pos_idx: Vec<usize> = positives.iter().map(|&(pi, _)| pi).collect();

    // localization: smooth-L1 against encoded offsets
    let mut loc_targets = Vec::with_capacity(n_pos * 4);
    for &(pi, gi) in &positives {
        let enc = encode_offsets(&targets.boxes[gi].0, &priors.boxes[pi])?;
        loc_targets.extend(enc.iter().map(|&v| F::from_f64(v)));
    }
    let loc_rows = tape.gather_rows(loc, pos_idx.clone())?;
    let loss_loc = tape.smooth_l1_sum(loc_rows, loc_targets)?;

    // objectness: positives plus mined hard negatives
    let neg_idx = hard_negative_indices(tape.value(bg).data(), &matches, n_pos, hnm_ratio);
    let mut bg_idx = pos_idx.clone();
    bg_idx.extend(&neg_idx);
    let mut bg_targets = vec![F::one(); n_pos];
    bg_targets.extend(std::iter::repeat(F::zero()).take(neg_idx.len()));
    let bg_rows = tape.gather_rows(bg, bg_idx)?;
    let loss_bg = tape.bce_logits_sum(bg_rows, bg_targets)?;

    // classification over positives
    let classes: Vec<usize> = positives
        .iter()
        .map(|&(_, gi)| targets.boxes[gi].1)
        .collect();
    let cls_rows = tape.gather_rows(class_logits, pos_idx)?;
    let loss_cls = tape.cross_entropy_sum(cls_rows, classes)?;

    let sum = tape.sum_list(&[loss_loc, loss_bg, loss_cls])?;
    let inv = F::from_f64(1.0 / n_pos as f64);
    let total = tape.scale(sum, inv);
    Ok(Some(LossParts {
        total,
        n_pos,
        loc: tape.value(loss_loc).item().to_f64() / n_pos as f64,
        bg: tape.value(loss_bg).item().to_f64() / n_pos as f64,
        cls: tape.value(loss_cls).item().to_f64() / n_pos as f64,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::generate_priors;
    use crate::detector::DetectorConfig;
    use crate::tensor::Tensor;

    #[test]
    fn hnm_selects_largest_loss_negatives_at_ratio() {
        // 2 positives, ratio 3 -> exactly 6 negatives, the largest logits
        let logits: Vec<f64> = vec![0.0, 3.0, -1.0, 2.5, 9.0, -4.0, 1.0, 0.5, 7.0, 0.2];
        let mut matches = vec![Match::Negative; 10];
        matches[0] = Match::Positive(0);
        matches[4] = Match::Positive(1);
        let picked = hard_negative_indices(&logits, &matches, 2, 3);
        assert_eq!(picked.len(), 6);
        // largest-loss negatives are logits 8(7.0) 1(3.0) 3(2.5) 6(1.0) 7(0.5) 9(0.2)
        assert_eq!(picked, vec![1, 3, 6, 7, 8, 9]);
    }

    #[test]
    fn fewer_negatives_than_ratio_takes_all() {
        let logits = vec![1.0f64, 2.0, 3.0];
        let matches = vec![Match::Positive(0), Match::Negative, Match::Negative];
        let picked = hard_negative_indices(&logits, &matches, 1, 3);
        assert_eq!(picked, vec![1, 2]);
    }

    #[test]
    fn zero_positives_signals_skip() {
        let cfg = DetectorConfig::toy(12, 4);
        let priors = generate_priors(&cfg.scales).unwrap();
        let d_p = priors.len();
        let mut tape = Tape::<f64>::new();
        let loc = tape.leaf(Tensor::zeros(vec![d_p, 4]), false);
        let bg = tape.leaf(Tensor::zeros(vec![d_p, 1]), false);
        let cls = tape.leaf(Tensor::zeros(vec![d_p, 12]), false);
        let out = multibox_loss(
            &mut tape,
            loc,
            bg,
            cls,
            &SceneTargets { boxes: vec![] },
            &priors,
            3,
        )
        .unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let cfg = DetectorConfig::toy(12, 4);
        let priors = generate_priors(&cfg.scales).unwrap();
        let d_p = priors.len();
        let gt = (priors.boxes[30], 3usize);
        let matches = match_priors(&[gt], &priors, 0.5).unwrap();

        // offsets equal to the encoded targets on every positive, bg logits
        // strongly signed, class logit dominant
        let mut loc = Tensor::<f64>::zeros(vec![d_p, 4]);
        let mut bg = Tensor::<f64>::zeros(vec![d_p, 1]);
        let mut cls = Tensor::<f64>::zeros(vec![d_p, 12]);
        for (pi, m) in matches.iter().enumerate() {
            match m {
                Match::Positive(gi) => {
                    let enc = crate::anchors::encode_offsets(&gt.0, &priors.boxes[pi]).unwrap();
                    loc.data_mut()[pi * 4..pi * 4 + 4].copy_from_slice(&enc);
                    let _ = gi;
                    bg.data_mut()[pi] = 40.0;
                    cls.data_mut()[pi * 12 + 3] = 40.0;
                }
                Match::Negative => bg.data_mut()[pi] = -40.0,
            }
        }
        let mut tape = Tape::new();
        let loc = tape.leaf(loc, false);
        let bg = tape.leaf(bg, false);
        let cls = tape.leaf(cls, false);
        let parts = multibox_loss(
            &mut tape,
            loc,
            bg,
            cls,
            &SceneTargets { boxes: vec![gt] },
            &priors,
            3,
        )
        .unwrap()
        .unwrap();
        let total = tape.value(parts.total).item();
        assert!(total < 1e-9, "loss {total}");
    }

    #[test]
    fn loss_components_nonnegative_and_finite() {
        let cfg = DetectorConfig::toy(12, 4);
        let priors = generate_priors(&cfg.scales).unwrap();
        let d_p = priors.len();
        let mut rng = crate::rng::Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let loc = tape.leaf(Tensor::gaussian(vec![d_p, 4], 1.0, &mut rng), false);
        let bg = tape.leaf(Tensor::gaussian(vec![d_p, 1], 1.0, &mut rng), false);
        let cls = tape.leaf(Tensor::gaussian(vec![d_p, 12], 1.0, &mut rng), false);
        let gt = (BBox::new(0.4, 0.6, 0.25, 0.2), 7usize);
        let parts = multibox_loss(
            &mut tape,
            loc,
            bg,
            cls,
            &SceneTargets { boxes: vec![gt] },
            &priors,
            3,
        )
        .unwrap()
        .unwrap();
        assert!(parts.loc >= 0.0 && parts.bg >= 0.0 && parts.cls >= 0.0);
        assert!(tape.value(parts.total).item().is_finite());
    }

    #[test]
    fn smooth_l1_hand_values_via_loss() {
        // diff 0.5 -> 0.125; diff 2 -> 1.5 (unit-normalized by one positive)
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap(), false);
        let l = tape.smooth_l1_sum(pred, vec![0.0, 0.0]).unwrap();
        assert!((tape.value(l).item() - (0.125 + 1.5)).abs() < 1e-12);
    }
}
