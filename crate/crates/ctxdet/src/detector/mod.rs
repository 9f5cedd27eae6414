//! Miniature single-shot detector: a small stride-2 convolutional backbone
//! feeding three feature scales, with per-scale box-regression, objectness,
//! and source-classification heads.

mod loss;
mod train;

pub use loss::{hard_negative_indices, multibox_loss, LossParts, SceneTargets};
pub use train::{
    finetune, loss_trend_decreasing, predict_scene, predict_with, pretrain_source, scene_forward_dbg,
    run_incremental_training, setup_finetune, ClsPathwayPublic, Detection, HeadMode, StepLog,
    TrainCfg, TransferConfig, Variant,
};
pub(crate) use train::{scene_forward, ClsPathway};

use crate::anchors::{generate_priors, PriorBoxSet, ScaleSpec};
use crate::context::{PoolingConfig, ScaleGrid, SourceScoreSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{NodeId, ParamStore, Real, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture description: geometry is fixed by the scale spec; channel
/// widths are fixed by the backbone constants below.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub num_source_classes: usize,
    pub num_target_classes: usize,
    pub scales: Vec<ScaleSpec>,
    pub pooling: PoolingConfig,
}

pub const FEATURE_CHANNELS: usize = 32;
const TRUNK_CHANNELS: [usize; 2] = [16, 32];

impl DetectorConfig {
    /// 64x64 images, feature grids 8/4/2 with three aspect ratios, pooling
    /// kernels 2,2 and a pass-through on the coarsest scale.
    pub fn toy(num_source_classes: usize, num_target_classes: usize) -> Self {
        let ratios = vec![1.0, 2.0, 0.5];
        DetectorConfig {
            image_size: 64,
            num_source_classes,
            num_target_classes,
            scales: vec![
                ScaleSpec { grid_h: 8, grid_w: 8, ratios: ratios.clone(), base_size: 0.2 },
                ScaleSpec { grid_h: 4, grid_w: 4, ratios: ratios.clone(), base_size: 0.45 },
                ScaleSpec { grid_h: 2, grid_w: 2, ratios, base_size: 0.8 },
            ],
            pooling: PoolingConfig {
                per_scale: vec![Some((2, 2)), Some((2, 2)), None],
                ceil_mode: true,
            },
        }
    }

    pub fn priors(&self) -> Result<PriorBoxSet> {
        generate_priors(&self.scales)
    }

    pub fn grids(&self) -> Vec<ScaleGrid> {
        self.scales
            .iter()
            .map(|s| ScaleGrid {
                h: s.grid_h,
                w: s.grid_w,
                m: s.num_ratios(),
            })
            .collect()
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }
}

// ── Parameter naming ─────────────────────────────────────────────────

pub const BACKBONE_LAYERS: [&str; 5] = [
    "backbone.conv1",
    "backbone.conv2",
    "backbone.conv3",
    "backbone.down4",
    "backbone.down5",
];

pub fn head_name(head: &str, scale: usize) -> String {
    format!("head.{head}.k{scale}")
}

fn conv_param(store: &mut ParamStore<impl Real>, name: &str, k: usize, cin: usize, cout: usize, sigma: f64, rng: &mut Rng) {
    store.insert(
        format!("{name}.w"),
        Tensor::gaussian(vec![k, k, cin, cout], sigma, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

/// He-style init for the trunk, small Gaussian for detection heads.
pub fn init_detector_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &DetectorConfig,
    rng: &mut Rng,
) {
    let chans = [
        (3, TRUNK_CHANNELS[0]),
        (TRUNK_CHANNELS[0], TRUNK_CHANNELS[1]),
        (TRUNK_CHANNELS[1], FEATURE_CHANNELS),
        (FEATURE_CHANNELS, FEATURE_CHANNELS),
        (FEATURE_CHANNELS, FEATURE_CHANNELS),
    ];
    for (name, (cin, cout)) in BACKBONE_LAYERS.iter().zip(chans) {
        let sigma = (2.0 / (9.0 * cin as f64)).sqrt();
        conv_param(store, name, 3, cin, cout, sigma, rng);
    }
    for (k, scale) in cfg.scales.iter().enumerate() {
        let m = scale.num_ratios();
        conv_param(store, &head_name("bbox", k), 3, FEATURE_CHANNELS, 4 * m, 0.01, rng);
        conv_param(store, &head_name("bg", k), 3, FEATURE_CHANNELS, m, 0.01, rng);
        conv_param(
            store,
            &head_name("obj", k),
            3,
            FEATURE_CHANNELS,
            cfg.num_source_classes * m,
            0.01,
            rng,
        );
    }
}

/// Fresh per-scale target classification convs (the traditional fine-tuning
/// pathway that classifies directly from multi-scale features).
pub fn init_target_conv_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &DetectorConfig,
    rng: &mut Rng,
) {
    for (k, scale) in cfg.scales.iter().enumerate() {
        let m = scale.num_ratios();
        conv_param(
            store,
            &head_name("tgt", k),
            3,
            FEATURE_CHANNELS,
            cfg.num_target_classes * m,
            0.01,
            rng,
        );
    }
}

/// Extra parameters the fresh-conv pathway adds (weights + biases).
pub fn target_conv_param_count(cfg: &DetectorConfig) -> usize {
    cfg.scales
        .iter()
        .map(|s| {
            let cout = cfg.num_target_classes * s.num_ratios();
            9 * FEATURE_CHANNELS * cout + cout
        })
        .sum()
}

// ── Forward passes ───────────────────────────────────────────────────

/// Tape handles for every parameter, in store order.
pub type ParamIds = BTreeMap<String, NodeId>;

/// Leafs every parameter onto a tape; `trainable` decides per name.
pub fn leaf_params<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    trainable: &dyn Fn(&str) -> bool,
) -> ParamIds {
    store
        .iter()
        .map(|(name, tensor)| {
            let id = tape.leaf(tensor.clone(), trainable(name));
            (name.clone(), id)
        })
        .collect()
}

fn id_of(ids: &ParamIds, name: &str) -> Result<NodeId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| Error::Parameter(format!("missing parameter {name:?} on tape")))
}

fn conv_block<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    layer: &str,
    x: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let w = id_of(ids, &format!("{layer}.w"))?;
    let b = id_of(ids, &format!("{layer}.b"))?;
    let y = tape.conv2d(x, w, stride, 1)?;
    let y = tape.add_bias(y, b)?;
    Ok(tape.relu(y))
}

/// Stride-2 trunk producing the three feature maps (8x8, 4x4, 2x2 at 32
/// channels for 64x64 input).
pub fn backbone_forward<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    image: NodeId,
    cfg: &DetectorConfig,
) -> Result<Vec<NodeId>> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [cfg.image_size, cfg.image_size, 3] {
        return Err(Error::Dim(format!(
            "expected {0}x{0}x3 image, got {shape:?}",
            cfg.image_size
        )));
    }
    let c1 = conv_block(tape, ids, "backbone.conv1", image, 2)?;
    let c2 = conv_block(tape, ids, "backbone.conv2", c1, 2)?;
    let f0 = conv_block(tape, ids, "backbone.conv3", c2, 2)?;
    let f1 = conv_block(tape, ids, "backbone.down4", f0, 2)?;
    let f2 = conv_block(tape, ids, "backbone.down5", f1, 2)?;
    Ok(vec![f0, f1, f2])
}

/// Head outputs flattened into the prior-box row order.
pub struct HeadsOut {
    /// D_p x 4 box offsets.
    pub loc: NodeId,
    /// D_p x 1 objectness logits.
    pub bg: NodeId,
    /// Pre-softmax source scores, per scale and flattened.
    pub scores: SourceScoreSet,
}

/// Runs a 3x3 stride-1 head conv on one scale and flattens to rows.
fn head_rows<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    head: &str,
    scale: usize,
    feature: NodeId,
    grid: ScaleGrid,
    cols: usize,
) -> Result<(NodeId, NodeId)> {
    let w = id_of(ids, &format!("{}.w", head_name(head, scale)))?;
    let b = id_of(ids, &format!("{}.b", head_name(head, scale)))?;
    let y = tape.conv2d(feature, w, 1, 1)?;
    let y = tape.add_bias(y, b)?;
    let rows = tape.reshape(y, vec![grid.rows(), cols])?;
    Ok((y, rows))
}

/// Applies the bbox / bg / source-classification heads to every scale.
///
/// The spatial extent of each feature map must match the prior grid for its
/// scale; a mismatch (e.g. scales fed out of order) is a consistency error
/// because the flattening would no longer line up with the prior boxes.
pub fn heads_forward<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    features: &[NodeId],
    cfg: &DetectorConfig,
) -> Result<HeadsOut> {
    let grids = cfg.grids();
    if features.len() != grids.len() {
        return Err(Error::Consistency(format!(
            "{} feature maps for {} scales",
            features.len(),
            grids.len()
        )));
    }
    let mut loc_parts = Vec::new();
    let mut bg_parts = Vec::new();
    let mut obj_maps = Vec::new();
    for (k, (&feat, grid)) in features.iter().zip(&grids).enumerate() {
        let shape = tape.value(feat).shape().to_vec();
        if shape[0] != grid.h || shape[1] != grid.w {
            return Err(Error::Consistency(format!(
                "scale {k}: feature map {}x{} does not match prior grid {}x{}; \
                 flattening would desynchronize from the prior order",
                shape[0], shape[1], grid.h, grid.w
            )));
        }
        let (_, loc) = head_rows(tape, ids, "bbox", k, feat, *grid, 4)?;
        loc_parts.push(loc);
        let (_, bg) = head_rows(tape, ids, "bg", k, feat, *grid, 1)?;
        bg_parts.push(bg);
        let (obj_map, _) = head_rows(
            tape,
            ids,
            "obj",
            k,
            feat,
            *grid,
            cfg.num_source_classes,
        )?;
        obj_maps.push(obj_map);
    }
    let loc = tape.concat_rows(&loc_parts)?;
    let bg = tape.concat_rows(&bg_parts)?;
    let scores =
        SourceScoreSet::from_per_scale(tape, obj_maps, grids, cfg.num_source_classes)?;
    Ok(HeadsOut { loc, bg, scores })
}

/// Fresh-conv target logits (D_p x C_t), used by the traditional pathway.
pub fn target_conv_forward<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    features: &[NodeId],
    cfg: &DetectorConfig,
) -> Result<NodeId> {
    let grids = cfg.grids();
    let mut parts = Vec::new();
    for (k, (&feat, grid)) in features.iter().zip(&grids).enumerate() {
        let (_, rows) = head_rows(
            tape,
            ids,
            "tgt",
            k,
            feat,
            *grid,
            cfg.num_target_classes,
        )?;
        parts.push(rows);
    }
    tape.concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DetectorConfig {
        DetectorConfig::toy(12, 4)
    }

    fn zero_image(tape: &mut Tape<f64>, cfg: &DetectorConfig) -> NodeId {
        tape.leaf(Tensor::zeros(vec![cfg.image_size, cfg.image_size, 3]), false)
    }

    #[test]
    fn backbone_shapes() {
        let cfg = toy();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(1);
        init_detector_params(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let ids = leaf_params(&mut tape, &store, &|_| false);
        let img = zero_image(&mut tape, &cfg);
        let feats = backbone_forward(&mut tape, &ids, img, &cfg).unwrap();
        assert_eq!(tape.value(feats[0]).shape(), &[8, 8, 32]);
        assert_eq!(tape.value(feats[1]).shape(), &[4, 4, 32]);
        assert_eq!(tape.value(feats[2]).shape(), &[2, 2, 32]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_maps() {
        let cfg = toy();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(2);
        init_detector_params(&mut store, &cfg, &mut rng);
        // biases are zero-initialized already; zero image -> zero activations
        let mut tape = Tape::new();
        let ids = leaf_params(&mut tape, &store, &|_| false);
        let img = zero_image(&mut tape, &cfg);
        let feats = backbone_forward(&mut tape, &ids, img, &cfg).unwrap();
        for f in feats {
            assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let cfg = toy();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(3);
        init_detector_params(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let ids = leaf_params(&mut tape, &store, &|_| false);
        let img = tape.leaf(Tensor::zeros(vec![32, 32, 3]), false);
        assert!(backbone_forward(&mut tape, &ids, img, &cfg).is_err());
    }

    #[test]
    fn head_rows_match_prior_count() {
        let cfg = toy();
        let priors = cfg.priors().unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(4);
        init_detector_params(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let ids = leaf_params(&mut tape, &store, &|_| false);
        let img = tape.leaf(
            Tensor::gaussian(vec![64, 64, 3], 0.3, &mut rng),
            false,
        );
        let feats = backbone_forward(&mut tape, &ids, img, &cfg).unwrap();
        let heads = heads_forward(&mut tape, &ids, &feats, &cfg).unwrap();
        assert_eq!(tape.value(heads.loc).shape(), &[priors.len(), 4]);
        assert_eq!(tape.value(heads.bg).shape(), &[priors.len(), 1]);
        assert_eq!(
            tape.value(heads.scores.flat).shape(),
            &[priors.len(), 12]
        );
    }

    #[test]
    fn permuted_scales_raise_consistency_error() {
        let cfg = toy();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(5);
        init_detector_params(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let ids = leaf_params(&mut tape, &store, &|_| false);
        let img = zero_image(&mut tape, &cfg);
        let mut feats = backbone_forward(&mut tape, &ids, img, &cfg).unwrap();
        feats.swap(0, 1);
        let err = match heads_forward(&mut tape, &ids, &feats, &cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected consistency error"),
        };
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn scores_match_per_cell_conv_oracle() {
        // P row for prior (k,h,w,m) equals a direct 3x3 patch dot product
        let cfg = toy();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::seed_from_u64(6);
        init_detector_params(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new();
        let ids = leaf_params(&mut tape, &store, &|_| false);
        let img = tape.leaf(Tensor::gaussian(vec![64, 64, 3], 0.3, &mut rng), false);
        let feats = backbone_forward(&mut tape, &ids, img, &cfg).unwrap();
        let heads = heads_forward(&mut tape, &ids, &feats, &cfg).unwrap();
        let priors = cfg.priors().unwrap();
        let p = tape.value(heads.scores.flat).clone();

        let offsets = heads.scores.scale_offsets();
        for &row in &[0usize, 7, 100, 193, 240, 251] {
            let prov = priors.provenance[row];
            let grid = cfg.grids()[prov.scale];
            let feat = tape.value(feats[prov.scale]).clone();
            let w = store
                .get(&format!("{}.w", head_name("obj", prov.scale)))
                .unwrap();
            let b = store
                .get(&format!("{}.b", head_name("obj", prov.scale)))
                .unwrap();
            let (fh, fw, fc) = feat.dims3().unwrap();
            let cout = cfg.num_source_classes * grid.m;
            for class in 0..cfg.num_source_classes {
                let oc = prov.ratio * cfg.num_source_classes + class;
                let mut acc = b.data()[oc];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = prov.cell.0 as isize + ky as isize - 1;
                        let x = prov.cell.1 as isize + kx as isize - 1;
                        if y < 0 || y >= fh as isize || x < 0 || x >= fw as isize {
                            continue;
                        }
                        for ci in 0..fc {
                            acc += feat.data()[(y as usize * fw + x as usize) * fc + ci]
                                * w.data()[((ky * 3 + kx) * fc + ci) * cout + oc];
                        }
                    }
                }
                let flat_row = offsets[prov.scale]
                    + (prov.cell.0 * grid.w + prov.cell.1) * grid.m
                    + prov.ratio;
                assert_eq!(flat_row, row);
                let got = p.data()[row * cfg.num_source_classes + class];
                assert!(
                    (got - acc).abs() < 1e-10,
                    "row {row} class {class}: {got} vs {acc}"
                );
            }
        }
    }

    #[test]
    fn fresh_conv_pathway_costs_more_parameters_than_attention_pathway() {
        let cfg = toy();
        let fresh = target_conv_param_count(&cfg);
        let attention = crate::context::count_extra_params(
            cfg.num_source_classes,
            cfg.num_target_classes,
            cfg.num_scales(),
            &crate::context::CtFlags::default(),
        );
        assert!(
            fresh > attention,
            "fresh conv pathway {fresh} should exceed attention pathway {attention}"
        );
    }
}
