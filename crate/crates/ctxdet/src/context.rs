//! Context attention between a preserved source-domain classifier and a new
//! target-domain classifier.
//!
//! The pipeline over source score tensors P_k:
//!   1. spatial pooling per scale builds a compact set of context fields Q
//!   2. an affinity matrix A compares embedded prior-box scores with embedded
//!      context fields
//!   3. softmax rows of A gate a weighted sum of embedded fields, added
//!      residually back onto P
//!   4. a single shared matrix maps the context-aware scores to target-class
//!      logits
//!
//! Every embedding is a bias-free square matrix applied residual-style
//! (x + x W) and zero-initialized, so a fresh module is an exact pass-through
//! from the source classifier. Ablation flags cover plain/absent embeddings,
//! average/no pooling, a negated-Euclidean affinity metric, per-scale target
//! classifiers, and a self-attention variant without field construction.

use crate::anchors::{BBox, PriorBoxSet, Provenance};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{kernels, NodeId, ParamStore, Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

// ── Flags ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Avg,
    /// Pass-through: every prior box is its own context field.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    #[default]
    Residual,
    Plain,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AffinityMetric {
    #[default]
    Dot,
    /// A(i,j) = -|f(P)_i - g(Q)_j|^2
    NegEuclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThetaMode {
    #[default]
    Shared,
    PerScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CtMode {
    #[default]
    Full,
    /// Affinity among prior boxes themselves; no field construction.
    NonLocal,
    /// Train with the module attached, drop stages 1-3 at inference.
    UnloadAtTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CtFlags {
    pub pool: PoolMode,
    pub embedding: EmbeddingMode,
    pub metric: AffinityMetric,
    pub theta: ThetaMode,
    pub mode: CtMode,
    /// Optional row normalization before the dot metric. Off by default; the
    /// default metric is the unnormalized product.
    pub normalize: bool,
}

// ── Score sets ───────────────────────────────────────────────────────

/// Grid geometry of one scale: H x W cells with M boxes each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleGrid {
    pub h: usize,
    pub w: usize,
    pub m: usize,
}

impl ScaleGrid {
    pub fn rows(&self) -> usize {
        self.h * self.w * self.m
    }
}

/// Pre-softmax source scores: per-scale tensors plus their flattening.
///
/// Row order of the flat matrix matches the prior-box order: ascending
/// scale, row-major cells, then ratio index.
pub struct SourceScoreSet {
    pub per_scale: Vec<NodeId>,
    pub grids: Vec<ScaleGrid>,
    pub flat: NodeId,
    pub num_classes: usize,
}

impl SourceScoreSet {
    /// Builds the flat D_p x C_s matrix from per-scale H x W x (M*C_s)
    /// tensors. The H x W x (M*C_s) memory layout already enumerates
    /// (cell, ratio, class) in the canonical order, so flattening is a
    /// reshape followed by row concatenation.
    pub fn from_per_scale<F: Real>(
        tape: &mut Tape<F>,
        per_scale: Vec<NodeId>,
        grids: Vec<ScaleGrid>,
        num_classes: usize,
    ) -> Result<Self> {
        if per_scale.len() != grids.len() {
            return Err(Error::Dim(format!(
                "{} score tensors for {} grids",
                per_scale.len(),
                grids.len()
            )));
        }
        let mut flats = Vec::with_capacity(per_scale.len());
        for (&node, grid) in per_scale.iter().zip(&grids) {
            let shape = tape.value(node).shape().to_vec();
            if shape != [grid.h, grid.w, grid.m * num_classes] {
                return Err(Error::Consistency(format!(
                    "scale tensor shape {:?} does not match grid {}x{}x({}x{})",
                    shape, grid.h, grid.w, grid.m, num_classes
                )));
            }
            flats.push(tape.reshape(node, vec![grid.rows(), num_classes])?);
        }
        let flat = tape.concat_rows(&flats)?;
        Ok(SourceScoreSet {
            per_scale,
            grids,
            flat,
            num_classes,
        })
    }

    pub fn num_priors(&self) -> usize {
        self.grids.iter().map(|g| g.rows()).sum()
    }

    /// Row offset of each scale in the flat matrix.
    pub fn scale_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.grids.len());
        let mut acc = 0;
        for g in &self.grids {
            offsets.push(acc);
            acc += g.rows();
        }
        offsets
    }
}

/// Pooled context fields with their provenance.
pub struct ContextFieldSet {
    pub per_scale: Vec<NodeId>,
    pub grids: Vec<ScaleGrid>,
    pub flat: NodeId,
    pub provenance: Vec<Provenance>,
}

impl ContextFieldSet {
    pub fn num_fields(&self) -> usize {
        self.provenance.len()
    }
}

/// Per-scale pooling setup: `None` entries pass the scale through unpooled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub per_scale: Vec<Option<(usize, usize)>>,
    pub ceil_mode: bool,
}

impl PoolingConfig {
    pub fn pass_through(num_scales: usize) -> Self {
        PoolingConfig {
            per_scale: vec![None; num_scales],
            ceil_mode: true,
        }
    }
}

fn field_provenance(grids: &[ScaleGrid]) -> Vec<Provenance> {
    let mut out = Vec::new();
    for (k, g) in grids.iter().enumerate() {
        for h in 0..g.h {
            for w in 0..g.w {
                for m in 0..g.m {
                    out.push(Provenance {
                        scale: k,
                        cell: (h, w),
                        ratio: m,
                    });
                }
            }
        }
    }
    out
}

/// Channelwise spatial pooling of every scale's score tensor (step 1).
pub fn build_context_fields<F: Real>(
    tape: &mut Tape<F>,
    scores: &SourceScoreSet,
    pooling: &PoolingConfig,
    pool_mode: PoolMode,
) -> Result<ContextFieldSet> {
    if pooling.per_scale.len() != scores.grids.len() {
        return Err(Error::Parameter(format!(
            "pooling config covers {} scales, scores have {}",
            pooling.per_scale.len(),
            scores.grids.len()
        )));
    }
    let mut per_scale = Vec::new();
    let mut grids = Vec::new();
    let mut flats = Vec::new();
    for ((&node, grid), entry) in scores
        .per_scale
        .iter()
        .zip(&scores.grids)
        .zip(&pooling.per_scale)
    {
        let spec = match pool_mode {
            PoolMode::None => None,
            _ => *entry,
        };
        let (pooled, u, v) = match spec {
            None => (node, grid.h, grid.w),
            Some((kernel, stride)) => {
                let pooled = match pool_mode {
                    PoolMode::Avg => tape.avg_pool(node, kernel, stride, pooling.ceil_mode)?,
                    _ => tape.max_pool(node, kernel, stride, pooling.ceil_mode)?,
                };
                let shape = tape.value(pooled).shape();
                (pooled, shape[0], shape[1])
            }
        };
        let out_grid = ScaleGrid {
            h: u,
            w: v,
            m: grid.m,
        };
        flats.push(tape.reshape(pooled, vec![out_grid.rows(), scores.num_classes])?);
        per_scale.push(pooled);
        grids.push(out_grid);
    }
    let flat = tape.concat_rows(&flats)?;
    let provenance = field_provenance(&grids);
    Ok(ContextFieldSet {
        per_scale,
        grids,
        flat,
        provenance,
    })
}

/// Closed-form context-field count for a scale/pooling configuration.
pub fn count_context_fields(
    grids: &[ScaleGrid],
    pooling: &PoolingConfig,
    pool_mode: PoolMode,
) -> Result<usize> {
    if pooling.per_scale.len() != grids.len() {
        return Err(Error::Parameter(format!(
            "pooling config covers {} scales, spec has {}",
            pooling.per_scale.len(),
            grids.len()
        )));
    }
    let mut total = 0;
    for (grid, entry) in grids.iter().zip(&pooling.per_scale) {
        let spec = match pool_mode {
            PoolMode::None => None,
            _ => *entry,
        };
        let (u, v) = match spec {
            None => (grid.h, grid.w),
            Some((kernel, stride)) => {
                kernels::check_pool_params(grid.h, grid.w, kernel, stride, pooling.ceil_mode)?;
                (
                    kernels::pool_out_extent(grid.h, kernel, stride, pooling.ceil_mode),
                    kernels::pool_out_extent(grid.w, kernel, stride, pooling.ceil_mode),
                )
            }
        };
        total += u * v * grid.m;
    }
    Ok(total)
}

// ── Parameters ───────────────────────────────────────────────────────

pub const CT_F: &str = "ct.f.w";
pub const CT_G: &str = "ct.g.w";
pub const CT_H: &str = "ct.h.w";
pub const CT_PHI: &str = "ct.phi.w";
pub const CT_THETA: &str = "ct.theta";

pub fn theta_name(scale: usize) -> String {
    format!("ct.theta.k{scale}")
}

/// Registers the module's parameters in a store.
///
/// Residual embeddings start at zero so the module begins as an exact
/// pass-through of the source scores. Plain embeddings need a small random
/// init (an all-zero product has zero gradient); the fusion weight stays
/// zero-initialized in both cases so initial target logits come from P
/// unchanged.
pub fn init_ct_params<F: Real>(
    store: &mut ParamStore<F>,
    c_s: usize,
    c_t: usize,
    num_scales: usize,
    flags: &CtFlags,
    rng: &mut Rng,
) {
    match flags.embedding {
        EmbeddingMode::None => {}
        EmbeddingMode::Residual => {
            for name in [CT_F, CT_G, CT_H, CT_PHI] {
                store.insert(name, Tensor::zeros(vec![c_s, c_s]));
            }
        }
        EmbeddingMode::Plain => {
            for name in [CT_F, CT_G, CT_H] {
                store.insert(name, Tensor::gaussian(vec![c_s, c_s], 0.01, rng));
            }
            store.insert(CT_PHI, Tensor::zeros(vec![c_s, c_s]));
        }
    }
    match flags.theta {
        ThetaMode::Shared => {
            store.insert(CT_THETA, Tensor::gaussian(vec![c_s, c_t], 0.01, rng));
        }
        ThetaMode::PerScale => {
            for k in 0..num_scales {
                store.insert(theta_name(k), Tensor::gaussian(vec![c_s, c_t], 0.01, rng));
            }
        }
    }
}

/// Names of the parameters the flags imply (used for training masks).
pub fn ct_param_names(num_scales: usize, flags: &CtFlags) -> Vec<String> {
    let mut names = Vec::new();
    if flags.embedding != EmbeddingMode::None {
        names.extend([CT_F, CT_G, CT_H, CT_PHI].map(String::from));
    }
    match flags.theta {
        ThetaMode::Shared => names.push(CT_THETA.to_string()),
        ThetaMode::PerScale => names.extend((0..num_scales).map(theta_name)),
    }
    names
}

/// Closed-form count of extra parameters the module adds.
pub fn count_extra_params(c_s: usize, c_t: usize, num_scales: usize, flags: &CtFlags) -> usize {
    let embeddings = match flags.embedding {
        EmbeddingMode::None => 0,
        _ => 4 * c_s * c_s,
    };
    let theta = match flags.theta {
        ThetaMode::Shared => c_s * c_t,
        ThetaMode::PerScale => num_scales * c_s * c_t,
    };
    embeddings + theta
}

/// Tape handles for the module's weights.
pub struct CtParamIds {
    pub f: Option<NodeId>,
    pub g: Option<NodeId>,
    pub h: Option<NodeId>,
    pub phi: Option<NodeId>,
    pub thetas: Vec<NodeId>,
}

impl CtParamIds {
    /// Leafs every weight the flags imply onto the tape.
    pub fn leaf<F: Real>(
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        num_scales: usize,
        flags: &CtFlags,
        trainable: bool,
    ) -> Result<Self> {
        let emb = |name: &str, tape: &mut Tape<F>| -> Result<Option<NodeId>> {
            if flags.embedding == EmbeddingMode::None {
                Ok(None)
            } else {
                Ok(Some(tape.leaf(store.get(name)?.clone(), trainable)))
            }
        };
        let f = emb(CT_F, tape)?;
        let g = emb(CT_G, tape)?;
        let h = emb(CT_H, tape)?;
        let phi = emb(CT_PHI, tape)?;
        let thetas = match flags.theta {
            ThetaMode::Shared => vec![tape.leaf(store.get(CT_THETA)?.clone(), trainable)],
            ThetaMode::PerScale => (0..num_scales)
                .map(|k| Ok(tape.leaf(store.get(&theta_name(k))?.clone(), trainable)))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(CtParamIds { f, g, h, phi, thetas })
    }
}

// ── Forward stages ───────────────────────────────────────────────────

fn embed<F: Real>(
    tape: &mut Tape<F>,
    x: NodeId,
    w: Option<NodeId>,
    mode: EmbeddingMode,
) -> Result<NodeId> {
    match (mode, w) {
        (EmbeddingMode::None, _) | (_, None) => Ok(x),
        (EmbeddingMode::Plain, Some(w)) => tape.matmul(x, w),
        (EmbeddingMode::Residual, Some(w)) => {
            let xw = tape.matmul(x, w)?;
            tape.add(x, xw)
        }
    }
}

/// Affinity matrix A (step 2): embedded dot product, or the negated squared
/// Euclidean distance under the ablation metric.
pub fn affinity<F: Real>(
    tape: &mut Tape<F>,
    p: NodeId,
    q: NodeId,
    ids: &CtParamIds,
    flags: &CtFlags,
) -> Result<NodeId> {
    let (_, cp) = tape.value(p).dims2()?;
    let (_, cq) = tape.value(q).dims2()?;
    if cp != cq {
        return Err(Error::Dim(format!(
            "affinity operands have {cp} and {cq} columns"
        )));
    }
    let mut fp = embed(tape, p, ids.f, flags.embedding)?;
    let mut gq = embed(tape, q, ids.g, flags.embedding)?;
    if flags.normalize {
        fp = tape.normalize_rows(fp)?;
        gq = tape.normalize_rows(gq)?;
    }
    match flags.metric {
        AffinityMetric::Dot => tape.matmul_nt(fp, gq),
        AffinityMetric::NegEuclidean => tape.pairwise_neg_sqdist(fp, gq),
    }
}

/// Attention-weighted context summary L = softmax(A) h(Q) (step 3a).
pub fn aggregate<F: Real>(
    tape: &mut Tape<F>,
    a: NodeId,
    q: NodeId,
    ids: &CtParamIds,
    flags: &CtFlags,
) -> Result<NodeId> {
    let gates = tape.softmax_rows(a)?;
    let hq = embed(tape, q, ids.h, flags.embedding)?;
    tape.matmul(gates, hq)
}

/// Residual fusion P_hat = P + phi(L) (step 3b). With embeddings enabled,
/// phi(L) = L W_phi: the enclosing addition is the residual path, and a
/// zero W_phi makes fusion an exact identity.
pub fn fuse<F: Real>(
    tape: &mut Tape<F>,
    p: NodeId,
    l: NodeId,
    ids: &CtParamIds,
    flags: &CtFlags,
) -> Result<NodeId> {
    let phi_l = match (flags.embedding, ids.phi) {
        (EmbeddingMode::None, _) | (_, None) => l,
        (_, Some(w)) => tape.matmul(l, w)?,
    };
    tape.add(p, phi_l)
}

/// Target classification (step 4): logits P_hat Theta and their row softmax.
/// Under per-scale sharing each scale's row block uses its own matrix.
pub fn target_obj<F: Real>(
    tape: &mut Tape<F>,
    p_hat: NodeId,
    ids: &CtParamIds,
    grids: &[ScaleGrid],
    flags: &CtFlags,
) -> Result<(NodeId, NodeId)> {
    let logits = match flags.theta {
        ThetaMode::Shared => tape.matmul(p_hat, ids.thetas[0])?,
        ThetaMode::PerScale => {
            if ids.thetas.len() != grids.len() {
                return Err(Error::Dim(format!(
                    "{} target matrices for {} scales",
                    ids.thetas.len(),
                    grids.len()
                )));
            }
            let mut parts = Vec::new();
            let mut offset = 0;
            for (grid, &theta) in grids.iter().zip(&ids.thetas) {
                let rows = grid.rows();
                let block = tape.slice_rows(p_hat, offset, rows)?;
                parts.push(tape.matmul(block, theta)?);
                offset += rows;
            }
            tape.concat_rows(&parts)?
        }
    };
    let y = tape.softmax_rows(logits)?;
    Ok((logits, y))
}

/// Full forward product of one mode.
pub struct CtForward {
    pub fields: Option<ContextFieldSet>,
    /// Raw affinity matrix, cached for inspection.
    pub affinity: Option<NodeId>,
    pub p_hat: NodeId,
    pub y_logits: NodeId,
    pub y: NodeId,
}

/// Chains steps 1-4 according to the mode flag.
///
/// `inference` only matters for `UnloadAtTest`: that mode trains with the
/// full chain and skips straight to the target classifier when unloaded.
pub fn forward<F: Real>(
    tape: &mut Tape<F>,
    scores: &SourceScoreSet,
    ids: &CtParamIds,
    pooling: &PoolingConfig,
    flags: &CtFlags,
    inference: bool,
) -> Result<CtForward> {
    let unloaded = flags.mode == CtMode::UnloadAtTest && inference;
    if unloaded {
        let (y_logits, y) = target_obj(tape, scores.flat, ids, &scores.grids, flags)?;
        return Ok(CtForward {
            fields: None,
            affinity: None,
            p_hat: scores.flat,
            y_logits,
            y,
        });
    }
    let fields = match flags.mode {
        CtMode::NonLocal => {
            let pass = PoolingConfig::pass_through(scores.grids.len());
            build_context_fields(tape, scores, &pass, PoolMode::None)?
        }
        _ => build_context_fields(tape, scores, pooling, flags.pool)?,
    };
    let a = affinity(tape, scores.flat, fields.flat, ids, flags)?;
    let l = aggregate(tape, a, fields.flat, ids, flags)?;
    let p_hat = fuse(tape, scores.flat, l, ids, flags)?;
    let (y_logits, y) = target_obj(tape, p_hat, ids, &scores.grids, flags)?;
    Ok(CtForward {
        fields: Some(fields),
        affinity: Some(a),
        p_hat,
        y_logits,
        y,
    })
}

// ── Affinity inspection ──────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffinityEntry {
    pub scale: usize,
    pub cell: (usize, usize),
    pub ratio: usize,
    pub weight: f64,
}

/// JSON record emitted by the affinity dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffinityDump {
    pub prior: PriorRef,
    pub topk: Vec<AffinityEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorRef {
    pub scale: usize,
    pub cell: (usize, usize),
    pub ratio: usize,
    pub r#box: BBox,
}

/// The k largest softmax weights of one affinity row, with field provenance,
/// sorted descending.
pub fn top_k_affinity<F: Real>(
    a: &Tensor<F>,
    provenance: &[Provenance],
    prior_index: usize,
    k: usize,
) -> Result<Vec<(Provenance, f64)>> {
    let (rows, cols) = a.dims2()?;
    if prior_index >= rows {
        return Err(Error::Parameter(format!(
            "prior index {prior_index} out of {rows}"
        )));
    }
    if k > cols {
        return Err(Error::Parameter(format!(
            "k={k} exceeds the {cols} context fields"
        )));
    }
    if provenance.len() != cols {
        return Err(Error::Dim(format!(
            "{} provenance entries for {cols} fields",
            provenance.len()
        )));
    }
    let row = &a.data()[prior_index * cols..(prior_index + 1) * cols];
    let weights = kernels::softmax_rows_forward(row, 1, cols);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| {
        weights[j]
            .partial_cmp(&weights[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    Ok(order[..k]
        .iter()
        .map(|&i| (provenance[i], weights[i].to_f64()))
        .collect())
}

/// Builds the dump record for one prior.
pub fn affinity_dump<F: Real>(
    a: &Tensor<F>,
    fields_provenance: &[Provenance],
    priors: &PriorBoxSet,
    prior_index: usize,
    k: usize,
) -> Result<AffinityDump> {
    let topk = top_k_affinity(a, fields_provenance, prior_index, k)?;
    let p = priors.provenance[prior_index];
    Ok(AffinityDump {
        prior: PriorRef {
            scale: p.scale,
            cell: p.cell,
            ratio: p.ratio,
            r#box: priors.boxes[prior_index],
        },
        topk: topk
            .into_iter()
            .map(|(prov, weight)| AffinityEntry {
                scale: prov.scale,
                cell: prov.cell,
                ratio: prov.ratio,
                weight,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_grids() -> Vec<ScaleGrid> {
        vec![
            ScaleGrid { h: 8, w: 8, m: 3 },
            ScaleGrid { h: 4, w: 4, m: 3 },
            ScaleGrid { h: 2, w: 2, m: 3 },
        ]
    }

    fn toy_pooling() -> PoolingConfig {
        PoolingConfig {
            per_scale: vec![Some((2, 2)), Some((2, 2)), None],
            ceil_mode: true,
        }
    }

    fn random_scores(
        tape: &mut Tape<f64>,
        grids: &[ScaleGrid],
        c_s: usize,
        rng: &mut Rng,
        trainable: bool,
    ) -> SourceScoreSet {
        let per_scale: Vec<NodeId> = grids
            .iter()
            .map(|g| {
                let t = Tensor::gaussian(vec![g.h, g.w, g.m * c_s], 1.0, rng);
                tape.leaf(t, trainable)
            })
            .collect();
        SourceScoreSet::from_per_scale(tape, per_scale, grids.to_vec(), c_s).unwrap()
    }

    #[test]
    fn paper_scale_parameter_count() {
        let flags = CtFlags::default();
        assert_eq!(count_extra_params(60, 20, 6, &flags), 15_600);
        assert_eq!(4 * 60 * 60, 14_400);
        assert_eq!(60 * 20, 1_200);
    }

    #[test]
    fn toy_and_ablation_parameter_counts() {
        let flags = CtFlags::default();
        assert_eq!(count_extra_params(12, 4, 3, &flags), 624);

        let none = CtFlags {
            embedding: EmbeddingMode::None,
            ..Default::default()
        };
        assert_eq!(count_extra_params(12, 4, 3, &none), 48);

        let per_scale = CtFlags {
            theta: ThetaMode::PerScale,
            ..Default::default()
        };
        assert_eq!(
            count_extra_params(12, 4, 3, &per_scale),
            4 * 144 + 3 * 48
        );
    }

    #[test]
    fn stored_weights_match_closed_form() {
        let mut rng = Rng::seed_from_u64(1);
        for embedding in [EmbeddingMode::Residual, EmbeddingMode::Plain, EmbeddingMode::None] {
            for theta in [ThetaMode::Shared, ThetaMode::PerScale] {
                let flags = CtFlags {
                    embedding,
                    theta,
                    ..Default::default()
                };
                let mut store = ParamStore::<f64>::new();
                init_ct_params(&mut store, 12, 4, 3, &flags, &mut rng);
                assert_eq!(
                    store.total_elements(),
                    count_extra_params(12, 4, 3, &flags),
                    "{flags:?}"
                );
            }
        }
    }

    #[test]
    fn field_counts() {
        let grids = toy_grids();
        let pooling = toy_pooling();
        // (4*4 + 2*2 + 2*2) * 3 = 72
        assert_eq!(
            count_context_fields(&grids, &pooling, PoolMode::Max).unwrap(),
            72
        );
        let pass = PoolingConfig::pass_through(3);
        assert_eq!(
            count_context_fields(&grids, &pass, PoolMode::Max).unwrap(),
            252
        );
        // PoolMode::None overrides the kernels
        assert_eq!(
            count_context_fields(&grids, &pooling, PoolMode::None).unwrap(),
            252
        );
    }

    #[test]
    fn published_pooling_config_field_extents() {
        // 38/19/10/5 grids pooled with kernels 3,2,2,2 (stride = kernel),
        // ceil borders: 13,10,5,3
        for (grid, kernel, expect) in [(38, 3, 13), (19, 2, 10), (10, 2, 5), (5, 2, 3)] {
            assert_eq!(kernels::pool_out_extent(grid, kernel, kernel, true), expect);
        }
    }

    #[test]
    fn pass_through_fields_equal_scores() {
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::seed_from_u64(2);
        let scores = random_scores(&mut tape, &toy_grids(), 12, &mut rng, false);
        let pass = PoolingConfig::pass_through(3);
        let fields = build_context_fields(&mut tape, &scores, &pass, PoolMode::Max).unwrap();
        assert_eq!(fields.num_fields(), scores.num_priors());
        assert_eq!(
            tape.value(fields.flat).data(),
            tape.value(scores.flat).data()
        );
    }

    #[test]
    fn field_count_matches_built_rows_randomized() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n_scales = 1 + rng.below(3);
            let grids: Vec<ScaleGrid> = (0..n_scales)
                .map(|_| ScaleGrid {
                    h: 1 + rng.below(9),
                    w: 1 + rng.below(9),
                    m: 1 + rng.below(3),
                })
                .collect();
            let pooling = PoolingConfig {
                per_scale: grids
                    .iter()
                    .map(|_| {
                        if rng.next_f64() < 0.3 {
                            None
                        } else {
                            Some((1 + rng.below(4), 1 + rng.below(3)))
                        }
                    })
                    .collect(),
                ceil_mode: true,
            };
            let c_s = 1 + rng.below(5);
            let mut tape = Tape::<f64>::new();
            let per_scale: Vec<NodeId> = grids
                .iter()
                .map(|g| {
                    let t = Tensor::gaussian(vec![g.h, g.w, g.m * c_s], 1.0, &mut rng);
                    tape.leaf(t, false)
                })
                .collect();
            let scores =
                SourceScoreSet::from_per_scale(&mut tape, per_scale, grids.clone(), c_s).unwrap();
            let fields =
                build_context_fields(&mut tape, &scores, &pooling, PoolMode::Max).unwrap();
            let expect = count_context_fields(&grids, &pooling, PoolMode::Max).unwrap();
            assert_eq!(fields.num_fields(), expect);
            assert_eq!(tape.value(fields.flat).shape()[0], expect);
        }
    }

    #[test]
    fn oversized_kernel_without_ceil_rejected() {
        let grids = vec![ScaleGrid { h: 2, w: 2, m: 1 }];
        let pooling = PoolingConfig {
            per_scale: vec![Some((3, 3))],
            ceil_mode: false,
        };
        assert!(count_context_fields(&grids, &pooling, PoolMode::Max).is_err());
    }

    #[test]
    fn affinity_orthonormal_case() {
        // zero embeddings, P row e1, Q rows {e1, e2} -> A row [1, 0]
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), false);
        let q = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let wf = tape.leaf(Tensor::zeros(vec![2, 2]), false);
        let wg = tape.leaf(Tensor::zeros(vec![2, 2]), false);
        let ids = CtParamIds {
            f: Some(wf),
            g: Some(wg),
            h: None,
            phi: None,
            thetas: vec![],
        };
        let flags = CtFlags::default();
        let a = affinity(&mut tape, p, q, &ids, &flags).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 0.0]);
    }

    #[test]
    fn aggregate_uniform_gates() {
        // A row [0,0], identity h, Q = I2 -> L row [0.5, 0.5]
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2]), false);
        let q = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let ids = CtParamIds {
            f: None,
            g: None,
            h: None,
            phi: None,
            thetas: vec![],
        };
        let flags = CtFlags {
            embedding: EmbeddingMode::None,
            ..Default::default()
        };
        let l = aggregate(&mut tape, a, q, &ids, &flags).unwrap();
        assert_eq!(tape.value(l).data(), &[0.5, 0.5]);
    }

    #[test]
    fn both_metrics_finite_on_random_inputs() {
        let mut rng = Rng::seed_from_u64(4);
        for metric in [AffinityMetric::Dot, AffinityMetric::NegEuclidean] {
            let mut tape = Tape::<f64>::new();
            let scores = random_scores(&mut tape, &toy_grids(), 12, &mut rng, false);
            let mut store = ParamStore::<f64>::new();
            let flags = CtFlags {
                metric,
                ..Default::default()
            };
            init_ct_params(&mut store, 12, 4, 3, &flags, &mut rng);
            let ids = CtParamIds::leaf(&mut tape, &store, 3, &flags, false).unwrap();
            let out = forward(&mut tape, &scores, &ids, &toy_pooling(), &flags, false).unwrap();
            assert!(tape.value(out.affinity.unwrap()).all_finite());
            assert!(tape.value(out.y).all_finite());
        }
    }

    #[test]
    fn zero_init_identity() {
        // all embedding weights zero: A == P Q^T and P_hat == P bitwise;
        // full-mode inference equals unload-mode inference for the same theta
        let mut rng = Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let flags = CtFlags::default();
        init_ct_params(&mut store, 12, 4, 3, &flags, &mut rng);

        let mut tape = Tape::<f64>::new();
        let scores = random_scores(&mut tape, &toy_grids(), 12, &mut rng, false);
        let ids = CtParamIds::leaf(&mut tape, &store, 3, &flags, false).unwrap();
        let out = forward(&mut tape, &scores, &ids, &toy_pooling(), &flags, false).unwrap();

        // A == P Q^T
        let fields = out.fields.as_ref().unwrap();
        let p = tape.value(scores.flat).clone();
        let q = tape.value(fields.flat).clone();
        let (dp, cs) = p.dims2().unwrap();
        let (dq, _) = q.dims2().unwrap();
        let mut expect = vec![0.0f64; dp * dq];
        f64::gemm(dp, cs, dq, 1.0, p.data(), false, q.data(), true, 0.0, &mut expect);
        assert_eq!(tape.value(out.affinity.unwrap()).data(), &expect[..]);

        // P_hat == P exactly
        assert_eq!(tape.value(out.p_hat).data(), p.data());

        // unload-at-test inference equals full-mode at zero init, bitwise
        let unload_flags = CtFlags {
            mode: CtMode::UnloadAtTest,
            ..flags
        };
        let mut tape2 = Tape::new();
        let scores2 = {
            let per_scale: Vec<NodeId> = scores
                .per_scale
                .iter()
                .map(|&n| {
                    let t = tape.value(n).clone();
                    tape2.leaf(t, false)
                })
                .collect();
            SourceScoreSet::from_per_scale(&mut tape2, per_scale, toy_grids(), 12).unwrap()
        };
        let ids2 = CtParamIds::leaf(&mut tape2, &store, 3, &unload_flags, false).unwrap();
        let out2 = forward(&mut tape2, &scores2, &ids2, &toy_pooling(), &unload_flags, true)
            .unwrap();
        assert_eq!(tape.value(out.y).data(), tape2.value(out2.y).data());
    }

    #[test]
    fn non_local_affinity_is_square() {
        let mut rng = Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let flags = CtFlags {
            mode: CtMode::NonLocal,
            ..Default::default()
        };
        init_ct_params(&mut store, 12, 4, 3, &flags, &mut rng);
        let mut tape = Tape::<f64>::new();
        let scores = random_scores(&mut tape, &toy_grids(), 12, &mut rng, false);
        let ids = CtParamIds::leaf(&mut tape, &store, 3, &flags, false).unwrap();
        let out = forward(&mut tape, &scores, &ids, &toy_pooling(), &flags, false).unwrap();
        let d_p = scores.num_priors();
        assert_eq!(tape.value(out.affinity.unwrap()).shape(), &[d_p, d_p]);
    }

    #[test]
    fn target_rows_sum_to_one_and_theta_modes_differ_in_count() {
        let mut rng = Rng::seed_from_u64(7);
        for theta in [ThetaMode::Shared, ThetaMode::PerScale] {
            let flags = CtFlags {
                theta,
                ..Default::default()
            };
            let mut store = ParamStore::<f64>::new();
            init_ct_params(&mut store, 12, 4, 3, &flags, &mut rng);
            let mut tape = Tape::<f64>::new();
            let scores = random_scores(&mut tape, &toy_grids(), 12, &mut rng, false);
            let ids = CtParamIds::leaf(&mut tape, &store, 3, &flags, false).unwrap();
            let out = forward(&mut tape, &scores, &ids, &toy_pooling(), &flags, false).unwrap();
            let y = tape.value(out.y);
            let (rows, cols) = y.dims2().unwrap();
            assert_eq!(cols, 4);
            for r in 0..rows {
                let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monotone_theta_selection() {
        // theta columns as scaled standard basis: argmax of Y matches the
        // argmax over the selected coordinates of P_hat
        let mut tape = Tape::<f64>::new();
        let p_hat = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.3, 2.0, -1.0, 5.0, 0.1, 0.2]).unwrap(),
            false,
        );
        let mut theta = Tensor::zeros(vec![3, 2]);
        theta.data_mut()[0 * 2 + 0] = 2.0; // column 0 selects coord 0
        theta.data_mut()[1 * 2 + 1] = 2.0; // column 1 selects coord 1
        let th = tape.leaf(theta, false);
        let ids = CtParamIds {
            f: None,
            g: None,
            h: None,
            phi: None,
            thetas: vec![th],
        };
        let flags = CtFlags {
            embedding: EmbeddingMode::None,
            ..Default::default()
        };
        let grids = vec![ScaleGrid { h: 1, w: 2, m: 1 }];
        let (_, y) = target_obj(&mut tape, p_hat, &ids, &grids, &flags).unwrap();
        let yv = tape.value(y);
        // row 0: coords (0.3, 2.0) -> class 1; row 1: (5.0, 0.1) -> class 0
        assert!(yv.data()[1] > yv.data()[0]);
        assert!(yv.data()[2] > yv.data()[3]);
    }

    #[test]
    fn top_k_affinity_contract() {
        let prov = vec![
            Provenance { scale: 0, cell: (0, 0), ratio: 0 },
            Provenance { scale: 0, cell: (0, 1), ratio: 0 },
            Provenance { scale: 1, cell: (0, 0), ratio: 1 },
        ];
        let a = Tensor::<f64>::new(vec![1, 3], vec![0.0, 20.0, 0.0]).unwrap();
        // full k: weights sum to 1
        let all = top_k_affinity(&a, &prov, 0, 3).unwrap();
        let mass: f64 = all.iter().map(|(_, w)| w).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        // dominant logit saturates
        assert!(all[0].1 > 0.999);
        assert_eq!(all[0].0, prov[1]);
        // k too large errors
        assert!(top_k_affinity(&a, &prov, 0, 4).is_err());
    }

    #[test]
    fn permutation_of_fields_leaves_outputs_unchanged() {
        let mut rng = Rng::seed_from_u64(8);
        let c_s = 5;
        let d_q = 4;
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::gaussian(vec![6, c_s], 1.0, &mut rng), false);
        let q_t = Tensor::gaussian(vec![d_q, c_s], 1.0, &mut rng);
        // permuted copy of Q
        let perm = [2usize, 0, 3, 1];
        let mut q_perm = Tensor::zeros(vec![d_q, c_s]);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..c_s {
                q_perm.data_mut()[dst * c_s + c] = q_t.data()[src * c_s + c];
            }
        }
        let q = tape.leaf(q_t, false);
        let qp = tape.leaf(q_perm, false);
        let ids = CtParamIds {
            f: None,
            g: None,
            h: None,
            phi: None,
            thetas: vec![],
        };
        let flags = CtFlags {
            embedding: EmbeddingMode::None,
            ..Default::default()
        };
        let a1 = affinity(&mut tape, p, q, &ids, &flags).unwrap();
        let l1 = aggregate(&mut tape, a1, q, &ids, &flags).unwrap();
        let a2 = affinity(&mut tape, p, qp, &ids, &flags).unwrap();
        let l2 = aggregate(&mut tape, a2, qp, &ids, &flags).unwrap();
        for (x, y) in tape.value(l1).data().iter().zip(tape.value(l2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
