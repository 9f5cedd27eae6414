//! Incremental few-shot extension: a residual adapter over the preserved
//! source classifier plus score concatenation, trained on balanced
//! source-shot replay mixed with the target shots, so new classes arrive
//! without forgetting the old ones.

use crate::context::{
    forward as ct_forward, CtFlags, CtParamIds, PoolingConfig, SourceScoreSet,
};
use crate::detector::{setup_finetune, DetectorConfig, Variant};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::synthdata::{render_scene, Benchmark, Episode, Scene};
use crate::tensor::{NodeId, ParamStore, Real, Tape, Tensor};

pub const INC_ADAPTER: &str = "inc.adapter.w";

/// Adds the incremental parameters on top of a full-variant fine-tuning
/// store: the adapter is zero-initialized so the corrected source scores
/// start exactly equal to the pretrained ones.
pub fn setup_incremental<F: Real>(
    source: &ParamStore<F>,
    dcfg: &DetectorConfig,
    flags: &CtFlags,
    seed: u64,
) -> Result<ParamStore<F>> {
    let mut store = setup_finetune(source, dcfg, Variant::Full, flags, seed)?;
    store.insert(
        INC_ADAPTER,
        Tensor::zeros(vec![dcfg.num_source_classes, dcfg.num_source_classes]),
    );
    Ok(store)
}

/// Joint classification over C_s + C_t classes: adapter-corrected source
/// logits concatenated with the attention-pathway target logits, then one
/// softmax across both domains.
pub fn incremental_forward<F: Real>(
    tape: &mut Tape<F>,
    scores: &SourceScoreSet,
    adapter: NodeId,
    ct_ids: &CtParamIds,
    pooling: &PoolingConfig,
    flags: &CtFlags,
    inference: bool,
) -> Result<(NodeId, NodeId)> {
    let (_, c_s) = tape.value(scores.flat).dims2()?;
    let (ar, ac) = tape.value(adapter).dims2()?;
    if ar != c_s || ac != c_s {
        return Err(Error::Dim(format!(
            "adapter is {ar}x{ac}, source scores have {c_s} classes"
        )));
    }
    let pa = tape.matmul(scores.flat, adapter)?;
    let corrected = tape.add(scores.flat, pa)?;
    let out = ct_forward(tape, scores, ct_ids, pooling, flags, inference)?;
    let logits = tape.concat_cols(corrected, out.y_logits)?;
    let probs = tape.softmax_rows(logits)?;
    Ok((logits, probs))
}

/// N seeded replay scenes per source class plus the episode's target shots,
/// shuffled with a seeded permutation.
pub fn build_incremental_trainset(
    bench: &Benchmark,
    episode: &Episode,
    shots: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    let stream = derive_seed(seed, 0x1C2);
    let mut scenes = Vec::with_capacity(shots * bench.num_source() + episode.train.len());
    for (ci, class) in bench.source.iter().enumerate() {
        for s in 0..shots {
            let scene_seed = derive_seed(stream, (ci * 100_003 + s) as u64);
            let mut rng = Rng::seed_from_u64(derive_seed(scene_seed, 0xC3));
            scenes.push(render_scene(
                bench.image_size,
                &[class],
                scene_seed,
                rng.below(2),
                false,
            )?);
        }
    }
    scenes.extend(episode.train.iter().cloned());
    let mut rng = Rng::seed_from_u64(derive_seed(seed, 0x5F0));
    rng.shuffle(&mut scenes);
    Ok(scenes)
}

/// Maps a global class id into the joint (source then target) index space.
pub fn joint_class_index(bench: &Benchmark, class_id: usize) -> Result<usize> {
    if let Some(i) = bench.source_index(class_id) {
        return Ok(i);
    }
    if let Some(i) = bench.target_index(class_id) {
        return Ok(bench.num_source() + i);
    }
    Err(Error::Input(format!("class {class_id} not in the benchmark")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{init_ct_params, CtMode, ScaleGrid};
    use crate::detector::{init_detector_params, DetectorConfig};
    use crate::synthdata::{default_benchmark, sample_episode, EpisodeSpec};

    fn toy_scores(
        tape: &mut Tape<f64>,
        grids: &[ScaleGrid],
        c_s: usize,
        rng: &mut Rng,
    ) -> SourceScoreSet {
        let per_scale: Vec<NodeId> = grids
            .iter()
            .map(|g| {
                let t = Tensor::gaussian(vec![g.h, g.w, g.m * c_s], 1.0, rng);
                tape.leaf(t, false)
            })
            .collect();
        SourceScoreSet::from_per_scale(tape, per_scale, grids.to_vec(), c_s).unwrap()
    }

    #[test]
    fn zero_init_concatenates_raw_pathways() {
        // zero adapter and zero attention weights: logits == [P | P theta]
        let dcfg = DetectorConfig::toy(12, 4);
        let mut rng = Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let flags = CtFlags::default();
        init_ct_params(&mut store, 12, 4, 3, &flags, &mut rng);
        store.insert(INC_ADAPTER, Tensor::zeros(vec![12, 12]));

        let mut tape = Tape::<f64>::new();
        let scores = toy_scores(&mut tape, &dcfg.grids(), 12, &mut rng);
        let adapter = tape.leaf(store.get(INC_ADAPTER).unwrap().clone(), false);
        let ct_ids = CtParamIds::leaf(&mut tape, &store, 3, &flags, false).unwrap();
        let theta = tape.value(ct_ids.thetas[0]).clone();
        let (logits, probs) =
            incremental_forward(&mut tape, &scores, adapter, &ct_ids, &dcfg.pooling, &flags, false)
                .unwrap();

        let p = tape.value(scores.flat).clone();
        let (d_p, c_s) = p.dims2().unwrap();
        let c_t = 4;
        let mut p_theta = vec![0.0; d_p * c_t];
        f64::gemm(d_p, c_s, c_t, 1.0, p.data(), false, theta.data(), false, 0.0, &mut p_theta);
        let lv = tape.value(logits);
        assert_eq!(lv.shape(), &[d_p, c_s + c_t]);
        for r in 0..d_p {
            for c in 0..c_s {
                assert_eq!(lv.data()[r * (c_s + c_t) + c], p.data()[r * c_s + c]);
            }
            for c in 0..c_t {
                let got = lv.data()[r * (c_s + c_t) + c_s + c];
                let want = p_theta[r * c_t + c];
                assert!((got - want).abs() < 1e-12);
            }
        }
        // joint softmax rows sum to one
        let pv = tape.value(probs);
        for r in 0..d_p {
            let s: f64 = pv.data()[r * 16..(r + 1) * 16].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_joint_argmax_equals_pretrained_argmax() {
        // with the target block masked out, source argmax over the joint
        // head equals argmax over raw P (zero adapter)
        let dcfg = DetectorConfig::toy(12, 4);
        let mut rng = Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let flags = CtFlags::default();
        init_ct_params(&mut store, 12, 4, 3, &flags, &mut rng);
        store.insert(INC_ADAPTER, Tensor::zeros(vec![12, 12]));
        let mut tape = Tape::<f64>::new();
        let scores = toy_scores(&mut tape, &dcfg.grids(), 12, &mut rng);
        let adapter = tape.leaf(store.get(INC_ADAPTER).unwrap().clone(), false);
        let ct_ids = CtParamIds::leaf(&mut tape, &store, 3, &flags, false).unwrap();
        let (logits, _) =
            incremental_forward(&mut tape, &scores, adapter, &ct_ids, &dcfg.pooling, &flags, false)
                .unwrap();
        let lv = tape.value(logits);
        let p = tape.value(scores.flat);
        let (d_p, c_s) = p.dims2().unwrap();
        for r in 0..d_p {
            let src_row = &lv.data()[r * 16..r * 16 + c_s];
            let joint_argmax = src_row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let p_row = &p.data()[r * c_s..(r + 1) * c_s];
            let p_argmax = p_row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(joint_argmax, p_argmax);
        }
    }

    #[test]
    fn trainset_counts_and_seeding() {
        let bench = default_benchmark();
        let episode = sample_episode(
            &bench,
            &EpisodeSpec { shots: 5, trial: 0, seed: 9 },
        )
        .unwrap();
        let set = build_incremental_trainset(&bench, &episode, 5, 9).unwrap();
        // 12 source classes x 5 + 4 target classes x 5 = 80
        assert_eq!(set.len(), 80);
        let mut counts = vec![0usize; 16];
        for scene in &set {
            for ann in &scene.annotations {
                counts[ann.class_id] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 5), "{counts:?}");

        // different seeds keep target shots, change source replay
        let set2 = build_incremental_trainset(&bench, &episode, 5, 10).unwrap();
        let target_seeds = |scenes: &[Scene]| {
            let mut s: Vec<u64> = scenes
                .iter()
                .filter(|sc| sc.domain == crate::synthdata::Domain::Target)
                .map(|sc| sc.seed)
                .collect();
            s.sort_unstable();
            s
        };
        let source_seeds = |scenes: &[Scene]| {
            let mut s: Vec<u64> = scenes
                .iter()
                .filter(|sc| sc.domain == crate::synthdata::Domain::Source)
                .map(|sc| sc.seed)
                .collect();
            s.sort_unstable();
            s
        };
        assert_eq!(target_seeds(&set), target_seeds(&set2));
        assert_ne!(source_seeds(&set), source_seeds(&set2));
    }

    #[test]
    fn setup_links_every_parameter() {
        let dcfg = DetectorConfig::toy(12, 4);
        let mut rng = Rng::seed_from_u64(8);
        let mut source = ParamStore::<f64>::new();
        init_detector_params(&mut source, &dcfg, &mut rng);
        let store = setup_incremental(&source, &dcfg, &CtFlags::default(), 4).unwrap();
        assert!(store.contains(INC_ADAPTER));
        assert!(store.contains(crate::context::CT_THETA));
        assert!(store.contains("head.obj.k0.w"));
        assert!(store.get(INC_ADAPTER).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_gradcheck() {
        // small instance keeps the loss magnitude low enough for clean
        // central differences
        let grids = vec![ScaleGrid { h: 2, w: 2, m: 1 }, ScaleGrid { h: 1, w: 1, m: 2 }];
        let mut rng = Rng::seed_from_u64(11);
        let mut params = ParamStore::<f64>::new();
        let flags = CtFlags {
            mode: CtMode::Full,
            ..Default::default()
        };
        init_ct_params(&mut params, 12, 4, grids.len(), &flags, &mut rng);
        params.insert(INC_ADAPTER, Tensor::gaussian(vec![12, 12], 0.05, &mut rng));
        let fixed_scores: Vec<Tensor<f64>> = grids
            .iter()
            .map(|g| Tensor::gaussian(vec![g.h, g.w, g.m * 12], 0.5, &mut rng))
            .collect();
        let pooling = PoolingConfig {
            per_scale: vec![Some((2, 2)), None],
            ceil_mode: true,
        };
        let report = crate::tensor::finite_diff_check(
            |p| {
                let mut tape = Tape::<f64>::new();
                let per_scale: Vec<NodeId> = fixed_scores
                    .iter()
                    .map(|t| tape.leaf(t.clone(), false))
                    .collect();
                let scores =
                    SourceScoreSet::from_per_scale(&mut tape, per_scale, grids.clone(), 12)?;
                let adapter = tape.leaf(p.get(INC_ADAPTER)?.clone(), true);
                let ct_ids = CtParamIds::leaf(&mut tape, p, 2, &flags, false)?;
                let (logits, _) = incremental_forward(
                    &mut tape, &scores, adapter, &ct_ids, &pooling, &flags, false,
                )?;
                let classes: Vec<usize> = (0..tape.value(logits).shape()[0])
                    .map(|r| r % 16)
                    .collect();
                let loss = tape.cross_entropy_sum(logits, classes)?;
                let grads = tape.backward(loss)?;
                let mut out = std::collections::BTreeMap::new();
                out.insert(INC_ADAPTER.to_string(), grads.wrt(&tape, adapter));
                Ok((tape.value(loss).item(), out))
            },
            &mut params,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "adapter rel err {}", report.max_rel_err);
    }
}
