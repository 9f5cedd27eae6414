//! Deterministic context-discriminative detection benchmark.
//!
//! Source and target class sets are disjoint. The target set contains
//! confusion groups: pairs of classes sharing a glyph shape with colors only
//! a small perturbation apart, so the annotated glyph alone is a weak signal.
//! Each group member co-occurs with its own unlabeled context glyph, which is
//! the only reliable way to tell the members apart.

mod dump;
mod render;

pub use dump::{dump_scenes, DumpRecord};
pub use render::render_scene;

use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphShape {
    Circle,
    Square,
    Triangle,
    Cross,
    Bar,
    Ring,
}

/// Visual recipe for one glyph kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub shape: GlyphShape,
    pub color: [f64; 3],
    /// Glyph side as a fraction of the image side, sampled uniformly.
    pub size_range: (f64, f64),
    /// Per-instance Gaussian color jitter (per channel).
    pub color_jitter: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    pub glyph: GlyphSpec,
    pub domain: Domain,
    pub confusion_group: Option<usize>,
    /// Unlabeled glyph that co-occurs with every instance of this class.
    pub context_glyph: Option<GlyphSpec>,
}

#[derive(Clone, Debug)]
pub struct Annotation {
    pub bbox: BBox,
    pub class_id: usize,
}

/// One rendered image with its ground truth.
#[derive(Clone, Debug)]
pub struct Scene {
    /// H x W x 3 values in [0,1].
    pub image: Tensor<f64>,
    pub annotations: Vec<Annotation>,
    pub seed: u64,
    pub domain: Domain,
}

/// The full class inventory plus rendering geometry.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub image_size: usize,
    pub source: Vec<ClassSpec>,
    pub target: Vec<ClassSpec>,
}

impl Benchmark {
    pub fn num_source(&self) -> usize {
        self.source.len()
    }

    pub fn num_target(&self) -> usize {
        self.target.len()
    }

    /// Position of a global class id within the source list.
    pub fn source_index(&self, class_id: usize) -> Option<usize> {
        self.source.iter().position(|c| c.id == class_id)
    }

    /// Position of a global class id within the target list.
    pub fn target_index(&self, class_id: usize) -> Option<usize> {
        self.target.iter().position(|c| c.id == class_id)
    }
}

const SOURCE_SIZE: (f64, f64) = (0.22, 0.42);
const TARGET_SIZE: (f64, f64) = (0.25, 0.40);
const CONTEXT_SIZE: (f64, f64) = (0.16, 0.22);
const FG_JITTER: f64 = 0.03;

fn glyph(shape: GlyphShape, color: [f64; 3], size: (f64, f64)) -> GlyphSpec {
    GlyphSpec {
        shape,
        color,
        size_range: size,
        color_jitter: FG_JITTER,
    }
}

/// 12 visually distinct source classes and 4 target classes arranged in two
/// confusion groups of two. Group members share shape and near-identical
/// color; each member has its own context glyph styled after a source class.
pub fn default_benchmark() -> Benchmark {
    use GlyphShape::*;
    let src: [(GlyphShape, [f64; 3], &str); 12] = [
        (Circle, [0.85, 0.15, 0.15], "red-circle"),
        (Square, [0.15, 0.80, 0.20], "green-square"),
        (Triangle, [0.20, 0.30, 0.90], "blue-triangle"),
        (Cross, [0.90, 0.85, 0.10], "yellow-cross"),
        (Bar, [0.85, 0.20, 0.80], "magenta-bar"),
        (Ring, [0.10, 0.80, 0.85], "cyan-ring"),
        (Circle, [0.10, 0.50, 0.10], "darkgreen-circle"),
        (Square, [0.95, 0.55, 0.10], "orange-square"),
        (Triangle, [0.95, 0.60, 0.70], "pink-triangle"),
        (Cross, [0.10, 0.55, 0.50], "teal-cross"),
        (Bar, [0.95, 0.95, 0.95], "white-bar"),
        (Ring, [0.55, 0.20, 0.90], "violet-ring"),
    ];
    let source: Vec<ClassSpec> = src
        .iter()
        .enumerate()
        .map(|(i, (shape, color, name))| ClassSpec {
            id: i,
            name: (*name).to_string(),
            glyph: glyph(*shape, *color, SOURCE_SIZE),
            domain: Domain::Source,
            confusion_group: None,
            context_glyph: None,
        })
        .collect();

    // context glyphs reuse source-class looks so the pretrained classifier
    // recognizes them
    let ctx_yellow_cross = glyph(Cross, [0.90, 0.85, 0.10], CONTEXT_SIZE);
    let ctx_magenta_bar = glyph(Bar, [0.85, 0.20, 0.80], CONTEXT_SIZE);
    let ctx_red_circle = glyph(Circle, [0.85, 0.15, 0.15], CONTEXT_SIZE);
    let ctx_cyan_ring = glyph(Ring, [0.10, 0.80, 0.85], CONTEXT_SIZE);

    let target = vec![
        ClassSpec {
            id: 12,
            name: "amber-ring-a".to_string(),
            glyph: glyph(Ring, [0.93, 0.46, 0.12], TARGET_SIZE),
            domain: Domain::Target,
            confusion_group: Some(0),
            context_glyph: Some(ctx_yellow_cross),
        },
        ClassSpec {
            id: 13,
            name: "amber-ring-b".to_string(),
            glyph: glyph(Ring, [0.925, 0.465, 0.125], TARGET_SIZE),
            domain: Domain::Target,
            confusion_group: Some(0),
            context_glyph: Some(ctx_magenta_bar),
        },
        ClassSpec {
            id: 14,
            name: "plum-square-a".to_string(),
            glyph: glyph(Square, [0.46, 0.12, 0.60], TARGET_SIZE),
            domain: Domain::Target,
            confusion_group: Some(1),
            context_glyph: Some(ctx_red_circle),
        },
        ClassSpec {
            id: 15,
            name: "plum-square-b".to_string(),
            glyph: glyph(Square, [0.47, 0.13, 0.59], TARGET_SIZE),
            domain: Domain::Target,
            confusion_group: Some(1),
            context_glyph: Some(ctx_cyan_ring),
        },
    ];
    Benchmark {
        image_size: 64,
        source,
        target,
    }
}

// ── Episodes and datasets ────────────────────────────────────────────

/// Few-shot episode request: N shots per target class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub shots: usize,
    pub trial: u64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

const TARGET_TEST_SEED: u64 = 0x7e57_5e7_0001;
const SOURCE_TEST_SEED: u64 = 0x7e57_5e7_0002;
const SOURCE_TRAIN_STREAM: u64 = 0x50;
const EPISODE_TRAIN_STREAM: u64 = 0x51;

pub const TEST_SCENES_PER_SET: usize = 200;

fn render_target_scene(bench: &Benchmark, classes: &[usize], seed: u64) -> Result<Scene> {
    let draws: Vec<&ClassSpec> = classes.iter().map(|&c| &bench.target[c]).collect();
    let mut rng = Rng::seed_from_u64(derive_seed(seed, 0xC1))
        ;
    let clutter = rng.below(2);
    render_scene(bench.image_size, &draws, seed, clutter, false)
}

/// N seeded training scenes per target class plus the fixed test set.
///
/// The test set depends only on the benchmark, so episodes differing in seed
/// or trial share it and differ only in their training shots.
pub fn sample_episode(bench: &Benchmark, spec: &EpisodeSpec) -> Result<Episode> {
    if spec.shots == 0 {
        return Err(Error::Parameter("shots must be >= 1".into()));
    }
    let stream = derive_seed(derive_seed(spec.seed, spec.trial), EPISODE_TRAIN_STREAM);
    let mut train = Vec::with_capacity(spec.shots * bench.num_target());
    for (ci, _) in bench.target.iter().enumerate() {
        for s in 0..spec.shots {
            let scene_seed = derive_seed(stream, (ci * 1_000_003 + s) as u64);
            train.push(render_target_scene(bench, &[ci], scene_seed)?);
        }
    }
    Ok(Episode {
        train,
        test: target_test_set(bench)?,
    })
}

/// Fixed 200-scene target-domain test set (1-2 objects per scene).
pub fn target_test_set(bench: &Benchmark) -> Result<Vec<Scene>> {
    (0..TEST_SCENES_PER_SET)
        .map(|i| {
            let seed = derive_seed(TARGET_TEST_SEED, i as u64);
            let mut rng = Rng::seed_from_u64(derive_seed(seed, 0xA7));
            let first = rng.below(bench.num_target());
            let mut classes = vec![first];
            if rng.next_f64() < 0.35 {
                let second = rng.below(bench.num_target());
                if second != first {
                    classes.push(second);
                }
            }
            render_target_scene(bench, &classes, seed)
        })
        .collect()
}

/// One scene of a seeded target-domain stream (used for dumps and affinity
/// inspection; episodes use `sample_episode`).
pub fn target_stream_scene(bench: &Benchmark, index: u64, seed: u64) -> Result<Scene> {
    let scene_seed = derive_seed(derive_seed(seed, 0x7A), index);
    let mut rng = Rng::seed_from_u64(derive_seed(scene_seed, 0xA9));
    let class = rng.below(bench.num_target());
    render_target_scene(bench, &[class], scene_seed)
}

/// One scene of the (unbounded) seeded source training stream.
pub fn source_train_scene(bench: &Benchmark, index: u64, seed: u64) -> Result<Scene> {
    let scene_seed = derive_seed(derive_seed(seed, SOURCE_TRAIN_STREAM), index);
    let mut rng = Rng::seed_from_u64(derive_seed(scene_seed, 0xB3));
    let n_obj = 1 + rng.below(3);
    let mut classes = Vec::new();
    for _ in 0..n_obj {
        classes.push(rng.below(bench.num_source()));
    }
    classes.dedup();
    let draws: Vec<&ClassSpec> = classes.iter().map(|&c| &bench.source[c]).collect();
    let clutter = rng.below(3);
    render_scene(bench.image_size, &draws, scene_seed, clutter, false)
}

/// Fixed 200-scene source-domain test set.
pub fn source_test_set(bench: &Benchmark) -> Result<Vec<Scene>> {
    (0..TEST_SCENES_PER_SET)
        .map(|i| {
            let seed = derive_seed(SOURCE_TEST_SEED, i as u64);
            let mut rng = Rng::seed_from_u64(derive_seed(seed, 0xB4));
            let n_obj = 1 + rng.below(2);
            let mut classes = Vec::new();
            for _ in 0..n_obj {
                classes.push(rng.below(bench.num_source()));
            }
            classes.dedup();
            let draws: Vec<&ClassSpec> = classes.iter().map(|&c| &bench.source[c]).collect();
            render_scene(bench.image_size, &draws, seed, rng.below(3), false)
        })
        .collect()
}

// ── Confusability witness ────────────────────────────────────────────

/// Nearest-centroid accuracy of raw pixel crops, used to certify that
/// confusion-group members are not separable from their annotated pixels.
#[derive(Clone, Debug, Serialize)]
pub struct CentroidProbeReport {
    /// 4-way accuracy over all target classes.
    pub overall_accuracy: f64,
    /// (group id, within-group accuracy restricted to that group's members).
    pub within_group_accuracy: Vec<(usize, f64)>,
}

const PROBE_CROP: usize = 12;

fn crop_resize(scene: &Scene, bbox: &BBox, out: usize) -> Vec<f64> {
    let size = scene.image.shape()[0];
    let s = size as f64;
    let (x0, y0, x1, y1) = bbox.corners();
    let (px0, py0) = (x0 * s, y0 * s);
    let (pw, ph) = (((x1 - x0) * s).max(1.0), ((y1 - y0) * s).max(1.0));
    let data = scene.image.data();
    let mut crop = vec![0.0; out * out * 3];
    for oy in 0..out {
        for ox in 0..out {
            let sx = px0 + (ox as f64 + 0.5) / out as f64 * pw;
            let sy = py0 + (oy as f64 + 0.5) / out as f64 * ph;
            let ix = (sx.floor() as usize).min(size - 1);
            let iy = (sy.floor() as usize).min(size - 1);
            for c in 0..3 {
                crop[(oy * out + ox) * 3 + c] = data[(iy * size + ix) * 3 + c];
            }
        }
    }
    crop
}

fn probe_crops(
    bench: &Benchmark,
    class_idx: usize,
    count: usize,
    stream: u64,
    strip_context: bool,
) -> Result<Vec<Vec<f64>>> {
    (0..count)
        .map(|i| {
            let seed = derive_seed(stream, (class_idx * 7_919 + i) as u64);
            let scene = render_scene(
                bench.image_size,
                &[&bench.target[class_idx]],
                seed,
                0,
                strip_context,
            )?;
            Ok(crop_resize(&scene, &scene.annotations[0].bbox, PROBE_CROP))
        })
        .collect()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centroids.iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Trains per-class pixel centroids on `n_train` crops and classifies
/// `n_test` held-out crops per class.
pub fn centroid_probe(
    bench: &Benchmark,
    n_train: usize,
    n_test: usize,
    strip_context: bool,
) -> Result<CentroidProbeReport> {
    let ct = bench.num_target();
    let mut centroids = Vec::with_capacity(ct);
    for ci in 0..ct {
        let crops = probe_crops(bench, ci, n_train, 0xCE17_0A11, strip_context)?;
        let dim = crops[0].len();
        let mut mean = vec![0.0; dim];
        for crop in &crops {
            for (m, v) in mean.iter_mut().zip(crop) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= crops.len() as f64;
        }
        centroids.push(mean);
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    let mut group_hits: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for ci in 0..ct {
        let crops = probe_crops(bench, ci, n_test, 0xCE17_7E57, strip_context)?;
        let group = bench.target[ci].confusion_group;
        // group-restricted centroid set for the within-group score
        let members: Vec<usize> = (0..ct)
            .filter(|&j| bench.target[j].confusion_group == group)
            .collect();
        for crop in &crops {
            total += 1;
            if nearest(&centroids, crop) == ci {
                correct += 1;
            }
            if let Some(g) = group {
                let member_centroids: Vec<Vec<f64>> =
                    members.iter().map(|&j| centroids[j].clone()).collect();
                let pick = members[nearest(&member_centroids, crop)];
                let entry = group_hits.entry(g).or_insert((0, 0));
                entry.1 += 1;
                if pick == ci {
                    entry.0 += 1;
                }
            }
        }
    }
    Ok(CentroidProbeReport {
        overall_accuracy: correct as f64 / total as f64,
        within_group_accuracy: group_hits
            .into_iter()
            .map(|(g, (hit, tot))| (g, hit as f64 / tot as f64))
            .collect(),
    })
}
