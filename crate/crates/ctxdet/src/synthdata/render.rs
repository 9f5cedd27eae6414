//! Scene rasterization: value-noise backgrounds and antialiased glyph
//! painting, fully determined by a scene seed.

use super::{Annotation, ClassSpec, Domain, GlyphShape, GlyphSpec, Scene};
use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const PLACEMENT_TRIES: usize = 60;
const MAX_OVERLAP: f64 = 0.8;
/// Context glyphs draw from their own stream so stripping them leaves the
/// rest of the scene bit-identical.
const CONTEXT_STREAM: u64 = 0xC017;

/// Bilinear value noise on a coarse lattice, smoothstep-interpolated.
fn value_noise(size: usize, cell: usize, rng: &mut Rng) -> Vec<f64> {
    let lattice = size / cell + 2;
    let values: Vec<f64> = (0..lattice * lattice).map(|_| rng.next_f64()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let v00 = values[y0 * lattice + x0];
            let v01 = values[y0 * lattice + x0 + 1];
            let v10 = values[(y0 + 1) * lattice + x0];
            let v11 = values[(y0 + 1) * lattice + x0 + 1];
            let top = v00 + (v01 - v00) * sx;
            let bot = v10 + (v11 - v10) * sx;
            out[y * size + x] = top + (bot - top) * sy;
        }
    }
    out
}

fn paint_background(img: &mut [f64], size: usize, rng: &mut Rng) {
    let base = rng.range_f64(0.36, 0.50);
    let tint = [
        rng.range_f64(-0.03, 0.03),
        rng.range_f64(-0.03, 0.03),
        rng.range_f64(-0.03, 0.03),
    ];
    let coarse = value_noise(size, 16, rng);
    let fine = value_noise(size, 4, rng);
    for y in 0..size {
        for x in 0..size {
            let n = base + 0.10 * (coarse[y * size + x] - 0.5) + 0.05 * (fine[y * size + x] - 0.5);
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = (n + tint[c]).clamp(0.0, 1.0);
            }
        }
    }
}

/// Approximate signed distance (in glyph-local units where the glyph fits in
/// the unit disk) used for membership and a ~1px antialiased edge.
fn shape_distance(shape: GlyphShape, u: f64, v: f64) -> f64 {
    match shape {
        GlyphShape::Circle => (u * u + v * v).sqrt() - 1.0,
        GlyphShape::Square => u.abs().max(v.abs()) - 0.78,
        GlyphShape::Triangle => {
            // upward equilateral-ish triangle spanning v in [-1, 0.75]
            let slope = u.abs() * (1.75 / 0.866) - (v + 1.0);
            (v - 0.75).max(slope * 0.5)
        }
        GlyphShape::Cross => {
            let arm_a = (u.abs() - 0.32).max(v.abs() - 1.0);
            let arm_b = (v.abs() - 0.32).max(u.abs() - 1.0);
            arm_a.min(arm_b)
        }
        GlyphShape::Bar => (u.abs() - 1.0).max(v.abs() - 0.38),
        GlyphShape::Ring => {
            let q = (u * u + v * v).sqrt();
            (0.55 - q).max(q - 1.0)
        }
    }
}

struct Painted {
    bbox: BBox,
}

/// Paints one glyph and returns the tight box around its solid pixels,
/// normalized to [0,1].
#[allow(clippy::too_many_arguments)]
fn paint_glyph(
    img: &mut [f64],
    size: usize,
    shape: GlyphShape,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
) -> Painted {
    let s = size as f64;
    let r_px = radius * s;
    let (sin, cos) = rotation.sin_cos();
    let reach = (r_px * 1.5).ceil() as isize;
    let px_cx = cx * s;
    let px_cy = cy * s;
    let x_lo = ((px_cx as isize) - reach).max(0) as usize;
    let x_hi = (((px_cx as isize) + reach) as usize).min(size - 1);
    let y_lo = ((px_cy as isize) - reach).max(0) as usize;
    let y_hi = (((px_cy as isize) + reach) as usize).min(size - 1);

    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = (x as f64 + 0.5) - px_cx;
            let dy = (y as f64 + 0.5) - px_cy;
            // inverse-rotate into glyph-local coordinates
            let u = (dx * cos + dy * sin) / r_px;
            let v = (-dx * sin + dy * cos) / r_px;
            let d = shape_distance(shape, u, v);
            let alpha = (0.5 - d * r_px).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let idx = (y * size + x) * 3;
                for c in 0..3 {
                    img[idx + c] = ((1.0 - alpha) * img[idx + c] + alpha * color[c]).clamp(0.0, 1.0);
                }
                if alpha > 0.5 {
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
    }
    if min_x == usize::MAX {
        // degenerate (fully off-image); callers prevent this via margins
        min_x = x_lo;
        min_y = y_lo;
        max_x = x_lo;
        max_y = y_lo;
    }
    Painted {
        bbox: BBox::from_corners(
            min_x as f64 / s,
            min_y as f64 / s,
            (max_x + 1) as f64 / s,
            (max_y + 1) as f64 / s,
        ),
    }
}

fn overlap_ratio(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let smaller = a.area().min(b.area());
    if smaller <= 0.0 {
        0.0
    } else {
        inter / smaller
    }
}

struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
}

/// Rejection-samples a center whose nominal box overlaps every existing box
/// by at most `MAX_OVERLAP` of the smaller area.
fn place(
    rng: &mut Rng,
    size_frac: f64,
    occupied: &[BBox],
    keep_away: Option<(f64, f64, f64)>,
) -> Option<Placement> {
    let radius = size_frac / 2.0;
    let margin = radius * 1.3;
    if margin >= 0.5 {
        return None;
    }
    for _ in 0..PLACEMENT_TRIES {
        let cx = rng.range_f64(margin, 1.0 - margin);
        let cy = rng.range_f64(margin, 1.0 - margin);
        let candidate = BBox::new(cx, cy, size_frac, size_frac);
        if let Some((ax, ay, min_dist)) = keep_away {
            let d = ((cx - ax) * (cx - ax) + (cy - ay) * (cy - ay)).sqrt();
            if d < min_dist {
                continue;
            }
        }
        if occupied
            .iter()
            .all(|b| overlap_ratio(&candidate, b) <= MAX_OVERLAP)
        {
            let rotation = rng.range_f64(-0.45, 0.45);
            return Some(Placement {
                cx,
                cy,
                radius,
                rotation,
            });
        }
    }
    None
}

fn jitter_color(color: [f64; 3], rng: &mut Rng, sigma: f64) -> [f64; 3] {
    [
        (color[0] + rng.next_gaussian() * sigma).clamp(0.0, 1.0),
        (color[1] + rng.next_gaussian() * sigma).clamp(0.0, 1.0),
        (color[2] + rng.next_gaussian() * sigma).clamp(0.0, 1.0),
    ]
}

/// Renders a scene containing the given class draws.
///
/// Stochasticity is a pure function of `seed`. Foreground glyphs are
/// annotated; context glyphs and clutter are painted but never annotated.
/// Context glyphs draw from a derived stream, so `strip_context` removes them
/// without disturbing anything else.
pub fn render_scene(
    image_size: usize,
    draws: &[&ClassSpec],
    seed: u64,
    clutter: usize,
    strip_context: bool,
) -> Result<Scene> {
    if draws.is_empty() {
        return Err(Error::Parameter("scene needs at least one foreground object".into()));
    }
    let domain = if draws.iter().any(|c| c.domain == Domain::Target) {
        Domain::Target
    } else {
        Domain::Source
    };
    let mut rng = Rng::seed_from_u64(seed);
    let size = image_size;
    let mut img = vec![0.0f64; size * size * 3];
    paint_background(&mut img, size, &mut rng);

    let mut occupied: Vec<BBox> = Vec::new();
    let mut annotations = Vec::new();
    let mut context_requests: Vec<(GlyphSpec, f64, f64, f64)> = Vec::new();

    // clutter first so foreground stays visible
    for _ in 0..clutter {
        let shade = rng.range_f64(0.25, 0.6);
        let color = [shade, shade, shade];
        let size_frac = rng.range_f64(0.08, 0.14);
        let shapes = [GlyphShape::Square, GlyphShape::Bar, GlyphShape::Circle];
        let shape = shapes[rng.below(shapes.len())];
        if let Some(p) = place(&mut rng, size_frac, &occupied, None) {
            paint_glyph(&mut img, size, shape, color, p.cx, p.cy, p.radius, p.rotation);
        }
    }

    for class in draws {
        let size_frac = rng.range_f64(class.glyph.size_range.0, class.glyph.size_range.1);
        let color = jitter_color(class.glyph.color, &mut rng, class.glyph.color_jitter);
        let p = place(&mut rng, size_frac, &occupied, None).ok_or_else(|| {
            Error::Placement(format!(
                "no room for class {} after {PLACEMENT_TRIES} tries",
                class.id
            ))
        })?;
        let painted = paint_glyph(
            &mut img,
            size,
            class.glyph.shape,
            color,
            p.cx,
            p.cy,
            p.radius,
            p.rotation,
        );
        occupied.push(painted.bbox);
        annotations.push(Annotation {
            bbox: painted.bbox,
            class_id: class.id,
        });
        if let Some(ctx) = &class.context_glyph {
            // one glyph-width away from its object
            context_requests.push((ctx.clone(), p.cx, p.cy, size_frac));
        }
    }

    if !strip_context {
        let mut ctx_rng = Rng::seed_from_u64(derive_seed(seed, CONTEXT_STREAM));
        for (ctx, ox, oy, obj_size) in &context_requests {
            let size_frac = ctx_rng.range_f64(ctx.size_range.0, ctx.size_range.1);
            let color = jitter_color(ctx.color, &mut ctx_rng, ctx.color_jitter);
            let min_dist = obj_size.max(size_frac);
            let p = place(&mut ctx_rng, size_frac, &occupied, Some((*ox, *oy, min_dist)))
                .ok_or_else(|| {
                    Error::Placement(format!(
                        "no room for context glyph after {PLACEMENT_TRIES} tries"
                    ))
                })?;
            let painted = paint_glyph(
                &mut img,
                size,
                ctx.shape,
                color,
                p.cx,
                p.cy,
                p.radius,
                p.rotation,
            );
            occupied.push(painted.bbox);
        }
    }

    let image = Tensor::new(vec![size, size, 3], img)?;
    Ok(Scene {
        image,
        annotations,
        seed,
        domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::default_benchmark;

    #[test]
    fn same_seed_bit_identical() {
        let bench = default_benchmark();
        let draws = vec![&bench.target[0]];
        let a = render_scene(64, &draws, 99, 1, false).unwrap();
        let b = render_scene(64, &draws, 99, 1, false).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.annotations.len(), b.annotations.len());
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.class_id, y.class_id);
        }
    }

    #[test]
    fn stripping_context_preserves_annotations() {
        let bench = default_benchmark();
        let draws = vec![&bench.target[1]];
        let with = render_scene(64, &draws, 7, 0, false).unwrap();
        let without = render_scene(64, &draws, 7, 0, true).unwrap();
        assert_eq!(with.annotations.len(), without.annotations.len());
        for (a, b) in with.annotations.iter().zip(&without.annotations) {
            assert_eq!(a.bbox, b.bbox);
        }
        // images differ (the context glyph is gone)
        assert_ne!(with.image.data(), without.image.data());
    }

    #[test]
    fn boxes_inside_unit_square() {
        let bench = default_benchmark();
        for i in 0..50 {
            let class = &bench.source[i % bench.source.len()];
            let scene = render_scene(64, &[class], 1000 + i as u64, 2, false).unwrap();
            for ann in &scene.annotations {
                let (x0, y0, x1, y1) = ann.bbox.corners();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0);
                assert!(x1 > x0 && y1 > y0);
            }
        }
    }

    #[test]
    fn pixels_in_range() {
        let bench = default_benchmark();
        let scene = render_scene(64, &[&bench.target[2]], 5, 2, false).unwrap();
        assert!(scene
            .image
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn overcrowded_scene_errors() {
        let bench = default_benchmark();
        // far more large glyphs than a 64x64 image can host under the budget
        let draws: Vec<&ClassSpec> = (0..40).map(|i| &bench.source[i % 12]).collect();
        let err = render_scene(64, &draws, 3, 0, false);
        assert!(matches!(err, Err(Error::Placement(_))));
    }
}
