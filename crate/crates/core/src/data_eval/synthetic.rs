use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RetrievalDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the procedural fine-grained dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_categories: usize,
    pub images_per_category: usize,
    pub image_size: usize,
    /// Number of coarse body shapes shared across categories.
    pub base_shapes: usize,
    /// Scales how far apart the part markers of different categories are.
    pub part_variation_scale: f64,
    pub background_clutter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_categories: 16,
            images_per_category: 60,
            image_size: 32,
            base_shapes: 4,
            part_variation_scale: 0.3,
            background_clutter: 0.2,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

const BODY_SHAPES: [Shape; 6] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Ring,
    Shape::Cross,
];
const PART_SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Diamond, Shape::Triangle];

impl Shape {
    /// Membership test in unit coordinates (shape spans roughly [-1, 1]²).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => v <= 0.75 && v >= -1.0 + 1.75 * u.abs(),
            Shape::Diamond => u.abs() + v.abs() <= 1.05,
            Shape::Ring => {
                let r = u * u + v * v;
                (0.3..=1.0).contains(&r)
            }
            Shape::Cross => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
        }
    }
}

/// Category-level attributes of the discriminative part.
#[derive(Clone, Debug)]
struct PartStyle {
    shape: Shape,
    color: [f64; 3],
    angle: f64,
    distance: f64,
}

#[derive(Clone, Debug)]
struct Category {
    body: Shape,
    body_color: [f64; 3],
    part: PartStyle,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn categories(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Category> {
    let s = spec.part_variation_scale;
    let body_colors: Vec<[f64; 3]> = (0..spec.base_shapes)
        .map(|_| hsv(rng.gen::<f64>(), 0.25, rng.gen_range(0.55..0.75)))
        .collect();
    // part attributes spread around a shared reference, scaled by `s`
    let ref_hue: f64 = rng.gen();
    let ref_angle: f64 = rng.gen_range(0.0..2.0 * PI);
    (0..spec.num_categories)
        .map(|c| {
            let b = c % spec.base_shapes;
            let shape_idx = if s >= 0.25 {
                rng.gen_range(0..PART_SHAPES.len())
            } else {
                rng.gen_range(0..2)
            };
            let hue = ref_hue + s * rng.gen_range(-0.5..0.5);
            let value = 0.35 + 0.6 * rng.gen::<f64>().powf(1.0 - 0.5 * s);
            Category {
                body: BODY_SHAPES[b % BODY_SHAPES.len()],
                body_color: body_colors[b],
                part: PartStyle {
                    shape: PART_SHAPES[shape_idx],
                    color: hsv(hue, 0.85, value),
                    angle: ref_angle + s * rng.gen_range(-PI..PI),
                    distance: 0.55 + 0.25 * rng.gen::<f64>(),
                },
            }
        })
        .collect()
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
    mask: Vec<f32>,
}

impl Canvas {
    fn new(size: usize, bg: [f64; 3]) -> Self {
        let mut rgb = vec![0.0; 3 * size * size];
        for c in 0..3 {
            rgb[c * size * size..(c + 1) * size * size].fill(bg[c]);
        }
        Canvas {
            size,
            rgb,
            mask: vec![0.0; size * size],
        }
    }

    /// Paints `shape` centred at `(cx, cy)` with radius `r` using 4×4
    /// supersampled coverage, optionally marking the ground-truth mask.
    #[allow(clippy::too_many_arguments)]
    fn paint(&mut self, shape: Shape, cx: f64, cy: f64, r: f64, rot: f64, color: [f64; 3], alpha: f64, mark: bool) {
        let n = self.size;
        let (sin, cos) = rot.sin_cos();
        let lo_y = ((cy - 1.5 * r).floor().max(0.0)) as usize;
        let hi_y = ((cy + 1.5 * r).ceil().min(n as f64 - 1.0)).max(0.0) as usize;
        let lo_x = ((cx - 1.5 * r).floor().max(0.0)) as usize;
        let hi_x = ((cx + 1.5 * r).ceil().min(n as f64 - 1.0)).max(0.0) as usize;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let mut hits = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let px = x as f64 + (sx as f64 + 0.5) / 4.0 - cx;
                        let py = y as f64 + (sy as f64 + 0.5) / 4.0 - cy;
                        let u = (cos * px + sin * py) / r;
                        let v = (-sin * px + cos * py) / r;
                        if shape.contains(u, v) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = alpha * hits as f64 / 16.0;
                for (c, &col) in color.iter().enumerate() {
                    let p = &mut self.rgb[c * n * n + y * n + x];
                    *p = *p * (1.0 - a) + col * a;
                }
                if mark && hits >= 8 {
                    self.mask[y * n + x] = 1.0;
                }
            }
        }
    }
}

/// Renders the procedural dataset. Labels `0..num_categories/2` are seen,
/// the rest unseen.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RetrievalDataset> {
    if spec.image_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "image_size {} is too small to render parts (need ≥ 16)",
            spec.image_size
        )));
    }
    if spec.num_categories < 2 || spec.num_categories % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "num_categories must be even and ≥ 2, got {}",
            spec.num_categories
        )));
    }
    if spec.images_per_category == 0 || spec.base_shapes == 0 {
        return Err(Error::InvalidArgument(
            "images_per_category and base_shapes must be positive".into(),
        ));
    }
    if !(spec.part_variation_scale > 0.0 && spec.part_variation_scale <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "part_variation_scale must lie in (0, 1], got {}",
            spec.part_variation_scale
        )));
    }
    if !(0.0..=1.0).contains(&spec.background_clutter) {
        return Err(Error::InvalidArgument(format!(
            "background_clutter must lie in [0, 1], got {}",
            spec.background_clutter
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cats = categories(spec, &mut rng);
    let n = spec.image_size;
    let scale = n as f64 / 32.0;
    let total = spec.num_categories * spec.images_per_category;
    let mut images = Vec::with_capacity(total * 3 * n * n);
    let mut masks = Vec::with_capacity(total * n * n);
    let mut labels = Vec::with_capacity(total);
    for (label, cat) in cats.iter().enumerate() {
        for _ in 0..spec.images_per_category {
            let bg_level = rng.gen_range(0.25..0.4);
            let bg = [bg_level, bg_level, bg_level + rng.gen_range(-0.03..0.03)];
            let mut canvas = Canvas::new(n, bg);
            let clutter_items = (spec.background_clutter * 6.0).round() as usize;
            for _ in 0..clutter_items {
                let shape = BODY_SHAPES[rng.gen_range(0..BODY_SHAPES.len())];
                let col = hsv(rng.gen(), rng.gen_range(0.0..0.6), rng.gen_range(0.2..0.7));
                canvas.paint(
                    shape,
                    rng.gen_range(0.0..n as f64),
                    rng.gen_range(0.0..n as f64),
                    rng.gen_range(1.0..3.0) * scale,
                    rng.gen_range(0.0..PI),
                    col,
                    0.25 + 0.5 * spec.background_clutter,
                    false,
                );
            }
            let body_r = rng.gen_range(8.0..10.0) * scale;
            let cx = n as f64 / 2.0 + rng.gen_range(-2.0..2.0) * scale;
            let cy = n as f64 / 2.0 + rng.gen_range(-2.0..2.0) * scale;
            let mut body_col = cat.body_color;
            let shade = rng.gen_range(-0.06..0.06);
            body_col.iter_mut().for_each(|c| *c += shade);
            canvas.paint(cat.body, cx, cy, body_r, rng.gen_range(-0.15..0.15), body_col, 1.0, false);
            let p = &cat.part;
            let angle = p.angle + rng.gen_range(-0.15..0.15);
            let dist = p.distance * body_r;
            let mut part_col = p.color;
            for c in part_col.iter_mut() {
                *c += rng.gen_range(-0.03..0.03);
            }
            canvas.paint(
                p.shape,
                cx + dist * angle.cos(),
                cy + dist * angle.sin(),
                rng.gen_range(2.8..3.4) * scale,
                rng.gen_range(-0.1..0.1),
                part_col,
                1.0,
                true,
            );
            images.extend(canvas.rgb.iter().map(|&v| quantize(v)));
            masks.extend_from_slice(&canvas.mask);
            labels.push(label);
        }
    }
    let names = (0..spec.num_categories).map(|c| format!("cat{c:03}")).collect();
    RetrievalDataset::new(
        Tensor::new(vec![total, 3, n, n], images)?,
        labels,
        names,
        spec.num_categories / 2,
        Some(Tensor::new(vec![total, 1, n, n], masks)?),
    )
}
