//! Deterministic synthetic corpus: each class is one (shape, fill, background,
//! scale band) tuple, and instances vary in position, rotation, size and noise.

use std::f32::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Image, Item, LabeledImageSet};
use crate::error::{validation, Error, Result};
use crate::seed::derive_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Bar,
        ShapeKind::Ring,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
        }
    }

    /// Membership in shape-local coordinates where the shape spans roughly
    /// the unit disc.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => {
                let s = 3f32.sqrt();
                v <= 0.5 && v >= s * u - 1.0 && v >= -s * u - 1.0
            }
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.3) || (u.abs() <= 0.3 && v.abs() <= 1.0)
            }
        }
    }
}

const FILLS: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.95]),
    ("yellow", [0.95, 0.90, 0.15]),
    ("magenta", [0.85, 0.20, 0.85]),
    ("cyan", [0.15, 0.85, 0.90]),
];

const BACKGROUNDS: [(&str, [f32; 3]); 4] = [
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.50, 0.50, 0.50]),
    ("brown", [0.45, 0.30, 0.15]),
];

/// Shape radius as a fraction of the shorter image side.
const SCALE_BANDS: [(&str, [f32; 2]); 2] = [("small", [0.18, 0.26]), ("large", [0.32, 0.42])];

const NOISE_STD: f32 = 0.06;

/// Per-image, per-channel offset applied to the fill and background colours.
const COLOR_JITTER: f32 = 0.12;

/// Radius range of the distractor blob, as a fraction of the shorter side.
const DISTRACTOR_RADIUS: [f32; 2] = [0.06, 0.10];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: (usize, usize),
}

impl ShapesSpec {
    /// Number of distinct attribute tuples available to classes.
    pub const CAPACITY: usize =
        ShapeKind::ALL.len() * FILLS.len() * BACKGROUNDS.len() * SCALE_BANDS.len();

    pub fn new(n_classes: usize, per_class: usize, size: usize) -> Self {
        ShapesSpec {
            n_classes,
            per_class,
            image_size: (size, size),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassAttrs {
    shape: ShapeKind,
    fill: usize,
    background: usize,
    band: usize,
}

impl ClassAttrs {
    fn name(&self) -> String {
        format!(
            "{}-{}-on-{}-{}",
            self.shape.name(),
            FILLS[self.fill].0,
            BACKGROUNDS[self.background].0,
            SCALE_BANDS[self.band].0
        )
    }
}

fn all_tuples() -> Vec<ClassAttrs> {
    let mut out = Vec::with_capacity(ShapesSpec::CAPACITY);
    for shape in ShapeKind::ALL {
        for fill in 0..FILLS.len() {
            for background in 0..BACKGROUNDS.len() {
                for band in 0..SCALE_BANDS.len() {
                    out.push(ClassAttrs {
                        shape,
                        fill,
                        background,
                        band,
                    });
                }
            }
        }
    }
    out
}

fn render(attrs: &ClassAttrs, (h, w): (usize, usize), rng: &mut impl Rng) -> Image {
    let side = h.min(w) as f32;
    let [lo, hi] = SCALE_BANDS[attrs.band].1;
    let radius = side * rng.gen_range(lo..=hi);
    let cy = h as f32 / 2.0 + rng.gen_range(-0.12..=0.12) * side;
    let cx = w as f32 / 2.0 + rng.gen_range(-0.12..=0.12) * side;
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (sin, cos) = angle.sin_cos();
    let mut jittered = |c: [f32; 3]| c.map(|v| (v + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0));
    let fill = jittered(FILLS[attrs.fill].1);
    let bg = jittered(BACKGROUNDS[attrs.background].1);
    let blob: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let blob_r = side * rng.gen_range(DISTRACTOR_RADIUS[0]..=DISTRACTOR_RADIUS[1]);
    let blob_y = rng.gen_range(0.0..h as f32);
    let blob_x = rng.gen_range(0.0..w as f32);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("positive std");

    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            // 2x2 supersampling for soft edges
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dy = (y as f32 + oy - cy) / radius;
                let dx = (x as f32 + ox - cx) / radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if attrs.shape.contains(u, v) {
                    cover += 0.25;
                }
            }
            let (by, bx) = ((y as f32 + 0.5 - blob_y) / blob_r, (x as f32 + 0.5 - blob_x) / blob_r);
            let in_blob = by * by + bx * bx <= 1.0;
            for c in 0..3 {
                let under = if in_blob { blob[c] } else { bg[c] };
                let base = fill[c] * cover + under * (1.0 - cover);
                data.push((base + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height: h,
        width: w,
        channels: 3,
        data,
    }
}

/// Generates `n_classes * per_class` images. The output is a pure function of
/// `(spec, seed)`; every image draws from its own derived stream.
pub fn generate_shapes(spec: &ShapesSpec, seed: u64) -> Result<LabeledImageSet> {
    if spec.per_class == 0 || spec.n_classes == 0 {
        return Err(validation("shapes corpus needs at least one class and one image per class"));
    }
    if spec.image_size.0 < 8 || spec.image_size.1 < 8 {
        return Err(validation("shapes images must be at least 8x8"));
    }
    if spec.n_classes > ShapesSpec::CAPACITY {
        return Err(Error::Capacity(format!(
            "{} classes requested but the attribute grammar has {} tuples",
            spec.n_classes,
            ShapesSpec::CAPACITY
        )));
    }
    let mut tuples = all_tuples();
    tuples.shuffle(&mut derive_rng(seed, "shapes-classes", &[]));
    tuples.truncate(spec.n_classes);

    let jobs: Vec<(usize, usize)> = (0..spec.n_classes)
        .flat_map(|c| (0..spec.per_class).map(move |i| (c, i)))
        .collect();
    let items: Vec<Item> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let mut rng = derive_rng(seed, "shapes-image", &[c as u64, i as u64]);
            Item {
                id: format!("{c}/{i}"),
                class_id: c,
                image: Arc::new(render(&tuples[c], spec.image_size, &mut rng)),
            }
        })
        .collect();
    LabeledImageSet::new(items, tuples.iter().map(ClassAttrs::name).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_classes() {
        let set = generate_shapes(&ShapesSpec::new(30, 4, 16), 1).unwrap();
        assert_eq!(set.len(), 120);
        assert_eq!(set.num_classes(), 30);
        let mut names = set.class_names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 30);
    }

    #[test]
    fn generation_is_bit_identical() {
        let spec = ShapesSpec::new(5, 3, 20);
        let a = generate_shapes(&spec, 42).unwrap();
        let b = generate_shapes(&spec, 42).unwrap();
        assert_eq!(a.class_names(), b.class_names());
        for (x, y) in a.items().iter().zip(b.items()) {
            assert_eq!(x.image.data, y.image.data);
        }
        let c = generate_shapes(&spec, 43).unwrap();
        assert_ne!(a.items()[0].image.data, c.items()[0].image.data);
    }

    #[test]
    fn instances_vary_within_a_class() {
        let set = generate_shapes(&ShapesSpec::new(1, 2, 32), 0).unwrap();
        assert_ne!(set.items()[0].image.data, set.items()[1].image.data);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(matches!(
            generate_shapes(&ShapesSpec::new(3, 0, 16), 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            generate_shapes(&ShapesSpec::new(ShapesSpec::CAPACITY + 1, 1, 16), 0),
            Err(Error::Capacity(_))
        ));
        assert!(generate_shapes(&ShapesSpec::new(ShapesSpec::CAPACITY, 1, 8), 0).is_ok());
    }

    #[test]
    fn shapes_cover_a_reasonable_area() {
        for shape in ShapeKind::ALL {
            let mut hits = 0;
            for i in 0..100 {
                for j in 0..100 {
                    let (u, v) = (i as f32 / 50.0 - 1.0, j as f32 / 50.0 - 1.0);
                    hits += shape.contains(u, v) as usize;
                }
            }
            assert!(hits > 1000 && hits < 9000, "{}: {hits}", shape.name());
        }
    }
}
