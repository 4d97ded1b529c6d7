//! Procedural chairs and tables built from boxes and cylinders, surface
//! sampled with per-part colors.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attributes::{
    caption_with_template, full_caption, Backrest, Material, ShapeAttributes, ShapeClass, TopShape,
};
use super::cloud_io::save_cloud;
use super::manifest::{save_manifest, DatasetManifest, ShapeRecord, Split};
use crate::distractors::derive_seed;
use crate::error::{invalid, Result};
use crate::geometry::{ColoredPointCloud, Point3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Box {
        min: Point3,
        max: Point3,
    },
    /// Vertical cylinder.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        y0: f64,
        y1: f64,
    },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { min, max } => {
                let [dx, dy, dz] = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                2.0 * (dx * dy + dx * dz + dy * dz)
            }
            Primitive::Cylinder { radius, y0, y1, .. } => {
                2.0 * PI * radius * (y1 - y0) + 2.0 * PI * radius * radius
            }
        }
    }

    /// Uniform sample on the surface.
    pub fn sample(&self, rng: &mut impl Rng) -> Point3 {
        match *self {
            Primitive::Box { min, max } => {
                let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                // Face pairs by fixed axis: x-faces span (y, z), and so on.
                let areas = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && pick >= areas[axis] {
                    pick -= areas[axis];
                    axis += 1;
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        if rng.random_bool(0.5) {
                            min[a]
                        } else {
                            max[a]
                        }
                    } else {
                        rng.random_range(min[a]..=max[a])
                    };
                }
                p
            }
            Primitive::Cylinder {
                center,
                radius,
                y0,
                y1,
            } => {
                let side = 2.0 * PI * radius * (y1 - y0);
                let cap = PI * radius * radius;
                let theta = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..side + 2.0 * cap) < side {
                    [
                        center[0] + radius * theta.cos(),
                        rng.random_range(y0..=y1),
                        center[1] + radius * theta.sin(),
                    ]
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let y = if rng.random_bool(0.5) { y0 } else { y1 };
                    [center[0] + r * theta.cos(), y, center[1] + r * theta.sin()]
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartKind {
    Seat,
    Top,
    Leg,
    Backrest,
    Armrest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub kind: PartKind,
    pub shape: Primitive,
    pub color: [f64; 3],
}

fn boxed(min: Point3, max: Point3) -> Primitive {
    Primitive::Box { min, max }
}

fn leg(material: Material, x: f64, z: f64, y1: f64, thick: f64) -> Primitive {
    match material {
        Material::Wooden => boxed([x - thick, 0.0, z - thick], [x + thick, y1, z + thick]),
        Material::Metal => Primitive::Cylinder {
            center: [x, z],
            radius: thick * 0.5,
            y0: 0.0,
            y1,
        },
    }
}

/// Parts of a shape with the given attributes; proportions jitter with `rng`.
pub fn compose_parts(attrs: &ShapeAttributes, rng: &mut impl Rng) -> Vec<Part> {
    let primary = attrs.primary_color.rgb();
    let secondary = attrs.secondary_color.rgb();
    let mut parts = Vec::new();
    let mut push = |kind, shape, color| parts.push(Part { kind, shape, color });
    match attrs.class {
        ShapeClass::Chair => {
            let w = rng.random_range(0.22..0.28);
            let h = rng.random_range(0.40..0.48);
            let back = rng.random_range(0.40..0.55);
            let t = 0.03;
            push(
                PartKind::Seat,
                boxed([-w, h, -w], [w, h + 0.05, w]),
                primary,
            );
            let inset = w - t;
            let spots: Vec<[f64; 2]> = match attrs.leg_count {
                3 => vec![[-inset, inset], [inset, inset], [0.0, -inset]],
                _ => vec![
                    [-inset, -inset],
                    [inset, -inset],
                    [-inset, inset],
                    [inset, inset],
                ],
            };
            for [x, z] in spots {
                push(PartKind::Leg, leg(attrs.material, x, z, h, t), secondary);
            }
            let (y0, y1) = (h + 0.05, h + 0.05 + back);
            match attrs.backrest.unwrap_or(Backrest::Solid) {
                Backrest::Solid => push(
                    PartKind::Backrest,
                    boxed([-w, y0, -w], [w, y1, -w + 0.04]),
                    secondary,
                ),
                Backrest::Slatted => {
                    for x in [-w + 0.03, 0.0, w - 0.03] {
                        push(
                            PartKind::Backrest,
                            boxed([x - 0.025, y0, -w], [x + 0.025, y1 - 0.06, -w + 0.03]),
                            secondary,
                        );
                    }
                    push(
                        PartKind::Backrest,
                        boxed([-w, y1 - 0.06, -w], [w, y1, -w + 0.04]),
                        secondary,
                    );
                }
            }
            if attrs.armrests {
                for s in [-1.0, 1.0] {
                    let x = s * w;
                    push(
                        PartKind::Armrest,
                        boxed([x - 0.025, h + 0.20, -w + 0.05], [x + 0.025, h + 0.24, w]),
                        secondary,
                    );
                    push(
                        PartKind::Armrest,
                        boxed(
                            [x - 0.02, h + 0.05, w - 0.05],
                            [x + 0.02, h + 0.20, w - 0.01],
                        ),
                        secondary,
                    );
                }
            }
        }
        ShapeClass::Table => {
            let s = rng.random_range(0.45..0.55);
            let height = rng.random_range(0.65..0.75);
            let top = match attrs.top_shape.unwrap_or(TopShape::Square) {
                TopShape::Square => boxed([-s, height - 0.05, -s], [s, height, s]),
                TopShape::Round => Primitive::Cylinder {
                    center: [0.0, 0.0],
                    radius: s,
                    y0: height - 0.05,
                    y1: height,
                },
            };
            push(PartKind::Top, top, primary);
            let n = attrs.leg_count as usize;
            let offset = if n == 4 { PI / 4.0 } else { PI / 2.0 };
            for k in 0..n {
                let a = offset + 2.0 * PI * k as f64 / n as f64;
                let r = 0.7 * s;
                push(
                    PartKind::Leg,
                    leg(
                        attrs.material,
                        r * a.cos(),
                        r * a.sin(),
                        height - 0.05,
                        0.035,
                    ),
                    secondary,
                );
            }
        }
    }
    parts
}

/// Surface samples of the composed parts, `n` points, part chosen by area.
pub fn sample_parts(parts: &[Part], n: usize, rng: &mut impl Rng) -> ColoredPointCloud {
    let weights =
        WeightedIndex::new(parts.iter().map(|p| p.shape.area())).expect("positive part areas");
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let part = &parts[weights.sample(rng)];
        // Values are stored as f32 on disk, so round here to keep the
        // in-memory cloud equal to what a reload produces.
        points.push(part.shape.sample(rng).map(|v| v as f32 as f64));
        colors.push(part.color.map(|v| v as f32 as f64));
    }
    ColoredPointCloud::new(points, colors).expect("sampled values are finite and in range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub chairs: usize,
    pub tables: usize,
    pub points: usize,
    /// Captions per shape: the full caption followed by distinct templates.
    pub captions_per_shape: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            chairs: 32,
            tables: 32,
            points: 2048,
            captions_per_shape: 3,
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// A generated shape before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShape {
    pub shape_id: String,
    pub attributes: ShapeAttributes,
    pub captions: Vec<String>,
    pub cloud: ColoredPointCloud,
}

pub fn synthesize(class: ShapeClass, index: usize, cfg: &SyntheticConfig) -> SyntheticShape {
    let shape_id = format!("{}_{index:04}", class.label());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &shape_id));
    let attributes = ShapeAttributes::sample(class, &mut rng);
    let parts = compose_parts(&attributes, &mut rng);
    let cloud = sample_parts(&parts, cfg.points, &mut rng);
    let mut templates: Vec<usize> = (0..5).collect();
    templates.shuffle(&mut rng);
    let mut captions = vec![full_caption(&attributes)];
    captions.extend(
        templates
            .iter()
            .take(cfg.captions_per_shape.saturating_sub(1))
            .map(|&t| caption_with_template(&attributes, t)),
    );
    captions.truncate(cfg.captions_per_shape);
    SyntheticShape {
        shape_id,
        attributes,
        captions,
        cloud,
    }
}

fn assign_splits(count: usize, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let train = (cfg.train_fraction * count as f64).round() as usize;
    let val = (cfg.val_fraction * count as f64).round() as usize;
    let mut splits = vec![Split::Test; count];
    for (rank, &i) in order.iter().enumerate() {
        if rank < train {
            splits[i] = Split::Train;
        } else if rank < train + val {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// Generates every shape in memory, split per class.
pub fn generate_shapes(cfg: &SyntheticConfig) -> Result<Vec<(SyntheticShape, Split)>> {
    if cfg.chairs + cfg.tables == 0 || cfg.points == 0 || cfg.captions_per_shape == 0 {
        return Err(invalid!(
            "need at least one shape, one point and one caption"
        ));
    }
    if !(0.0..=1.0).contains(&(cfg.train_fraction + cfg.val_fraction))
        || cfg.train_fraction < 0.0
        || cfg.val_fraction < 0.0
    {
        return Err(invalid!(
            "split fractions must be non-negative and sum to at most 1"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "splits"));
    let mut out = Vec::new();
    for (class, count) in [
        (ShapeClass::Chair, cfg.chairs),
        (ShapeClass::Table, cfg.tables),
    ] {
        let splits = assign_splits(count, cfg, &mut rng);
        let shapes: Vec<SyntheticShape> = (0..count)
            .into_par_iter()
            .map(|i| synthesize(class, i, cfg))
            .collect();
        out.extend(shapes.into_iter().zip(splits));
    }
    Ok(out)
}

/// Writes clouds under `out_dir/clouds` and the manifest to
/// `out_dir/manifest.jsonl`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let shapes = generate_shapes(cfg)?;
    let mut manifest = DatasetManifest::new(out_dir);
    manifest.generator = Some(serde_json::to_value(cfg)?);
    shapes.par_iter().try_for_each(|(s, _)| {
        save_cloud(
            &s.cloud,
            &out_dir.join("clouds").join(format!("{}.cpc", s.shape_id)),
        )
    })?;
    for (s, split) in shapes {
        manifest.records.push(ShapeRecord {
            shape_id: s.shape_id.clone(),
            cloud: PathBuf::from("clouds").join(format!("{}.cpc", s.shape_id)),
            class_label: s.attributes.class.label().to_string(),
            captions: s.captions,
            split,
            attributes: Some(s.attributes),
            distractors: None,
        });
    }
    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
