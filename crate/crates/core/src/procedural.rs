//! Procedural labelled scenes: a textured background with non-overlapping
//! textured objects, rendered together with their exact masks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid};
use crate::image::RgbImage;
use crate::rng::{derive_stream, rng, StageRng};
use crate::scene::{connected_components, dilate, Connectivity, InstanceMap, SemanticMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rectangles,
    Blobs,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: u16,
    /// Inclusive.
    pub object_count_range: (usize, usize),
    /// Inclusive object side length (rectangles) or diameter (blobs), in pixels.
    pub object_size_range: (usize, usize),
    pub shape_family: ShapeFamily,
    pub texture_seed: u64,
    /// Minimum background gap between objects.
    #[serde(default = "default_margin")]
    pub margin: usize,
}

fn default_margin() -> usize {
    1
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            object_count_range: (3, 8),
            object_size_range: (6, 16),
            shape_family: ShapeFamily::Mixed,
            texture_seed: 0,
            margin: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (cmin, cmax) = self.object_count_range;
        let (smin, smax) = self.object_size_range;
        if self.height == 0 || self.width == 0 {
            return Err(Error::Parameter("scene must be non-empty".into()));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Parameter("num_classes must be in [2, 256]".into()));
        }
        if cmin > cmax || smin > smax || smin == 0 {
            return Err(Error::Parameter("object ranges must be non-empty".into()));
        }
        if smax > self.height.min(self.width) {
            return Err(Error::Parameter(format!(
                "object size {smax} does not fit a {}x{} canvas",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacedObject {
    pub id: u32,
    pub class: u8,
    pub pixels: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct ProceduralScene {
    pub image: RgbImage,
    pub mask: SemanticMask,
    pub instances: InstanceMap,
    pub objects: Vec<PlacedObject>,
    /// Objects dropped because no free placement was found.
    pub skipped: usize,
}

const PALETTE: [[u8; 3]; 8] = [
    [120, 110, 70],
    [215, 215, 220],
    [40, 70, 150],
    [40, 125, 50],
    [150, 40, 40],
    [205, 165, 40],
    [150, 60, 175],
    [30, 175, 185],
];

/// Base colour of a class; classes past the fixed palette get hashed colours.
pub fn class_color(class: u8) -> [u8; 3] {
    match PALETTE.get(usize::from(class)) {
        Some(&c) => c,
        None => {
            let h = crate::rng::derive_seed(0xc010, u64::from(class)).to_le_bytes();
            [h[0], h[1], h[2]]
        }
    }
}

/// Class whose palette colour is nearest (Euclidean) to `rgb`.
pub fn nearest_class(rgb: [u8; 3], num_classes: u16) -> u8 {
    (0..num_classes)
        .map(|c| c as u8)
        .min_by_key(|&c| {
            let p = class_color(c);
            (0..3)
                .map(|i| (i32::from(p[i]) - i32::from(rgb[i])).pow(2))
                .sum::<i32>()
        })
        .unwrap_or(0)
}

const NOISE_AMPLITUDE: f64 = 11.0;
const TINT_AMPLITUDE: i32 = 7;
const LATTICE: usize = 8;

/// Smooth value noise in [−1, 1] on a coarse lattice, bilinearly interpolated.
fn value_noise(rng: &mut StageRng, h: usize, w: usize) -> Grid<f32> {
    let lh = h / LATTICE + 2;
    let lw = w / LATTICE + 2;
    let lattice = Grid::from_fn(lh, lw, |_, _| rng.random_range(-1.0f32..1.0));
    let fine = Grid::from_fn(h, w, |_, _| rng.random_range(-0.35f32..0.35));
    Grid::from_fn(h, w, |y, x| {
        let fy = y as f32 / LATTICE as f32;
        let fx = x as f32 / LATTICE as f32;
        let (y0, x0) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let a = lattice.get(y0, x0) * (1.0 - tx) + lattice.get(y0, x0 + 1) * tx;
        let b = lattice.get(y0 + 1, x0) * (1.0 - tx) + lattice.get(y0 + 1, x0 + 1) * tx;
        ((a * (1.0 - ty) + b * ty) * 0.65 + fine.get(y, x)).clamp(-1.0, 1.0)
    })
}

fn shade(base: [u8; 3], tint: [i32; 3], noise: f32) -> [u8; 3] {
    let n = (f64::from(noise) * NOISE_AMPLITUDE).round() as i32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (i32::from(base[c]) + tint[c] + n).clamp(0, 255) as u8;
    }
    out
}

fn rectangle(rng: &mut StageRng, smin: usize, smax: usize) -> Vec<(usize, usize)> {
    let h = rng.random_range(smin..=smax);
    let w = rng.random_range(smin..=smax);
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect()
}

fn blob(rng: &mut StageRng, smin: usize, smax: usize) -> Vec<(usize, usize)> {
    let d = rng.random_range(smin..=smax);
    let r = d as f64 / 2.0;
    let a1 = rng.random_range(0.0..0.2);
    let a2 = rng.random_range(0.0..0.12);
    let p1 = rng.random_range(0.0..std::f64::consts::TAU);
    let p2 = rng.random_range(0.0..std::f64::consts::TAU);
    let c = (d as f64 - 1.0) / 2.0;
    let inside = Grid::from_fn(d, d, |y, x| {
        let (dy, dx) = (y as f64 - c, x as f64 - c);
        let theta = dy.atan2(dx);
        let radius = r * (1.0 - a1 - a2 + a1 * (2.0 * theta + p1).cos() + a2 * (3.0 * theta + p2).cos());
        (dy * dy + dx * dx).sqrt() <= radius.max(0.5)
    });
    // keep the largest 8-connected piece
    let cc = connected_components(&inside, Connectivity::Eight);
    let supports = cc.supports();
    let best = supports
        .values()
        .max_by_key(|p| p.len())
        .cloned()
        .unwrap_or_else(|| vec![(d / 2, d / 2)]);
    let y0 = best.iter().map(|p| p.0).min().unwrap_or(0);
    let x0 = best.iter().map(|p| p.1).min().unwrap_or(0);
    best.into_iter().map(|(y, x)| (y - y0, x - x0)).collect()
}

/// Deterministic scene for `(spec, seed)`.
pub fn gen_procedural_scene(spec: &SceneSpec, seed: u64) -> Result<ProceduralScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut layout_rng = rng(derive_stream(seed, "layout"));
    let mut texture_rng = rng(derive_stream(seed ^ spec.texture_seed, "texture"));

    let count = layout_rng.random_range(spec.object_count_range.0..=spec.object_count_range.1);
    let mut occupied = BinaryGrid::zeros(h, w);
    let mut ids = Grid::filled(h, w, 0u32);
    let mut objects = Vec::new();
    let mut skipped = 0;
    let (smin, smax) = spec.object_size_range;
    for _ in 0..count {
        let class = layout_rng.random_range(1..spec.num_classes) as u8;
        let use_blob = match spec.shape_family {
            ShapeFamily::Rectangles => false,
            ShapeFamily::Blobs => true,
            ShapeFamily::Mixed => layout_rng.random_bool(0.5),
        };
        let shape = if use_blob {
            blob(&mut layout_rng, smin, smax)
        } else {
            rectangle(&mut layout_rng, smin, smax)
        };
        let bh = shape.iter().map(|p| p.0).max().unwrap_or(0) + 1;
        let bw = shape.iter().map(|p| p.1).max().unwrap_or(0) + 1;
        let guard = dilate(&occupied, spec.margin);
        let mut placed = None;
        for _ in 0..64 {
            let ay = layout_rng.random_range(0..=h - bh);
            let ax = layout_rng.random_range(0..=w - bw);
            if shape.iter().all(|&(dy, dx)| !guard.get(ay + dy, ax + dx)) {
                placed = Some((ay, ax));
                break;
            }
        }
        let Some((ay, ax)) = placed else {
            skipped += 1;
            continue;
        };
        let id = objects.len() as u32 + 1;
        let pixels: Vec<(usize, usize)> = shape.iter().map(|&(dy, dx)| (ay + dy, ax + dx)).collect();
        for &(y, x) in &pixels {
            occupied.set(y, x, true);
            ids.set(y, x, id);
        }
        objects.push(PlacedObject { id, class, pixels });
    }

    let noise = value_noise(&mut texture_rng, h, w);
    let mut classes = Grid::filled(h, w, 0u8);
    let mut image = RgbImage::filled(h, w, class_color(0));
    for (y, x, n) in noise.iter_coords() {
        image.set_pixel(y, x, shade(class_color(0), [0; 3], n));
    }
    let mut class_of = BTreeMap::new();
    for obj in &objects {
        let t = texture_rng.random_range(-TINT_AMPLITUDE..=TINT_AMPLITUDE);
        let tint = [
            t + texture_rng.random_range(-2..=2),
            t + texture_rng.random_range(-2..=2),
            t + texture_rng.random_range(-2..=2),
        ];
        for &(y, x) in &obj.pixels {
            classes.set(y, x, obj.class);
            image.set_pixel(y, x, shade(class_color(obj.class), tint, noise.get(y, x)));
        }
        class_of.insert(obj.id, obj.class);
    }
    let mask = SemanticMask::with_default_background(classes, spec.num_classes)?;
    let instances = InstanceMap::new(ids, class_of)?;
    Ok(ProceduralScene {
        image,
        mask,
        instances,
        objects,
        skipped,
    })
}

/// Renders an image for an arbitrary semantic mask with the procedural
/// palette; used to texture conditions that have no source image.
pub fn render_mask(mask: &SemanticMask, instances: &InstanceMap, seed: u64) -> RgbImage {
    let (h, w) = mask.shape();
    let mut texture_rng = rng(derive_stream(seed, "texture"));
    let noise = value_noise(&mut texture_rng, h, w);
    let mut tints = BTreeMap::new();
    for id in instances.ids() {
        tints.insert(id, texture_rng.random_range(-TINT_AMPLITUDE..=TINT_AMPLITUDE));
    }
    let mut image = RgbImage::filled(h, w, class_color(0));
    for (y, x, n) in noise.iter_coords() {
        let id = instances.grid().get(y, x);
        let t = tints.get(&id).copied().unwrap_or(0);
        image.set_pixel(y, x, shade(class_color(mask.get(y, x)), [t; 3], n));
    }
    image
}
