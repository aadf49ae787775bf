//! Browser demo over the label-space pipeline: draw a procedural scene, apply
//! change events to it, and compare contour updates after removals.
//!
//! Post-event images keep the pre-event pixels outside the change mask and
//! render the new labels inside it, which is the fully guided limit of
//! masked change sampling without a denoiser.

use changen_core::procedural::{class_color, gen_procedural_scene, render_mask, SceneSpec, ShapeFamily};
use changen_core::rng::derive_stream;
use changen_core::{
    dilate, extract_contours, simulate_event, BinaryGrid, ChangeMask, Condition, EventKind, EventSpec,
    InstanceMap, RgbImage, SemanticMask, TransitionMatrix,
};
use wasm_bindgen::prelude::*;

fn js_err(e: changen_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Naive and dilated-erase contours after one removal.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourComparison {
    pub naive: BinaryGrid,
    pub erased: BinaryGrid,
    pub dilated_change: BinaryGrid,
}

impl ContourComparison {
    /// Pixels where the two contours disagree.
    pub fn disagreement(&self) -> usize {
        self.naive.zip_map(&self.erased, |a, b| a != b).map_or(0, |g| g.popcount())
    }

    /// Contour pixels of the erase update that fall inside the dilated change.
    pub fn erased_inside_change(&self) -> usize {
        self.erased.zip_map(&self.dilated_change, |a, b| a && b).map_or(0, |g| g.popcount())
    }
}

/// A scene and its event history.
#[wasm_bindgen]
pub struct Timeline {
    spec: SceneSpec,
    seed: u64,
    image: RgbImage,
    mask: SemanticMask,
    instances: InstanceMap,
    previous: RgbImage,
    change: ChangeMask,
    events: u32,
}

#[wasm_bindgen]
impl Timeline {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, classes: u16, shapes: &str) -> Result<Timeline, JsError> {
        let shape_family = match shapes {
            "rectangles" => ShapeFamily::Rectangles,
            "blobs" => ShapeFamily::Blobs,
            _ => ShapeFamily::Mixed,
        };
        let spec = SceneSpec {
            height: size,
            width: size,
            num_classes: classes,
            shape_family,
            ..Default::default()
        };
        Self::from_spec(spec, u64::from(seed)).map_err(js_err)
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn events(&self) -> u32 {
        self.events
    }

    pub fn foreground(&self) -> usize {
        self.mask.foreground_count()
    }

    pub fn changed(&self) -> usize {
        self.change.grid().popcount()
    }

    /// Applies a `create`, `remove` or `edit` event; returns the number of changed pixels.
    pub fn apply(&mut self, kind: &str, probability: f64) -> Result<usize, JsError> {
        let kind = match kind {
            "create" => EventKind::Create,
            "remove" => EventKind::Remove,
            "edit" => EventKind::Edit,
            other => return Err(JsError::new(&format!("unknown event kind {other:?}"))),
        };
        self.apply_kind(kind, probability).map_err(js_err)
    }

    /// Removes objects from the contour view of the current scene without
    /// changing it; returns RGBA of the comparison: white where both updates
    /// keep a contour, red where only the naive recomputation does, blue for
    /// the dilated change.
    pub fn contour_preview(&self, probability: f64, radius: usize) -> Result<Vec<u8>, JsError> {
        let cmp = self.compare_contours(probability, radius).map_err(js_err)?;
        Ok(comparison_rgba(&cmp))
    }

    /// `[disagreeing pixels, erase-update pixels inside the dilated change]`.
    pub fn contour_counts(&self, probability: f64, radius: usize) -> Result<Vec<u32>, JsError> {
        let cmp = self.compare_contours(probability, radius).map_err(js_err)?;
        Ok(vec![cmp.disagreement() as u32, cmp.erased_inside_change() as u32])
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.image)
    }

    pub fn previous_rgba(&self) -> Vec<u8> {
        rgba(&self.previous)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        let (h, w) = self.mask.shape();
        let mut out = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let c = class_color(self.mask.get(y, x));
                out.extend_from_slice(&[c[0], c[1], c[2], 255]);
            }
        }
        out
    }

    pub fn change_rgba(&self) -> Vec<u8> {
        binary_rgba(self.change.grid(), [255, 255, 255])
    }
}

impl Timeline {
    pub fn from_spec(spec: SceneSpec, seed: u64) -> changen_core::Result<Self> {
        let scene = gen_procedural_scene(&spec, seed)?;
        let (h, w) = scene.mask.shape();
        Ok(Self {
            spec,
            seed,
            previous: scene.image.clone(),
            image: scene.image,
            mask: scene.mask,
            instances: scene.instances,
            change: ChangeMask::zeros(h, w),
            events: 0,
        })
    }

    pub fn mask(&self) -> &SemanticMask {
        &self.mask
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn change(&self) -> &ChangeMask {
        &self.change
    }

    fn event_seed(&self, label: &str) -> u64 {
        derive_stream(derive_stream(self.seed, label), u64::from(self.events).to_string().as_str())
    }

    pub fn apply_kind(&mut self, kind: EventKind, probability: f64) -> changen_core::Result<usize> {
        let seed = self.event_seed("event");
        let spec = match kind {
            EventKind::Edit => EventSpec::edit(probability, seed, TransitionMatrix::uniform(usize::from(self.spec.num_classes))?),
            _ => EventSpec::new(kind, probability, seed),
        };
        let out = simulate_event(&Condition::Semantic(self.mask.clone()), &self.instances, &spec)?;
        let next = out.next.as_semantic().cloned().expect("semantic events keep semantic conditions");
        let rendered = render_mask(&next, &out.next_instances, self.event_seed("render"));
        let (h, w) = next.shape();
        let mut image = self.image.clone();
        for y in 0..h {
            for x in 0..w {
                if out.change.grid().get(y, x) {
                    image.set_pixel(y, x, rendered.pixel(y, x));
                }
            }
        }
        self.previous = std::mem::replace(&mut self.image, image);
        self.mask = next;
        self.instances = out.next_instances;
        self.change = out.change;
        self.events += 1;
        Ok(self.change.grid().popcount())
    }

    pub fn compare_contours(&self, probability: f64, radius: usize) -> changen_core::Result<ContourComparison> {
        let contour = extract_contours(&self.instances);
        let spec = EventSpec::contour_remove(probability, self.event_seed("contour"), radius);
        let out = simulate_event(&Condition::Contour(contour), &self.instances, &spec)?;
        let erased = out.next.as_contour().expect("contour events keep contour conditions").grid().clone();
        Ok(ContourComparison {
            naive: extract_contours(&out.next_instances).into_grid(),
            erased,
            dilated_change: dilate(out.change.grid(), radius),
        })
    }
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.as_bytes().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn binary_rgba(grid: &BinaryGrid, on: [u8; 3]) -> Vec<u8> {
    grid.as_slice()
        .iter()
        .flat_map(|&b| if b { [on[0], on[1], on[2], 255] } else { [0, 0, 0, 255] })
        .collect()
}

fn comparison_rgba(cmp: &ContourComparison) -> Vec<u8> {
    let cells = cmp.naive.as_slice().iter().zip(cmp.erased.as_slice()).zip(cmp.dilated_change.as_slice());
    cells
        .flat_map(|((&naive, &erased), &changed)| match (naive, erased, changed) {
            (_, true, _) => [255, 255, 255, 255],
            (true, false, _) => [230, 40, 40, 255],
            (false, false, true) => [30, 60, 140, 255],
            _ => [0, 0, 0, 255],
        })
        .collect()
}
