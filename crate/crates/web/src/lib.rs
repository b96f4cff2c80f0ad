//! Browser demo over the core crate: render a synthetic scene, round-trip an
//! instance mask through the crop and paste steps, and list a mask head's
//! layers. Every export is a thin wrapper over a plain Rust function so the
//! logic is testable off the browser.

use std::fmt::Write as _;

use ctseg::data::{generate, Category, DatasetConfig, Record};
use ctseg::eval::mask_iou;
use ctseg::heads::{build_mask_head, LayerKind, MaskHeadSpec};
use ctseg::mask::BinaryMask;
use ctseg::model::crop_target_mask;
use ctseg::roi::paste_mask;
use wasm_bindgen::prelude::*;

/// Instances the demo scene may hold.
const MAX_INSTANCES: usize = 3;

/// One validation-split image with every instance annotated.
#[wasm_bindgen]
pub struct Scene {
    record: Record,
    seen: Vec<Category>,
}

/// Result of cropping a groundtruth mask to `crop × crop` and pasting it back.
#[wasm_bindgen]
pub struct RoundTrip {
    iou: f64,
    rgba: Vec<u8>,
}

pub fn make_scene(seed: u64, instances: usize) -> Result<Scene, String> {
    let n = instances.clamp(1, MAX_INSTANCES);
    let cfg = DatasetConfig {
        train_count: 0,
        val_count: 1,
        min_instances: n,
        max_instances: n,
        seed,
        ..DatasetConfig::default()
    };
    let mut d = generate(&cfg).map_err(|e| e.to_string())?;
    Ok(Scene {
        record: d.val.remove(0),
        seen: d.config.seen,
    })
}

fn to_rgba(rgb: &[u8]) -> Vec<u8> {
    rgb.chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

impl Scene {
    fn mask(&self, i: usize) -> Result<&BinaryMask, String> {
        let a = self
            .record
            .annotations
            .get(i)
            .ok_or_else(|| format!("no instance {i}"))?;
        a.mask
            .as_ref()
            .ok_or_else(|| format!("instance {i} has no mask"))
    }

    pub fn round_trip_with(&self, i: usize, crop: usize) -> Result<RoundTrip, String> {
        if !(2..=64).contains(&crop) {
            return Err(format!("crop size {crop} outside 2..=64"));
        }
        let gt = self.mask(i)?;
        let bbox = self.record.annotations[i].bbox;
        let target = crop_target_mask(gt, &bbox, crop);
        let img = &self.record.image;
        let back =
            paste_mask(&target, &bbox, img.height, img.width, 0.5).map_err(|e| e.to_string())?;
        let iou = mask_iou(gt, &back).map_err(|e| e.to_string())?;
        let mut rgba = to_rgba(&img.data);
        for (k, px) in rgba.chunks_exact_mut(4).enumerate() {
            let (a, b) = (gt.bits()[k], back.bits()[k]);
            let tint = match (a, b) {
                (true, true) => Some([40, 200, 90]),
                (true, false) => Some([230, 50, 50]),
                (false, true) => Some([60, 90, 240]),
                (false, false) => None,
            };
            if let Some(t) = tint {
                for c in 0..3 {
                    px[c] = ((u16::from(px[c]) + 3 * t[c]) / 4) as u8;
                }
            }
        }
        Ok(RoundTrip { iou, rgba })
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.record.image.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.record.image.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        to_rgba(&self.record.image.data)
    }

    #[wasm_bindgen(js_name = instanceCount)]
    pub fn instance_count(&self) -> usize {
        self.record.annotations.len()
    }

    /// `ymin, xmin, ymax, xmax` in normalized coordinates.
    #[wasm_bindgen(js_name = boxOf)]
    pub fn box_of(&self, i: usize) -> Vec<f64> {
        self.record
            .annotations
            .get(i)
            .map(|a| vec![a.bbox.ymin, a.bbox.xmin, a.bbox.ymax, a.bbox.xmax])
            .unwrap_or_default()
    }

    #[wasm_bindgen(js_name = categoryOf)]
    pub fn category_of(&self, i: usize) -> String {
        self.record
            .annotations
            .get(i)
            .map(|a| a.category.name().to_string())
            .unwrap_or_default()
    }

    #[wasm_bindgen(js_name = isSeen)]
    pub fn is_seen(&self, i: usize) -> bool {
        self.record
            .annotations
            .get(i)
            .is_some_and(|a| self.seen.contains(&a.category))
    }

    #[wasm_bindgen(js_name = roundTrip)]
    pub fn round_trip(&self, i: usize, crop: usize) -> Result<RoundTrip, JsError> {
        self.round_trip_with(i, crop).map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen]
impl RoundTrip {
    #[wasm_bindgen(getter)]
    pub fn iou(&self) -> f64 {
        self.iou
    }

    /// Scene pixels tinted green where both masks agree, red where only the
    /// groundtruth is set and blue where only the pasted mask is.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

/// Layer table of a preset head built for `crop × crop` inputs.
pub fn inventory_text(name: &str, crop: usize, width_divisor: usize) -> Result<String, String> {
    let spec = MaskHeadSpec::preset(name)
        .map_err(|e| e.to_string())?
        .with_width_divisor(width_divisor.max(1));
    let net = build_mask_head::<f32>(&spec, 48, crop, 0).map_err(|e| e.to_string())?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>5} {:>5} {:>5} {:>3} {:>9}",
        "kind", "size", "in", "out", "dil", "params"
    );
    for l in net.layer_inventory() {
        if matches!(l.kind, LayerKind::BatchNorm) {
            continue;
        }
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>5} {:>5} {:>3} {:>9}",
            format!("{:?}", l.kind),
            l.size,
            l.in_channels,
            l.out_channels,
            l.dilation,
            l.params
        );
    }
    let _ = writeln!(s, "total trainable parameters: {}", net.count_parameters());
    Ok(s)
}

#[wasm_bindgen(js_name = generateScene)]
pub fn generate_scene(seed: u32, instances: usize) -> Result<Scene, JsError> {
    make_scene(u64::from(seed), instances).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = headInventory)]
pub fn head_inventory(name: &str, crop: usize, width_divisor: usize) -> Result<String, JsError> {
    inventory_text(name, crop, width_divisor).map_err(|e| JsError::new(&e))
}

/// Preset names, newline separated.
#[wasm_bindgen(js_name = headNames)]
pub fn head_names() -> String {
    MaskHeadSpec::preset_names().join("\n")
}
