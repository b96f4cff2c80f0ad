//! Differentiable RoIAlign crop and the inverse mask paste.
//!
//! Alignment convention: pixel `i` covers the continuous span `[i, i + 1)`
//! and its value sits at the center `i + 0.5`. A box in normalized
//! coordinates maps to the continuous span `[ymin * H, ymax * H)`. Each of
//! the `S × S` output cells is sampled at its center (or at a 2×2 grid of
//! quarter points) by bilinear interpolation, with indices clamped at the
//! border so every output is a convex combination of input values.
//!
//! Gradients flow into the feature map only, never into box coordinates.

use log::warn;

use crate::autodiff::{GatherPlan, Graph, Var};
use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};
use crate::tensor::{Real, Tensor};

/// A box attached to one image of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub bbox: BBox,
}

/// Bilinear taps `(row, col, weight)` at continuous point `(y, x)` of an
/// `h × w` grid, with edge clamping.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let yy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let xx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = yy.floor() as usize;
    let x0 = xx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = yy - y0 as f64;
    let lx = xx - x0 as f64;
    [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ]
}

/// Validates a box for cropping: out-of-range coordinates are clamped with a
/// warning, zero-area boxes are rejected.
pub fn prepare_box(b: &BBox) -> Result<BBox> {
    let (c, moved) = b.clamped();
    if moved {
        warn!("box {b:?} clamped to the unit square");
    }
    if !c.is_valid() {
        return Err(Error::DegenerateBox(format!("{b:?}")));
    }
    Ok(c)
}

fn sample_offsets(samples_per_cell: usize) -> Result<&'static [f64]> {
    match samples_per_cell {
        1 => Ok(&[0.5]),
        4 => Ok(&[0.25, 0.75]),
        n => Err(Error::InvalidArgument(format!(
            "samples_per_cell must be 1 or 4, got {n}"
        ))),
    }
}

/// Gather plan cropping every roi of a `(B, H, W, C)` map to `S × S` cells.
pub fn roi_align_plan<T: Real>(
    batch: usize,
    height: usize,
    width: usize,
    rois: &[Roi],
    out_size: usize,
    samples_per_cell: usize,
) -> Result<GatherPlan<T>> {
    if out_size == 0 {
        return Err(Error::InvalidArgument("out_size must be positive".into()));
    }
    let offsets = sample_offsets(samples_per_cell)?;
    let weight_scale = 1.0 / (offsets.len() * offsets.len()) as f64;
    let mut plan = GatherPlan::new();
    let mut taps = Vec::with_capacity(16);
    for roi in rois {
        if roi.batch >= batch {
            return Err(Error::InvalidArgument(format!(
                "roi batch index {} out of {batch}",
                roi.batch
            )));
        }
        let b = prepare_box(&roi.bbox)?;
        let y0 = b.ymin * height as f64;
        let x0 = b.xmin * width as f64;
        let ch = b.height() * height as f64 / out_size as f64;
        let cw = b.width() * width as f64 / out_size as f64;
        let base = roi.batch * height * width;
        for i in 0..out_size {
            for j in 0..out_size {
                taps.clear();
                for &oy in offsets {
                    for &ox in offsets {
                        let y = y0 + (i as f64 + oy) * ch;
                        let x = x0 + (j as f64 + ox) * cw;
                        for (r, c, wgt) in bilinear_taps(y, x, height, width) {
                            if wgt != 0.0 {
                                taps.push((base + r * width + c, T::of(wgt * weight_scale)));
                            }
                        }
                    }
                }
                plan.push_output(taps.iter().copied());
            }
        }
    }
    Ok(plan)
}

/// Crops a single `(H, W, C)` feature map; no graph involved.
pub fn roi_align<T: Real>(
    features: &Tensor<T>,
    bbox: &BBox,
    out_size: usize,
    samples_per_cell: usize,
) -> Result<Tensor<T>> {
    let [h, w, c] = *features.shape() else {
        return Err(Error::shape(
            "roi_align",
            format!("expected HWC, got {:?}", features.shape()),
        ));
    };
    let plan = roi_align_plan::<T>(
        1,
        h,
        w,
        &[Roi {
            batch: 0,
            bbox: *bbox,
        }],
        out_size,
        samples_per_cell,
    )?;
    Tensor::new(&[out_size, out_size, c], plan.apply(features.data(), c))
}

/// Differentiable crop of a `(B, H, W, C)` map to `(K, S, S, C)`.
pub fn roi_align_var<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    rois: &[Roi],
    out_size: usize,
    samples_per_cell: usize,
) -> Result<Var> {
    let [b, h, w, c] = *g.shape(features) else {
        return Err(Error::shape(
            "roi_align",
            format!("expected NHWC, got {:?}", g.shape(features)),
        ));
    };
    let plan = roi_align_plan(b, h, w, rois, out_size, samples_per_cell)?;
    g.gather(features, plan, &[rois.len(), out_size, out_size, c])
}

/// Bilinear read of a `(B, H, W, C)` map at each roi's center, giving `(K, C)`.
pub fn center_read_var<T: Real>(g: &mut Graph<T>, features: Var, rois: &[Roi]) -> Result<Var> {
    let [b, h, w, c] = *g.shape(features) else {
        return Err(Error::shape(
            "center_read",
            format!("expected NHWC, got {:?}", g.shape(features)),
        ));
    };
    let mut plan = GatherPlan::new();
    for roi in rois {
        if roi.batch >= b {
            return Err(Error::InvalidArgument(format!(
                "roi batch index {} out of {b}",
                roi.batch
            )));
        }
        let (bx, _) = roi.bbox.clamped();
        let (cy, cx) = bx.center();
        let base = roi.batch * h * w;
        plan.push_output(
            bilinear_taps(cy * h as f64, cx * w as f64, h, w)
                .into_iter()
                .filter(|t| t.2 != 0.0)
                .map(|(r, cc, wgt)| (base + r * w + cc, T::of(wgt))),
        );
    }
    g.gather(features, plan, &[rois.len(), c])
}

/// Resizes an `S × S` probability map into the box footprint of an
/// `image_h × image_w` image and binarizes at `threshold` (inclusive).
///
/// The footprint is the set of pixels whose centers lie in the box. A box
/// whose footprint holds no pixel center yields an empty mask.
pub fn paste_mask(
    pred: &Tensor<f64>,
    bbox: &BBox,
    image_h: usize,
    image_w: usize,
    threshold: f64,
) -> Result<BinaryMask> {
    let [s, s2] = *pred.shape() else {
        return Err(Error::shape(
            "paste_mask",
            format!("expected SxS, got {:?}", pred.shape()),
        ));
    };
    if s != s2 {
        return Err(Error::shape(
            "paste_mask",
            format!("non-square prediction {s}x{s2}"),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let (b, _) = bbox.clamped();
    let mut mask = BinaryMask::new(image_h, image_w);
    let (y0, y1) = (b.ymin * image_h as f64, b.ymax * image_h as f64);
    let (x0, x1) = (b.xmin * image_w as f64, b.xmax * image_w as f64);
    if y1 <= y0 || x1 <= x0 {
        return Ok(mask);
    }
    // pixels with centers in [y0, y1)
    let r_start = (y0 - 0.5).ceil().max(0.0) as usize;
    let c_start = (x0 - 0.5).ceil().max(0.0) as usize;
    let data = pred.data();
    for r in r_start..image_h {
        let yc = r as f64 + 0.5;
        if yc >= y1 {
            break;
        }
        let v = (yc - y0) / (y1 - y0) * s as f64;
        for c in c_start..image_w {
            let xc = c as f64 + 0.5;
            if xc >= x1 {
                break;
            }
            let u = (xc - x0) / (x1 - x0) * s as f64;
            let p: f64 = bilinear_taps(v, u, s, s)
                .iter()
                .map(|&(rr, cc, w)| w * data[rr * s + cc])
                .sum();
            if p >= threshold {
                mask.set(r, c, true);
            }
        }
    }
    Ok(mask)
}
