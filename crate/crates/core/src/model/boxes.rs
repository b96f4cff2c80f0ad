use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::InstanceAnnotation;
use crate::mask::{BBox, BinaryMask};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoxMode {
    GtOnly,
    ProposalsPlusGt,
}

impl BoxMode {
    pub fn name(self) -> &'static str {
        match self {
            BoxMode::GtOnly => "gt_only",
            BoxMode::ProposalsPlusGt => "proposals_plus_gt",
        }
    }

    pub fn parse(s: &str) -> Option<BoxMode> {
        [BoxMode::GtOnly, BoxMode::ProposalsPlusGt]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// Simulated proposal noise around a groundtruth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterConfig {
    pub min_iou: f64,
    /// Standard deviation of the center shift, as a fraction of box extent.
    pub shift: f64,
    /// Standard deviation of the log side-length change.
    pub scale: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            min_iou: 0.5,
            shift: 0.15,
            scale: 0.2,
        }
    }
}

const JITTER_ATTEMPTS: usize = 100;

/// One perturbed copy of `gt` with IoU at least `cfg.min_iou`, falling back
/// to `gt` itself when rejection sampling runs dry.
pub fn jitter_box<R: Rng + ?Sized>(gt: &BBox, cfg: &JitterConfig, rng: &mut R) -> BBox {
    if cfg.shift == 0.0 && cfg.scale == 0.0 {
        return *gt;
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (cy, cx) = gt.center();
    let (h, w) = (gt.height(), gt.width());
    for _ in 0..JITTER_ATTEMPTS {
        let mut z = || std_normal.sample(rng);
        let ncy = cy + cfg.shift * h * z();
        let ncx = cx + cfg.shift * w * z();
        let nh = h * (cfg.scale * z()).exp();
        let nw = w * (cfg.scale * z()).exp();
        let (b, _) = BBox {
            ymin: ncy - nh / 2.0,
            xmin: ncx - nw / 2.0,
            ymax: ncy + nh / 2.0,
            xmax: ncx + nw / 2.0,
        }
        .clamped();
        if b.is_valid() && b.iou(gt) >= cfg.min_iou {
            return b;
        }
    }
    *gt
}

/// Training boxes, each paired with the index of the annotation whose mask
/// supervises it.
pub fn make_training_boxes<R: Rng + ?Sized>(
    gt: &[InstanceAnnotation],
    mode: BoxMode,
    jitter: &JitterConfig,
    rng: &mut R,
) -> Vec<(BBox, usize)> {
    let mut out: Vec<(BBox, usize)> = gt.iter().enumerate().map(|(i, a)| (a.bbox, i)).collect();
    if mode == BoxMode::ProposalsPlusGt {
        for (i, a) in gt.iter().enumerate() {
            out.push((jitter_box(&a.bbox, jitter, rng), i));
        }
    }
    out
}

/// `(S, S, 2)` grid of box-relative `(x, y)` from 0 to 1 inclusive.
pub fn coordinate_embedding(s: usize) -> Tensor<f64> {
    let denom = (s.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(s * s * 2);
    for i in 0..s {
        for j in 0..s {
            data.push(j as f64 / denom);
            data.push(i as f64 / denom);
        }
    }
    Tensor::new(&[s, s, 2], data).expect("positive size")
}

/// Lengths of overlap between `[lo, hi)` and each unit pixel span.
fn overlaps(lo: f64, hi: f64, n: usize) -> Vec<(usize, f64)> {
    let first = lo.floor().max(0.0) as usize;
    let last = (hi.ceil().max(0.0) as usize).min(n);
    (first..last)
        .filter_map(|p| {
            let len = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
            (len > 0.0).then_some((p, len))
        })
        .collect()
}

/// Target of shape `(S, S)`: exact area fraction of `mask` over each cell of
/// the box footprint, binarized at one half (inclusive).
pub fn crop_target_mask(mask: &BinaryMask, bbox: &BBox, s: usize) -> Tensor<f64> {
    let (b, _) = bbox.clamped();
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let (y0, x0) = (b.ymin * h, b.xmin * w);
    let ch = b.height() * h / s as f64;
    let cw = b.width() * w / s as f64;
    let cols: Vec<Vec<(usize, f64)>> = (0..s)
        .map(|j| overlaps(x0 + j as f64 * cw, x0 + (j + 1) as f64 * cw, mask.width()))
        .collect();
    let mut data = Vec::with_capacity(s * s);
    for i in 0..s {
        let rows = overlaps(y0 + i as f64 * ch, y0 + (i + 1) as f64 * ch, mask.height());
        for col in &cols {
            let mut area = 0.0;
            for &(r, ly) in &rows {
                for &(c, lx) in col {
                    if mask.get(r, c) {
                        area += ly * lx;
                    }
                }
            }
            let cell = ch * cw;
            data.push(if cell > 0.0 && area / cell >= 0.5 {
                1.0
            } else {
                0.0
            });
        }
    }
    Tensor::new(&[s, s], data).expect("positive size")
}
