//! Mask IoU, mean IoU under groundtruth boxes, and COCO-style mask AP.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Category, MaskPredictor, Record};
use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};

/// `|a ∧ b| / |a ∨ b|`, with two empty masks scoring 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(
            "mask_iou",
            format!(
                "{}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceIou {
    pub record: usize,
    pub category: Category,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub instances: Vec<InstanceIou>,
    pub all: Option<f64>,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub per_category: BTreeMap<Category, f64>,
    pub seen_count: usize,
    pub unseen_count: usize,
}

impl MiouReport {
    fn from_instances(instances: Vec<InstanceIou>, seen: &[Category]) -> MiouReport {
        let mut all: Vec<f64> = instances.iter().map(|i| i.iou).collect();
        let mut s: Vec<f64> = instances
            .iter()
            .filter(|i| seen.contains(&i.category))
            .map(|i| i.iou)
            .collect();
        let mut u: Vec<f64> = instances
            .iter()
            .filter(|i| !seen.contains(&i.category))
            .map(|i| i.iou)
            .collect();
        let mut by_cat: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
        for i in &instances {
            by_cat.entry(i.category).or_default().push(i.iou);
        }
        let (seen_count, unseen_count) = (s.len(), u.len());
        MiouReport {
            all: stable_mean(&mut all),
            seen: stable_mean(&mut s),
            unseen: stable_mean(&mut u),
            per_category: by_cat
                .into_iter()
                .filter_map(|(c, mut v)| stable_mean(&mut v).map(|m| (c, m)))
                .collect(),
            instances,
            seen_count,
            unseen_count,
        }
    }
}

/// Predicts every instance at its groundtruth box, pastes it and scores it
/// against the groundtruth mask; means are per instance.
pub fn miou_given_gt_boxes<P: MaskPredictor + Sync>(
    predictor: &P,
    records: &[Record],
    seen: &[Category],
) -> Result<MiouReport> {
    let per_record: Vec<Vec<InstanceIou>> = records
        .par_iter()
        .map(|r| {
            if r.annotations.is_empty() {
                return Ok(Vec::new());
            }
            let boxes: Vec<BBox> = r.annotations.iter().map(|a| a.bbox).collect();
            let preds = predictor.predict_masks(&r.image, &boxes)?;
            r.annotations
                .iter()
                .zip(&preds)
                .map(|(a, p)| {
                    let gt = a.mask.as_ref().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "record {}: instance without a mask in evaluation",
                            r.id
                        ))
                    })?;
                    Ok(InstanceIou {
                        record: r.id,
                        category: a.category,
                        iou: mask_iou(p, gt)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(MiouReport::from_instances(
        per_record.into_iter().flatten().collect(),
        seen,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub category: Category,
    pub score: f64,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub category: Category,
    pub mask: BinaryMask,
}

/// COCO thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// True-positive flags of score-ordered detections after greedy matching.
fn greedy_match(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image != dets[d].image {
                continue;
            }
            let iou = mask_iou(&dets[d].mask, &gt.mask)?;
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Ok(tp)
}

/// 101-point interpolated AP of a ranked list of true-positive flags.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    // running maximum from the right makes precision monotone
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / 101.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryAp {
    /// AP per threshold, aligned with the thresholds passed in.
    pub per_threshold: Vec<f64>,
    pub ap: f64,
}

/// Per-category AP; categories without groundtruth are absent.
pub fn mask_ap(
    detections: &[Detection],
    gt: &[GroundTruth],
    thresholds: &[f64],
) -> Result<BTreeMap<Category, CategoryAp>> {
    let mut cats: Vec<Category> = gt.iter().map(|g| g.category).collect();
    cats.sort();
    cats.dedup();
    let mut out = BTreeMap::new();
    for c in cats {
        let dets: Vec<&Detection> = detections.iter().filter(|d| d.category == c).collect();
        let gts: Vec<&GroundTruth> = gt.iter().filter(|g| g.category == c).collect();
        let mut per = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let tp = greedy_match(&dets, &gts, t)?;
            per.push(interpolated_ap(&tp, gts.len()).expect("category has groundtruth"));
        }
        let ap = per.iter().sum::<f64>() / per.len().max(1) as f64;
        out.insert(
            c,
            CategoryAp {
                per_threshold: per,
                ap,
            },
        );
    }
    Ok(out)
}

/// Every metric of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub seen: Vec<Category>,
    pub miou: MiouReport,
    pub ap: BTreeMap<Category, CategoryAp>,
    pub thresholds: Vec<f64>,
}

fn mean_over<'a>(values: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.copied().collect();
    stable_mean(&mut v)
}

impl EvalReport {
    fn ap_at(&self, c: &CategoryAp, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|i| c.per_threshold[i])
    }

    /// Mean AP over the categories of a split (`None` means every category).
    pub fn map(&self, seen: Option<bool>) -> Option<f64> {
        mean_over(
            self.ap
                .iter()
                .filter(|(c, _)| seen.is_none_or(|s| self.seen.contains(c) == s))
                .map(|(_, a)| &a.ap),
        )
    }

    /// CSV rows `label,seed,split,category,metric,value`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        let split_of = |c: &Category| {
            if self.seen.contains(c) {
                "seen"
            } else {
                "unseen"
            }
        };
        let mut push = |split: &str, cat: &str, metric: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push(format!(
                    "{},{},{split},{cat},{metric},{v:.6}",
                    self.label, self.seed
                ));
            }
        };
        for (c, a) in &self.ap {
            push(split_of(c), c.name(), "ap", Some(a.ap));
            push(split_of(c), c.name(), "ap50", self.ap_at(a, 0.5));
            push(split_of(c), c.name(), "ap75", self.ap_at(a, 0.75));
        }
        for (c, m) in &self.miou.per_category {
            push(split_of(c), c.name(), "miou", Some(*m));
        }
        push("all", "*", "map", self.map(None));
        push("seen", "*", "map", self.map(Some(true)));
        push("unseen", "*", "map", self.map(Some(false)));
        push("all", "*", "miou", self.miou.all);
        push("seen", "*", "miou", self.miou.seen);
        push("unseen", "*", "miou", self.miou.unseen);
        rows
    }

    pub const CSV_HEADER: &'static str = "label,seed,split,category,metric,value";

    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} (seed {}, config {})",
            self.label, self.seed, self.config_hash
        );
        let _ = writeln!(
            s,
            "  mIOU  all {}  seen {}  unseen {}",
            f(self.miou.all),
            f(self.miou.seen),
            f(self.miou.unseen)
        );
        let _ = writeln!(
            s,
            "  mAP   all {}  seen {}  unseen {}",
            f(self.map(None)),
            f(self.map(Some(true))),
            f(self.map(Some(false)))
        );
        s
    }
}

/// Scores each GT-box prediction by the predictor's confidence and computes
/// both mIOU and mask AP on `records`.
pub fn evaluate<P: MaskPredictor + Sync>(
    predictor: &P,
    records: &[Record],
    seen: &[Category],
    label: &str,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let scored: Vec<(Vec<Detection>, Vec<GroundTruth>, Vec<InstanceIou>)> = records
        .par_iter()
        .map(|r| {
            let boxes: Vec<BBox> = r.annotations.iter().map(|a| a.bbox).collect();
            let preds = if boxes.is_empty() {
                Vec::new()
            } else {
                predictor.predict_scored(&r.image, &boxes)?
            };
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            let mut ious = Vec::new();
            for (a, (m, score)) in r.annotations.iter().zip(preds) {
                let gt = a.mask.clone().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "record {}: instance without a mask in evaluation",
                        r.id
                    ))
                })?;
                ious.push(InstanceIou {
                    record: r.id,
                    category: a.category,
                    iou: mask_iou(&m, &gt)?,
                });
                dets.push(Detection {
                    image: r.id,
                    category: a.category,
                    score,
                    mask: m,
                });
                gts.push(GroundTruth {
                    image: r.id,
                    category: a.category,
                    mask: gt,
                });
            }
            Ok((dets, gts, ious))
        })
        .collect::<Result<_>>()?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut ious = Vec::new();
    for (d, g, i) in scored {
        dets.extend(d);
        gts.extend(g);
        ious.extend(i);
    }
    let thresholds = coco_thresholds();
    Ok(EvalReport {
        label: label.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        seen: seen.to_vec(),
        miou: MiouReport::from_instances(ious, seen),
        ap: mask_ap(&dets, &gts, &thresholds)?,
        thresholds,
    })
}
