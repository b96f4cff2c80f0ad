use ctseg::data::{generate, Category, DatasetConfig, MaskPredictor, RgbImage};
use ctseg::eval::{
    coco_thresholds, mask_ap, mask_iou, miou_given_gt_boxes, Detection, GroundTruth,
};
use ctseg::mask::{BBox, BinaryMask};
use ctseg::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_bits(4, 4, (0..16).map(|_| rng.random_bool(0.5)).collect()).unwrap()
}

/// A copy of `m` with each pixel flipped with probability `p`.
pub fn perturbed(m: &BinaryMask, p: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_bits(
        4,
        4,
        m.bits().iter().map(|&b| b ^ rng.random_bool(p)).collect(),
    )
    .unwrap()
}

/// Greedy matching of score-ordered detections.
pub fn oracle_hits(dets: &[&Detection], gts: &[&GroundTruth], t: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let iou = mask_iou(&d.mask, &gt.mask).unwrap();
                if !used[g]
                    && gt.image == d.image
                    && iou >= t
                    && best.map_or(true, |(_, b)| iou > b)
                {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Enumerates every score cutoff, builds the raw PR points and takes the
/// best precision at recall >= r for each of the 101 recall levels.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], c: Category, thresholds: &[f64]) -> f64 {
    let mut d: Vec<&Detection> = dets.iter().filter(|x| x.category == c).collect();
    d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.category == c).collect();
    let mut sum = 0.0;
    for &t in thresholds {
        let hits = oracle_hits(&d, &g, t);
        let points: Vec<(f64, f64)> = (1..=d.len())
            .map(|k| {
                let tp = hits[..k].iter().filter(|&&h| h).count() as f64;
                (tp / g.len() as f64, tp / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        for level in 0..=100 {
            let r = level as f64 / 100.0;
            ap += points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max);
        }
        sum += ap / 101.0;
    }
    sum / thresholds.len() as f64
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let cats = [Category::ALL[0], Category::ALL[5]];
    let n_gt = rng.random_range(1..=4);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            image: rng.random_range(0..2),
            category: cats[rng.random_range(0..2)],
            mask: random_mask(rng),
        })
        .collect();
    let n_det = rng.random_range(0..=6);
    let mut scores: Vec<f64> = (0..n_det)
        .map(|i| (i as f64 + rng.random_range(0.0..0.9)) / 6.0)
        .collect();
    scores.shuffle(rng);
    let dets = scores
        .into_iter()
        .map(|score| {
            if rng.random_bool(0.6) {
                let g = &gts[rng.random_range(0..gts.len())];
                Detection {
                    image: g.image,
                    category: g.category,
                    score,
                    mask: perturbed(&g.mask, rng.random_range(0.0..0.3), rng),
                }
            } else {
                Detection {
                    image: rng.random_range(0..2),
                    category: cats[rng.random_range(0..2)],
                    score,
                    mask: random_mask(rng),
                }
            }
        })
        .collect();
    (dets, gts)
}

/// Largest gap between `mask_ap` and the oracle over `cases` seeded cases.
pub fn worst_gap(cases: u64) -> f64 {
    let thresholds = coco_thresholds();
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let (dets, gts) = random_case(&mut rng);
        let got = mask_ap(&dets, &gts, &thresholds).unwrap();
        if !gts.iter().all(|g| got.contains_key(&g.category)) {
            return f64::INFINITY;
        }
        for (c, ap) in &got {
            worst = worst.max((ap.ap - oracle_ap(&dets, &gts, *c, &thresholds)).abs());
        }
    }
    worst
}

/// Pixel-flipped groundtruth so every instance lands at a different IoU.
struct Noisy(u64);

impl MaskPredictor for Noisy {
    fn predict_masks(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<BinaryMask>> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.0 ^ image.data.iter().map(|&v| u64::from(v)).sum::<u64>(),
        );
        Ok(boxes
            .iter()
            .map(|b| {
                let bits = (0..image.height * image.width)
                    .map(|_| rng.random_bool(0.7))
                    .collect();
                BinaryMask::from_bits(image.height, image.width, bits)
                    .unwrap()
                    .restricted_to(b)
            })
            .collect())
    }
}

/// Largest disagreement between the reported mIOU and its recomputation
/// from split means, per-category means and raw instance IoUs.
pub fn miou_identity_gap() -> f64 {
    let cfg = DatasetConfig {
        train_count: 0,
        val_count: 60,
        seed: 4,
        ..DatasetConfig::default()
    };
    let d = generate(&cfg).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let r = miou_given_gt_boxes(&Noisy(seed), &d.val, &d.config.seen).unwrap();
        let n = (r.seen_count + r.unseen_count) as f64;
        if r.instances.len() != d.val.iter().map(|x| x.annotations.len()).sum::<usize>() {
            return f64::INFINITY;
        }
        let all = r.all.unwrap();
        let split =
            (r.seen.unwrap() * r.seen_count as f64 + r.unseen.unwrap() * r.unseen_count as f64) / n;
        let per_cat = r
            .per_category
            .iter()
            .map(|(c, m)| m * r.instances.iter().filter(|i| i.category == *c).count() as f64)
            .sum::<f64>()
            / n;
        let direct = r.instances.iter().map(|i| i.iou).sum::<f64>() / n;
        for v in [split, per_cat, direct] {
            worst = worst.max((v - all).abs());
        }
    }
    worst
}
