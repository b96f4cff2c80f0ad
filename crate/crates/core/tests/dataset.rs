use std::f64::consts::PI;

use ctseg::data::io::{load_annotations, save_annotations};
use ctseg::data::render::ShapeInstance;
use ctseg::data::{
    export_pseudo_labels, generate, Category, DatasetConfig, MaskPredictor, RgbImage,
};
use ctseg::mask::{BBox, BinaryMask};
use ctseg::Result;
use proptest::prelude::*;

fn small(seed: u64) -> DatasetConfig {
    DatasetConfig {
        train_count: 40,
        val_count: 10,
        seed,
        ..DatasetConfig::default()
    }
}

proptest! {
    #[test]
    fn disk_area_matches_circle(r in 8.0..18.0f64, cy in 20.0..44.0f64, cx in 20.0..44.0f64) {
        let disk = ShapeInstance {
            category: Category::Disk,
            cy,
            cx,
            radius: r,
            angle: 0.0,
            aspect: 1.0,
            color: [0.5; 3],
        };
        let area = (0..64).flat_map(|y| (0..64).map(move |x| (y, x))).filter(|&(y, x)| disk.covers_pixel_center(y, x)).count();
        let want = PI * r * r;
        prop_assert!((area as f64 - want).abs() <= 0.1 * want, "area {area} vs {want}");
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate(&small(11)).unwrap();
    let b = generate(&small(11)).unwrap();
    assert_eq!(a, b);
    let c = generate(&small(12)).unwrap();
    assert_ne!(a.train[0].image, c.train[0].image);
}

#[test]
fn custom_seen_split_controls_masks() {
    let cfg = DatasetConfig {
        seen: vec![Category::Ring, Category::Cross],
        ..small(2)
    };
    let d = generate(&cfg).unwrap();
    for a in d.train.iter().flat_map(|r| &r.annotations) {
        assert_eq!(
            a.has_mask(),
            matches!(a.category, Category::Ring | Category::Cross)
        );
    }
    assert!(d
        .val
        .iter()
        .flat_map(|r| &r.annotations)
        .all(|a| a.has_mask()));
}

#[test]
fn category_frequencies_within_three_sigma() {
    let cfg = DatasetConfig {
        train_count: 2000,
        val_count: 0,
        seed: 5,
        ..DatasetConfig::default()
    };
    let d = generate(&cfg).unwrap();
    let n = d.train.iter().map(|r| r.annotations.len()).sum::<usize>() as f64;
    let p = 1.0 / Category::ALL.len() as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    for c in Category::ALL {
        let k = d
            .train
            .iter()
            .flat_map(|r| &r.annotations)
            .filter(|a| a.category == c)
            .count() as f64;
        assert!((k - n * p).abs() <= 3.0 * sigma, "{}: {k} of {n}", c.name());
    }
}

#[test]
fn annotation_file_round_trip() {
    let d = generate(&small(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_annotations(&d, dir.path()).unwrap();
    let back = load_annotations(dir.path()).unwrap();
    assert_eq!(back, d);
}

#[test]
fn corrupt_annotation_file_reports_location() {
    let d = generate(&small(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_annotations(&d, dir.path()).unwrap();
    let path = dir.path().join("annotations.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(
        &path,
        text.replacen("\"category_id\": ", "\"category_id\": 9", 1),
    )
    .unwrap();
    let msg = load_annotations(dir.path()).unwrap_err().to_string();
    assert!(
        msg.contains("annotations.json") && msg.contains("unknown category_id 9"),
        "{msg}"
    );
}

/// Predicts the whole box footprint.
struct BoxFiller;

impl MaskPredictor for BoxFiller {
    fn predict_masks(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<BinaryMask>> {
        Ok(boxes
            .iter()
            .map(|b| BinaryMask::from_fn(image.height, image.width, |_, _| true).restricted_to(b))
            .collect())
    }
}

#[test]
fn pseudo_labels_fill_every_mask() {
    let d = generate(&small(8)).unwrap();
    let p = export_pseudo_labels(&BoxFiller, &d).unwrap();
    assert_eq!(p.config.seen, p.config.categories);
    for (orig, new) in d.train.iter().zip(&p.train) {
        for (a, b) in orig.annotations.iter().zip(&new.annotations) {
            assert!(b.has_mask());
            assert_eq!(a.bbox, b.bbox);
            if a.has_mask() {
                assert_eq!(a.mask, b.mask);
            } else {
                assert_eq!(b.mask.as_ref().unwrap().tight_box(), Some(a.bbox));
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    save_annotations(&p, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("annotations.json")).unwrap();
    assert!(!text.contains("\"has_mask\": false"));
}
