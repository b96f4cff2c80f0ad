//! Synthetic partially supervised shapes dataset.
//!
//! Every instance carries a tight box; masks are emitted for the seen
//! categories of the train split and for every instance of the val split.

pub mod io;
pub mod render;
pub mod rle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{load_annotations, read_png, save_annotations, write_png, ANNOTATION_FILE};
pub use render::ShapeInstance;

use crate::config::{parse_value, unknown_key, KvEntry};
use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};
use crate::tensor::{Real, Tensor};
use render::{composite, contrasting_color, random_color, Appearance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Disk,
    Square,
    Triangle,
    Ring,
    Bar,
    Ellipse,
    Cross,
    Crescent,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Disk,
        Category::Square,
        Category::Triangle,
        Category::Ring,
        Category::Bar,
        Category::Ellipse,
        Category::Cross,
        Category::Crescent,
    ];

    pub const DEFAULT_SEEN: [Category; 4] = [
        Category::Disk,
        Category::Square,
        Category::Bar,
        Category::Ellipse,
    ];

    /// Stable 1-based id used in annotation files.
    pub fn id(self) -> u32 {
        Category::ALL
            .iter()
            .position(|&c| c == self)
            .expect("listed") as u32
            + 1
    }

    pub fn from_id(id: u32) -> Option<Category> {
        (id as usize)
            .checked_sub(1)
            .and_then(|i| Category::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Disk => "disk",
            Category::Square => "square",
            Category::Triangle => "triangle",
            Category::Ring => "ring",
            Category::Bar => "bar",
            Category::Ellipse => "ellipse",
            Category::Cross => "cross",
            Category::Crescent => "crescent",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }
}

fn parse_categories(e: &KvEntry, origin: &str) -> Result<Vec<Category>> {
    e.value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            Category::parse(s).ok_or_else(|| {
                Error::parse(origin, e.line, format!("{}: unknown category '{s}'", e.key))
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub categories: Vec<Category>,
    /// Categories whose train-split masks are emitted.
    pub seen: Vec<Category>,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Circumscribed shape radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Largest box IoU allowed between two instances of an image.
    pub max_box_iou: f64,
    /// Smallest visible share of an instance's full area after occlusion.
    pub min_visible_fraction: f64,
    pub background_noise: f64,
    pub object_noise: f64,
    pub min_contrast: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            categories: Category::ALL.to_vec(),
            seen: Category::DEFAULT_SEEN.to_vec(),
            min_instances: 1,
            max_instances: 3,
            min_radius: 8.0,
            max_radius: 18.0,
            max_box_iou: 0.4,
            min_visible_fraction: 0.6,
            background_noise: 0.06,
            object_noise: 0.06,
            min_contrast: 0.35,
            train_count: 2000,
            val_count: 500,
            seed: 0,
        }
    }
}

/// Smallest visible pixel count an instance may keep.
const MIN_VISIBLE_PIXELS: usize = 12;
const PLACEMENT_ATTEMPTS: usize = 200;

impl DatasetConfig {
    pub fn apply(&mut self, e: &KvEntry, origin: &str) -> Result<()> {
        match e.key.as_str() {
            "image_size" => self.image_size = parse_value(e, origin)?,
            "categories" => self.categories = parse_categories(e, origin)?,
            "seen" => self.seen = parse_categories(e, origin)?,
            "min_instances" => self.min_instances = parse_value(e, origin)?,
            "max_instances" => self.max_instances = parse_value(e, origin)?,
            "min_radius" => self.min_radius = parse_value(e, origin)?,
            "max_radius" => self.max_radius = parse_value(e, origin)?,
            "max_box_iou" => self.max_box_iou = parse_value(e, origin)?,
            "min_visible_fraction" => self.min_visible_fraction = parse_value(e, origin)?,
            "background_noise" => self.background_noise = parse_value(e, origin)?,
            "object_noise" => self.object_noise = parse_value(e, origin)?,
            "min_contrast" => self.min_contrast = parse_value(e, origin)?,
            "train_count" => self.train_count = parse_value(e, origin)?,
            "val_count" => self.val_count = parse_value(e, origin)?,
            "seed" => self.seed = parse_value(e, origin)?,
            _ => return Err(unknown_key(e, origin)),
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let names = |v: &[Category]| v.iter().map(|c| c.name()).collect::<Vec<_>>().join(",");
        [
            format!("{prefix}image_size = {}", self.image_size),
            format!("{prefix}categories = {}", names(&self.categories)),
            format!("{prefix}seen = {}", names(&self.seen)),
            format!("{prefix}min_instances = {}", self.min_instances),
            format!("{prefix}max_instances = {}", self.max_instances),
            format!("{prefix}min_radius = {}", self.min_radius),
            format!("{prefix}max_radius = {}", self.max_radius),
            format!("{prefix}max_box_iou = {}", self.max_box_iou),
            format!(
                "{prefix}min_visible_fraction = {}",
                self.min_visible_fraction
            ),
            format!("{prefix}background_noise = {}", self.background_noise),
            format!("{prefix}object_noise = {}", self.object_noise),
            format!("{prefix}min_contrast = {}", self.min_contrast),
            format!("{prefix}train_count = {}", self.train_count),
            format!("{prefix}val_count = {}", self.val_count),
            format!("{prefix}seed = {}", self.seed),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("dataset config: {m}")));
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        if let Some(c) = self.seen.iter().find(|c| !self.categories.contains(c)) {
            return bad(format!(
                "seen category {} is not in the category list",
                c.name()
            ));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad(format!(
                "instances range {}..={}",
                self.min_instances, self.max_instances
            ));
        }
        if !(self.min_radius >= 2.0 && self.min_radius <= self.max_radius) {
            return bad(format!(
                "radius range {}..{}",
                self.min_radius, self.max_radius
            ));
        }
        if 2.0 * self.max_radius + 2.0 > self.image_size as f64 {
            return bad(format!(
                "radius {} does not fit a {} image",
                self.max_radius, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.max_box_iou)
            || !(0.0..=1.0).contains(&self.min_visible_fraction)
        {
            return bad("max_box_iou and min_visible_fraction must lie in [0, 1]".into());
        }
        if self.background_noise < 0.0 || self.object_noise < 0.0 || self.min_contrast < 0.0 {
            return bad("noise and contrast must be non-negative".into());
        }
        Ok(())
    }

    pub fn is_seen(&self, c: Category) -> bool {
        self.seen.contains(&c)
    }
}

/// 8-bit RGB image, row-major, channels last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// Normalized `(H, W, 3)` tensor with values in `[-0.5, 0.5]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| T::of(f64::from(v) / 255.0 - 0.5))
            .collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("image extents are positive")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub bbox: BBox,
    pub category: Category,
    /// Visible-region mask at image resolution, when annotated.
    pub mask: Option<BinaryMask>,
}

impl InstanceAnnotation {
    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: usize,
    pub split: Split,
    pub image: RgbImage,
    pub annotations: Vec<InstanceAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
}

impl Dataset {
    /// Drops train-split masks of categories outside `seen`.
    pub fn with_seen(&self, seen: &[Category]) -> Dataset {
        let mut out = self.clone();
        out.config.seen = seen.to_vec();
        for r in &mut out.train {
            for a in &mut r.annotations {
                if !seen.contains(&a.category) {
                    a.mask = None;
                }
            }
        }
        out
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.train.iter().chain(&self.val)
    }
}

fn draw_shape<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &DatasetConfig,
    category: Category,
    bg: &[f64; 3],
) -> ShapeInstance {
    let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let size = cfg.image_size as f64;
    let aspect = match category {
        Category::Ellipse => rng.random_range(0.45..0.7),
        Category::Bar => rng.random_range(0.22..0.38),
        _ => 1.0,
    };
    ShapeInstance {
        category,
        cy: rng.random_range(radius..=size - radius),
        cx: rng.random_range(radius..=size - radius),
        radius,
        angle: rng.random_range(0.0..std::f64::consts::TAU),
        aspect,
        color: contrasting_color(rng, bg, cfg.min_contrast),
    }
}

fn support(s: &ShapeInstance, size: usize) -> BinaryMask {
    let mut m = BinaryMask::new(size, size);
    let (r0, c0, r1, c1) = s.pixel_extent(size);
    for r in r0..r1 {
        for c in c0..c1 {
            if s.covers_pixel_center(r, c) {
                m.set(r, c, true);
            }
        }
    }
    m
}

/// Visible regions under z-order (later shapes on top).
fn visible_masks(supports: &[BinaryMask]) -> Vec<BinaryMask> {
    let mut out: Vec<BinaryMask> = supports.to_vec();
    for i in 0..out.len() {
        for later in &supports[i + 1..] {
            let (h, w) = (later.height(), later.width());
            for r in 0..h {
                for c in 0..w {
                    if later.get(r, c) {
                        out[i].set(r, c, false);
                    }
                }
            }
        }
    }
    out
}

fn generate_record(cfg: &DatasetConfig, split: Split, index: usize, id: usize) -> Result<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((split == Split::Val) as u64) << 40 | index as u64);
    let size = cfg.image_size;
    let bg = random_color(&mut rng);
    let gradient = [0; 3].map(|_| rng.random_range(-0.25..0.25));
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let mut shapes: Vec<ShapeInstance> = Vec::new();
    let mut supports: Vec<BinaryMask> = Vec::new();
    for k in 0..count {
        let category = cfg.categories[rng.random_range(0..cfg.categories.len())];
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = draw_shape(&mut rng, cfg, category, &bg);
            let sup = support(&s, size);
            let Some(new_box) = sup.tight_box() else {
                continue;
            };
            if supports.iter().any(|m| {
                m.tight_box()
                    .is_some_and(|b| b.iou(&new_box) > cfg.max_box_iou)
            }) {
                continue;
            }
            let mut trial = supports.clone();
            trial.push(sup.clone());
            let vis = visible_masks(&trial);
            let ok = vis.iter().zip(&trial).all(|(v, full)| {
                let n = v.count();
                n >= MIN_VISIBLE_PIXELS
                    && n as f64 >= cfg.min_visible_fraction * full.count() as f64
            });
            if ok {
                shapes.push(s);
                supports.push(sup);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "{} image {index}: instance {} of {count} did not fit after {PLACEMENT_ATTEMPTS} attempts \
                 (max_box_iou {}, min_visible_fraction {}, radius {}..{})",
                split.name(),
                k + 1,
                cfg.max_box_iou,
                cfg.min_visible_fraction,
                cfg.min_radius,
                cfg.max_radius
            )));
        }
    }
    let look = Appearance {
        background_noise: cfg.background_noise,
        object_noise: cfg.object_noise,
    };
    let data = composite(size, &bg, &gradient, &shapes, &look, &mut rng);
    let annotations = visible_masks(&supports)
        .into_iter()
        .zip(&shapes)
        .map(|(m, s)| {
            let bbox = m.tight_box().expect("visible area checked");
            let keep = split == Split::Val || cfg.is_seen(s.category);
            InstanceAnnotation {
                bbox,
                category: s.category,
                mask: keep.then_some(m),
            }
        })
        .collect();
    Ok(Record {
        id,
        split,
        image: RgbImage {
            height: size,
            width: size,
            data,
        },
        annotations,
    })
}

/// Deterministic per seed; images are generated independently per index.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let train = (0..cfg.train_count)
        .into_par_iter()
        .map(|i| generate_record(cfg, Split::Train, i, i))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..cfg.val_count)
        .into_par_iter()
        .map(|i| generate_record(cfg, Split::Val, i, cfg.train_count + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        val,
    })
}

/// Anything that turns boxes on an image into full-image binary masks.
pub trait MaskPredictor {
    fn predict_masks(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<BinaryMask>>;

    /// Masks with a confidence in `[0, 1]` used to rank detections.
    fn predict_scored(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<(BinaryMask, f64)>> {
        Ok(self
            .predict_masks(image, boxes)?
            .into_iter()
            .map(|m| (m, 1.0))
            .collect())
    }
}

/// Fills every missing train-split mask with the predictor's output at the
/// groundtruth box; annotated masks pass through unchanged.
pub fn export_pseudo_labels<P: MaskPredictor + Sync>(
    predictor: &P,
    dataset: &Dataset,
) -> Result<Dataset> {
    let train = dataset
        .train
        .par_iter()
        .map(|r| {
            let missing: Vec<usize> = (0..r.annotations.len())
                .filter(|&i| !r.annotations[i].has_mask())
                .collect();
            let mut out = r.clone();
            if missing.is_empty() {
                return Ok(out);
            }
            let boxes: Vec<BBox> = missing.iter().map(|&i| r.annotations[i].bbox).collect();
            let masks = predictor.predict_masks(&r.image, &boxes)?;
            for (&i, m) in missing.iter().zip(masks) {
                out.annotations[i].mask = Some(m);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut config = dataset.config.clone();
    config.seen = config.categories.clone();
    Ok(Dataset {
        config,
        train,
        val: dataset.val.clone(),
    })
}
