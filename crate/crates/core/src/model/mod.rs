//! The crop-then-segment pipeline: backbone embeddings, RoI crop, mask head.

mod boxes;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use boxes::{
    coordinate_embedding, crop_target_mask, jitter_box, make_training_boxes, BoxMode, JitterConfig,
};

use crate::autodiff::{ConvOptions, Graph, Var};
use crate::config::{parse_bool, parse_value, unknown_key, KvEntry};
use crate::data::{MaskPredictor, RgbImage};
use crate::error::{Error, Result};
use crate::heads::{dilate_layers, MaskHead, MaskHeadSpec};
use crate::mask::{BBox, BinaryMask};
use crate::nn::{load_params, save_params, BatchNorm, Conv2d, Init, Mode, ParamStore, Session};
use crate::roi::{center_read_var, paste_mask, roi_align_var, Roi};
use crate::tensor::{Real, Tensor};

pub const PIXEL_EMBEDDING_CHANNELS: usize = 16;
pub const INSTANCE_EMBEDDING_CHANNELS: usize = 32;
/// Total downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub crop_size: usize,
    pub use_instance_embedding: bool,
    pub use_coordinate_embedding: bool,
    pub mask_loss_weight: f64,
    pub box_mode: BoxMode,
    pub jitter: JitterConfig,
    /// Channels of the first backbone conv; later stages use twice this.
    pub backbone_width: usize,
    pub samples_per_cell: usize,
    pub head: MaskHeadSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            crop_size: 32,
            use_instance_embedding: true,
            use_coordinate_embedding: true,
            mask_loss_weight: 5.0,
            box_mode: BoxMode::GtOnly,
            jitter: JitterConfig::default(),
            backbone_width: 16,
            samples_per_cell: 1,
            head: MaskHeadSpec::preset("hourglass-20").expect("preset"),
        }
    }
}

impl ModelConfig {
    /// Applies `model.` entries; head modifiers apply after the head is chosen.
    pub fn apply_all(&mut self, entries: &[KvEntry], origin: &str, base_dir: &Path) -> Result<()> {
        let (head_keys, rest): (Vec<&KvEntry>, Vec<&KvEntry>) = entries
            .iter()
            .partition(|e| e.key == "head" || e.key == "head_spec");
        for e in head_keys {
            self.head = if e.key == "head" {
                MaskHeadSpec::preset(&e.value)
                    .map_err(|err| Error::parse(origin, e.line, err.to_string()))?
            } else {
                MaskHeadSpec::load(&base_dir.join(&e.value))?
            };
        }
        for e in rest {
            self.apply(e, origin)?;
        }
        Ok(())
    }

    fn apply(&mut self, e: &KvEntry, origin: &str) -> Result<()> {
        match e.key.as_str() {
            "crop_size" => self.crop_size = parse_value(e, origin)?,
            "instance_embedding" => self.use_instance_embedding = parse_bool(e, origin)?,
            "coordinate_embedding" => self.use_coordinate_embedding = parse_bool(e, origin)?,
            "mask_loss_weight" => self.mask_loss_weight = parse_value(e, origin)?,
            "box_mode" => {
                self.box_mode = BoxMode::parse(&e.value).ok_or_else(|| {
                    Error::parse(
                        origin,
                        e.line,
                        format!("box_mode: unknown mode '{}'", e.value),
                    )
                })?
            }
            "jitter_min_iou" => self.jitter.min_iou = parse_value(e, origin)?,
            "jitter_shift" => self.jitter.shift = parse_value(e, origin)?,
            "jitter_scale" => self.jitter.scale = parse_value(e, origin)?,
            "backbone_width" => self.backbone_width = parse_value(e, origin)?,
            "samples_per_cell" => self.samples_per_cell = parse_value(e, origin)?,
            "head_width_divisor" => self.head.width_divisor = parse_value(e, origin)?,
            "head_no_long_range_skips" => self.head.no_long_range_skips = parse_bool(e, origin)?,
            "head_no_encoder_decoder" => {
                if parse_bool(e, origin)? {
                    self.head = self.head.clone().without_encoder_decoder();
                }
            }
            "head_dilated_layers" => {
                let n = parse_value(e, origin)?;
                self.head = dilate_layers(&self.head, n)
                    .map_err(|err| Error::parse(origin, e.line, err.to_string()))?
            }
            "head_hidden_width" => self.head.hidden_width = parse_value(e, origin)?,
            _ => return Err(unknown_key(e, origin)),
        }
        Ok(())
    }

    /// Every key except the head, which persists as its own spec file.
    pub fn to_kv(&self, prefix: &str) -> String {
        [
            format!("{prefix}crop_size = {}", self.crop_size),
            format!(
                "{prefix}instance_embedding = {}",
                self.use_instance_embedding
            ),
            format!(
                "{prefix}coordinate_embedding = {}",
                self.use_coordinate_embedding
            ),
            format!("{prefix}mask_loss_weight = {}", self.mask_loss_weight),
            format!("{prefix}box_mode = {}", self.box_mode.name()),
            format!("{prefix}jitter_min_iou = {}", self.jitter.min_iou),
            format!("{prefix}jitter_shift = {}", self.jitter.shift),
            format!("{prefix}jitter_scale = {}", self.jitter.scale),
            format!("{prefix}backbone_width = {}", self.backbone_width),
            format!("{prefix}samples_per_cell = {}", self.samples_per_cell),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.crop_size != 16 && self.crop_size != 32 {
            return bad(format!(
                "crop_size must be 16 or 32, got {}",
                self.crop_size
            ));
        }
        if !(self.mask_loss_weight > 0.0 && self.mask_loss_weight.is_finite()) {
            return bad(format!(
                "mask_loss_weight must be positive, got {}",
                self.mask_loss_weight
            ));
        }
        if !(0.0..=1.0).contains(&self.jitter.min_iou)
            || self.jitter.shift < 0.0
            || self.jitter.scale < 0.0
        {
            return bad(format!("jitter {:?}", self.jitter));
        }
        if self.backbone_width == 0 {
            return bad("backbone_width must be positive".into());
        }
        self.head.validate()?;
        if self.crop_size % self.head.downsampling_factor() != 0 {
            return bad(format!(
                "crop_size {} is not divisible by the downsampling factor {} of {}",
                self.crop_size,
                self.head.downsampling_factor(),
                self.head.label()
            ));
        }
        Ok(())
    }

    pub fn head_input_channels(&self) -> usize {
        PIXEL_EMBEDDING_CHANNELS
            + if self.use_instance_embedding {
                INSTANCE_EMBEDDING_CHANNELS
            } else {
                0
            }
            + if self.use_coordinate_embedding { 2 } else { 0 }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    bn: BatchNorm,
}

/// Stride-4 conv stack emitting pixel and instance embeddings.
#[derive(Clone, Debug)]
struct Backbone {
    stages: Vec<Stage>,
    pixel: Conv2d,
    instance: Option<Conv2d>,
}

impl Backbone {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = cfg.backbone_width;
        let plan = [
            (3, w, 1),
            (w, 2 * w, 2),
            (2 * w, 2 * w, 2),
            (2 * w, 2 * w, 1),
        ];
        let mut stages = Vec::new();
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            let name = format!("backbone/conv{i}");
            let opts = ConvOptions {
                stride,
                ..ConvOptions::default()
            };
            stages.push(Stage {
                conv: Conv2d::new(store, &name, 3, cin, cout, opts, true, Init::HeNormal, rng)?,
                bn: BatchNorm::new(store, &format!("{name}/bn"), cout)?,
            });
        }
        let c = 2 * w;
        let pixel = Conv2d::new(
            store,
            "backbone/pixel_embedding",
            1,
            c,
            PIXEL_EMBEDDING_CHANNELS,
            ConvOptions::default(),
            true,
            Init::HeNormal,
            rng,
        )?;
        let instance = if cfg.use_instance_embedding {
            Some(Conv2d::new(
                store,
                "backbone/instance_embedding",
                1,
                c,
                INSTANCE_EMBEDDING_CHANNELS,
                ConvOptions::default(),
                true,
                Init::HeNormal,
                rng,
            )?)
        } else {
            None
        };
        Ok(Backbone {
            stages,
            pixel,
            instance,
        })
    }

    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Option<Var>)> {
        let mut h = x;
        for st in &self.stages {
            h = st.conv.forward(s, h)?;
            h = st.bn.forward(s, h)?;
            h = s.graph.relu(h)?;
        }
        let p = self.pixel.forward(s, h)?;
        let i = match &self.instance {
            Some(c) => Some(c.forward(s, h)?),
            None => None,
        };
        Ok((p, i))
    }
}

/// Trainable crop-then-segment model.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    backbone: Backbone,
    head: MaskHead,
}

const PARAMS_FILE: &str = "params.bin";
const CONFIG_FILE: &str = "model.cfg";
const HEAD_FILE: &str = "head.spec";

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut params, config, &mut rng)?;
        let head = MaskHead::new(
            &mut params,
            "head",
            &config.head,
            config.head_input_channels(),
            config.crop_size,
            &mut rng,
        )?;
        Ok(Model {
            config: config.clone(),
            params,
            backbone,
            head,
        })
    }

    pub fn head(&self) -> &MaskHead {
        &self.head
    }

    /// Logits `(K, S, S)` for `rois` over a batch of images.
    pub fn forward_masks_var(
        &self,
        s: &mut Session<'_, T>,
        images: &[&RgbImage],
        rois: &[Roi],
    ) -> Result<Var> {
        let first = images.first().ok_or_else(|| {
            Error::InvalidArgument("forward_masks needs at least one image".into())
        })?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|im| im.height != h || im.width != w) {
            return Err(Error::shape(
                "forward_masks",
                "images in a batch must share their size".to_string(),
            ));
        }
        if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::shape(
                "forward_masks",
                format!("image {h}x{w} is not a multiple of the stride"),
            ));
        }
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for im in images {
            data.extend_from_slice(im.to_tensor::<T>().data());
        }
        let x = s
            .graph
            .constant(Tensor::new(&[images.len(), h, w, 3], data)?)?;
        let (pixel, instance) = self.backbone.forward(s, x)?;
        let sz = self.config.crop_size;
        let k = rois.len();
        let mut parts = vec![roi_align_var(
            &mut s.graph,
            pixel,
            rois,
            sz,
            self.config.samples_per_cell,
        )?];
        if let Some(inst) = instance {
            let v = center_read_var(&mut s.graph, inst, rois)?;
            let v = s
                .graph
                .reshape(v, &[k, 1, 1, INSTANCE_EMBEDDING_CHANNELS])?;
            parts.push(
                s.graph
                    .broadcast_to(v, &[k, sz, sz, INSTANCE_EMBEDDING_CHANNELS])?,
            );
        }
        if self.config.use_coordinate_embedding {
            let grid = s.graph.constant(coordinate_embedding(sz).cast())?;
            parts.push(s.graph.broadcast_to(grid, &[k, sz, sz, 2])?);
        }
        let input = if parts.len() == 1 {
            parts[0]
        } else {
            s.graph.concat_last(&parts)?
        };
        let logits = self.head.forward(s, input)?;
        s.graph.reshape(logits, &[k, sz, sz])
    }

    /// Eval-mode logits `(K, S, S)` for boxes on one image.
    pub fn forward_masks(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Tensor<T>> {
        let sz = self.config.crop_size;
        if boxes.is_empty() {
            return Tensor::new_allow_empty(&[0, sz, sz], Vec::new());
        }
        let mut s = Session::new(&self.params, Mode::Eval);
        let rois: Vec<Roi> = boxes.iter().map(|&bbox| Roi { batch: 0, bbox }).collect();
        let v = self.forward_masks_var(&mut s, &[image], &rois)?;
        Ok(s.graph.value(v).clone())
    }

    /// Writes parameters, model config and head spec into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&self.params, &dir.join(PARAMS_FILE))?;
        let cfg = format!(
            "{}model.head_spec = {HEAD_FILE}\n",
            self.config.to_kv("model.")
        );
        fs::write(dir.join(CONFIG_FILE), cfg).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
        self.config.head.save(&dir.join(HEAD_FILE))
    }

    /// Rebuilds the model from its config and checks every parameter name
    /// and shape against the stored container.
    pub fn load(dir: &Path) -> Result<Self> {
        let kv = crate::config::KvFile::load(&dir.join(CONFIG_FILE))?;
        kv.check_sections(&["model"])?;
        let mut config = ModelConfig::default();
        config.apply_all(&kv.section("model"), &kv.origin, dir)?;
        let mut model = Model::<T>::new(&config, 0)?;
        let stored: ParamStore<T> = load_params(&dir.join(PARAMS_FILE))?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} tensors, container holds {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (want, got) in model.params.entries().iter().zip(stored.entries()) {
            if want.name != got.name
                || want.value.shape() != got.value.shape()
                || want.trainable != got.trainable
            {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        model.params = stored;
        Ok(model)
    }
}

/// Weighted sigmoid cross-entropy over annotated instances.
///
/// `logits` and `targets` are `(K, S, S)`; instances with `has_mask` false
/// contribute neither value nor gradient.
pub fn mask_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &Tensor<T>,
    has_mask: &[bool],
    weight: f64,
) -> Result<Var> {
    if let Some(bad) = targets
        .data()
        .iter()
        .find(|&&t| !(t >= T::zero() && t <= T::one()))
    {
        return Err(Error::InvalidArgument(format!(
            "mask target {} outside [0, 1]",
            bad.as_f64()
        )));
    }
    let w: Vec<T> = has_mask
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    g.sigmoid_bce(logits, targets, &w, T::of(weight))
}

impl MaskPredictor for Model<f32> {
    fn predict_masks(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<BinaryMask>> {
        Ok(self
            .predict_scored(image, boxes)?
            .into_iter()
            .map(|(m, _)| m)
            .collect())
    }

    /// The score is the mean foreground probability inside the box crop.
    fn predict_scored(&self, image: &RgbImage, boxes: &[BBox]) -> Result<Vec<(BinaryMask, f64)>> {
        let logits = self.forward_masks(image, boxes)?;
        let sz = self.config.crop_size;
        let mut out = Vec::with_capacity(boxes.len());
        for (k, b) in boxes.iter().enumerate() {
            let probs: Vec<f64> = logits.data()[k * sz * sz..(k + 1) * sz * sz]
                .iter()
                .map(|&z| 1.0 / (1.0 + (-f64::from(z)).exp()))
                .collect();
            let score = probs.iter().sum::<f64>() / probs.len() as f64;
            let pred = Tensor::new(&[sz, sz], probs)?;
            out.push((paste_mask(&pred, b, image.height, image.width, 0.5)?, score));
        }
        Ok(out)
    }
}
