//! Optimization loop and experiment recipes.

mod optim;
pub mod recipe;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::config::{parse_value, unknown_key, KvEntry};
use crate::data::{InstanceAnnotation, Record, RgbImage};
use crate::error::{Error, Result};
use crate::eval::miou_given_gt_boxes;
use crate::model::{crop_target_mask, make_training_boxes, mask_loss, Model};
use crate::nn::{Mode, Session};
use crate::roi::Roi;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Linear ramp length; the rate is constant afterwards.
    pub warmup_steps: usize,
    /// Validation mIOU is logged every this many steps (0 disables).
    pub eval_every: usize,
    /// Validation images used by the periodic evaluation.
    pub eval_images: usize,
}

impl TrainConfig {
    /// Defaults for everything except the seed, which has none.
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            steps: 2000,
            seed,
            warmup_steps: 0,
            eval_every: 0,
            eval_images: 100,
        }
    }

    /// Applies one `train.` entry.
    pub fn apply(&mut self, e: &KvEntry, origin: &str) -> Result<()> {
        let o = &mut self.optimizer;
        match e.key.as_str() {
            "optimizer" => {
                o.kind = OptimizerKind::parse(&e.value).ok_or_else(|| {
                    Error::parse(origin, e.line, format!("optimizer: unknown '{}'", e.value))
                })?
            }
            "learning_rate" => o.learning_rate = parse_value(e, origin)?,
            "momentum" => o.momentum = parse_value(e, origin)?,
            "beta1" => o.beta1 = parse_value(e, origin)?,
            "beta2" => o.beta2 = parse_value(e, origin)?,
            "epsilon" => o.epsilon = parse_value(e, origin)?,
            "batch_size" => self.batch_size = parse_value(e, origin)?,
            "steps" => self.steps = parse_value(e, origin)?,
            "seed" => self.seed = parse_value(e, origin)?,
            "warmup_steps" => self.warmup_steps = parse_value(e, origin)?,
            "eval_every" => self.eval_every = parse_value(e, origin)?,
            "eval_images" => self.eval_images = parse_value(e, origin)?,
            _ => return Err(unknown_key(e, origin)),
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let o = &self.optimizer;
        [
            format!("{prefix}optimizer = {}", o.kind.name()),
            format!("{prefix}learning_rate = {}", o.learning_rate),
            format!("{prefix}momentum = {}", o.momentum),
            format!("{prefix}beta1 = {}", o.beta1),
            format!("{prefix}beta2 = {}", o.beta2),
            format!("{prefix}epsilon = {}", o.epsilon),
            format!("{prefix}batch_size = {}", self.batch_size),
            format!("{prefix}steps = {}", self.steps),
            format!("{prefix}seed = {}", self.seed),
            format!("{prefix}warmup_steps = {}", self.warmup_steps),
            format!("{prefix}eval_every = {}", self.eval_every),
            format!("{prefix}eval_images = {}", self.eval_images),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.momentum)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return bad("momentum and betas must lie in [0, 1)".into());
        }
        if !(o.epsilon > 0.0) {
            return bad(format!("epsilon {}", o.epsilon));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive".into());
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        let lr = self.optimizer.learning_rate;
        if step < self.warmup_steps {
            lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    /// Weighted loss per step.
    pub loss_trace: Vec<f64>,
    /// Euclidean norm of each step's parameter update.
    pub update_norms: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

/// Masked instances of one record; unannotated ones never reach the head.
fn supervised(r: &Record) -> Vec<InstanceAnnotation> {
    r.annotations
        .iter()
        .filter(|a| a.has_mask())
        .cloned()
        .collect()
}

/// Trains `model` in place on the masked instances of `records`.
///
/// Batches are drawn from seeded epoch permutations of the records that carry
/// at least one mask, so the run is a pure function of the config and the
/// starting parameters. `val` feeds the periodic mIOU log only.
pub fn train(
    model: &mut Model<f32>,
    records: &[Record],
    val: &[Record],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    let usable: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].annotations.iter().any(|a| a.has_mask()))
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(
            "no train record carries a mask".into(),
        ));
    }
    let batch = cfg.batch_size.min(usable.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut out = TrainOutcome::default();
    let s = model.config.crop_size;
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order = usable.clone();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let mut images: Vec<&RgbImage> = Vec::with_capacity(batch);
        let mut rois = Vec::new();
        let mut targets: Vec<f32> = Vec::new();
        for (b, &i) in picked.iter().enumerate() {
            let r = &records[i];
            images.push(&r.image);
            let gt = supervised(r);
            for (bbox, src) in
                make_training_boxes(&gt, model.config.box_mode, &model.config.jitter, &mut rng)
            {
                let mask = gt[src]
                    .mask
                    .as_ref()
                    .expect("supervised instances carry masks");
                rois.push(Roi { batch: b, bbox });
                targets.extend(
                    crop_target_mask(mask, &bbox, s)
                        .data()
                        .iter()
                        .map(|&v| v as f32),
                );
            }
        }
        let lr = cfg.rate_at(step);
        let (loss, grads, stats) = {
            let mut sess = Session::new(&model.params, Mode::Train);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    step,
                    lr,
                    loss: f64::NAN,
                },
                other => other,
            };
            let logits = model
                .forward_masks_var(&mut sess, &images, &rois)
                .map_err(diverged)?;
            let k = rois.len();
            let t = Tensor::new(&[k, s, s], targets)?;
            let loss = mask_loss(
                &mut sess.graph,
                logits,
                &t,
                &vec![true; k],
                model.config.mask_loss_weight,
            )
            .map_err(diverged)?;
            let value = sess.graph.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    lr,
                    loss: value,
                });
            }
            sess.graph.backward(loss).map_err(diverged)?;
            (value, sess.param_grads(), sess.take_stat_updates())
        };
        let norm = opt.step(&mut model.params, &grads, lr);
        model.params.apply_stat_updates(&stats);
        out.loss_trace.push(loss);
        out.update_norms.push(norm);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !val.is_empty() {
            let n = cfg.eval_images.min(val.len());
            let m = miou_given_gt_boxes(&*model, &val[..n], &[])?;
            log::info!(
                "step {} loss {loss:.4} val mIOU {:.3}",
                step + 1,
                m.all.unwrap_or(f64::NAN)
            );
        } else {
            log::debug!("step {} loss {loss:.4}", step + 1);
        }
    }
    if let Some(dir) = checkpoint {
        model.save(dir)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetConfig};
    use crate::heads::MaskHeadSpec;
    use crate::model::ModelConfig;

    fn tiny() -> (ModelConfig, Vec<Record>) {
        let cfg = ModelConfig {
            crop_size: 16,
            backbone_width: 4,
            head: MaskHeadSpec::preset("resnet-4")
                .unwrap()
                .with_width_divisor(16),
            ..ModelConfig::default()
        };
        let data = generate(&DatasetConfig {
            train_count: 6,
            val_count: 0,
            ..DatasetConfig::default()
        })
        .unwrap();
        (cfg, data.train)
    }

    #[test]
    fn zero_rate_keeps_trainable_parameters() {
        let (mcfg, recs) = tiny();
        let mut model = Model::<f32>::new(&mcfg, 1).unwrap();
        let before = model.params.clone();
        let mut cfg = TrainConfig::with_seed(3);
        cfg.optimizer.learning_rate = 0.0;
        cfg.steps = 3;
        cfg.batch_size = 2;
        train(&mut model, &recs, &[], &cfg, None).unwrap();
        for (a, b) in before.entries().iter().zip(model.params.entries()) {
            if a.trainable {
                let bits =
                    |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
            }
        }
    }

    #[test]
    fn identical_traces_and_positive_updates() {
        let (mcfg, recs) = tiny();
        let mut cfg = TrainConfig::with_seed(5);
        cfg.steps = 4;
        cfg.batch_size = 3;
        let run = || {
            let mut m = Model::<f32>::new(&mcfg, 2).unwrap();
            train(&mut m, &recs, &[], &cfg, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.loss_trace.len(), 4);
        assert!(a.update_norms.iter().all(|&n| n > 0.0));
    }

    #[test]
    fn rejects_unsupervised_split() {
        let (mcfg, mut recs) = tiny();
        for r in &mut recs {
            for a in &mut r.annotations {
                a.mask = None;
            }
        }
        let mut m = Model::<f32>::new(&mcfg, 0).unwrap();
        assert!(train(&mut m, &recs, &[], &TrainConfig::with_seed(0), None).is_err());
        assert!(train(&mut m, &[], &[], &TrainConfig::with_seed(0), None).is_err());
    }

    #[test]
    fn divergence_reports_step_and_rate() {
        let (mcfg, recs) = tiny();
        let mut m = Model::<f32>::new(&mcfg, 0).unwrap();
        let mut cfg = TrainConfig::with_seed(0);
        cfg.optimizer.kind = OptimizerKind::SgdMomentum;
        cfg.optimizer.learning_rate = 1e30;
        cfg.steps = 20;
        match train(&mut m, &recs, &[], &cfg, None) {
            Err(Error::Diverged { lr, .. }) => assert_eq!(lr, 1e30),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
