use std::collections::BTreeMap;
use std::path::Path;

use ctseg::data::{generate, Category, Dataset, DatasetConfig, Record};
use ctseg::eval::evaluate;
use ctseg::heads::MaskHeadSpec;
use ctseg::mask::BBox;
use ctseg::model::{mask_loss, BoxMode, Model, ModelConfig};
use ctseg::train::recipe::{run_recipe, ExperimentConfig, Recipe};
use ctseg::train::{train, TrainConfig};
use ctseg::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WEIGHT: f64 = 5.0;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        crop_size: 16,
        backbone_width: 4,
        box_mode: BoxMode::ProposalsPlusGt,
        head: MaskHeadSpec::preset("resnet-4")
            .unwrap()
            .with_width_divisor(16),
        ..ModelConfig::default()
    }
}

pub fn tiny_data() -> Dataset {
    generate(&DatasetConfig {
        train_count: 12,
        val_count: 6,
        seed: 21,
        ..DatasetConfig::default()
    })
    .unwrap()
}

/// Cyclic shift of the category list.
pub fn shifted(c: Category) -> Category {
    let i = Category::ALL.iter().position(|&x| x == c).unwrap();
    Category::ALL[(i + 3) % Category::ALL.len()]
}

pub fn permuted(d: &Dataset) -> Dataset {
    let mut p = d.clone();
    for r in p.train.iter_mut().chain(p.val.iter_mut()) {
        for a in &mut r.annotations {
            a.category = shifted(a.category);
        }
    }
    p.config.seen = d.config.seen.iter().map(|&c| shifted(c)).collect();
    p.config.categories = d.config.categories.iter().map(|&c| shifted(c)).collect();
    p
}

/// Trains and evaluates on a dataset and on its category-permuted copy;
/// `None` when logits, loss trace and mIOU all agree.
pub fn permutation_mismatch() -> Option<String> {
    let d = tiny_data();
    let p = permuted(&d);
    if d.train[0].annotations[0].category == p.train[0].annotations[0].category {
        return Some("permutation left labels in place".into());
    }
    let cfg = TrainConfig {
        steps: 6,
        batch_size: 2,
        ..TrainConfig::with_seed(3)
    };
    let mut a = Model::<f32>::new(&tiny_model(), 3).unwrap();
    let mut b = Model::<f32>::new(&tiny_model(), 3).unwrap();
    let ta = train(&mut a, &d.train, &d.val, &cfg, None).unwrap();
    let tb = train(&mut b, &p.train, &p.val, &cfg, None).unwrap();
    if ta.loss_trace != tb.loss_trace {
        return Some(format!(
            "loss traces differ: {:?} vs {:?}",
            ta.loss_trace, tb.loss_trace
        ));
    }
    for (ra, rb) in d.val.iter().zip(&p.val) {
        let boxes: Vec<BBox> = ra.annotations.iter().map(|x| x.bbox).collect();
        if a.forward_masks(&ra.image, &boxes).unwrap()
            != b.forward_masks(&rb.image, &boxes).unwrap()
        {
            return Some(format!("logits differ on record {}", ra.id));
        }
    }
    let ea = evaluate(&a, &d.val, &d.config.seen, "x", 3, "h").unwrap();
    let eb = evaluate(&b, &p.val, &p.config.seen, "x", 3, "h").unwrap();
    let (ma, mb) = (
        (ea.miou.all, ea.miou.seen, ea.miou.unseen),
        (eb.miou.all, eb.miou.seen, eb.miou.unseen),
    );
    (ma != mb).then(|| format!("mIOU differs: {ma:?} vs {mb:?}"))
}

pub fn loss_of(
    logits: &Tensor<f64>,
    targets: &Tensor<f64>,
    has_mask: &[bool],
) -> (f64, Tensor<f64>) {
    let mut g = Graph::new();
    let z = g.leaf(logits.clone(), true).unwrap();
    let l = mask_loss(&mut g, z, targets, has_mask, WEIGHT).unwrap();
    let v = g.value(l).item();
    g.backward(l).unwrap();
    (v, g.grad(z).unwrap().clone())
}

pub struct LossExamples {
    /// Loss of ±30 logits agreeing with the targets.
    pub perfect: f64,
    /// `|loss(0) - weight·ln 2|`.
    pub zero_gap: f64,
    /// Largest gradient magnitude on an instance without a mask.
    pub masked_grad: f64,
    /// `|loss([a, b], [true, false]) - loss([a], [true])|`.
    pub masked_gap: f64,
}

pub fn loss_examples(seed: u64) -> LossExamples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::new(
        &[3, 6, 6],
        (0..108)
            .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
            .collect(),
    )
    .unwrap();
    let perfect = t.map(|v| if v > 0.5 { 30.0 } else { -30.0 });
    let z = Tensor::new(
        &[3, 6, 6],
        (0..108).map(|_| rng.random_range(-4.0..4.0)).collect(),
    )
    .unwrap();
    let (_, grad) = loss_of(&z, &t, &[true, false, true]);
    let slice = |x: &Tensor<f64>, k: usize, n: usize| {
        Tensor::new(&[n, 6, 6], x.data()[k * 36..(k + n) * 36].to_vec()).unwrap()
    };
    let first = loss_of(&slice(&z, 0, 1), &slice(&t, 0, 1), &[true]).0;
    let pair = loss_of(&slice(&z, 0, 2), &slice(&t, 0, 2), &[true, false]).0;
    LossExamples {
        perfect: loss_of(&perfect, &t, &[true; 3]).0,
        zero_gap: (loss_of(&Tensor::zeros(&[3, 6, 6]), &t, &[true; 3]).0
            - WEIGHT * std::f64::consts::LN_2)
            .abs(),
        masked_grad: grad.data()[36..72].iter().fold(0.0, |m, v| m.max(v.abs())),
        masked_gap: (pair - first).abs(),
    }
}

pub fn tiny_experiment(seed: u64) -> ExperimentConfig {
    let mut e = ExperimentConfig::with_seed(seed);
    e.data.train_count = 10;
    e.data.val_count = 5;
    e.model = tiny_model();
    e.student_head = e.model.head.clone();
    e.train.steps = 3;
    e.train.batch_size = 2;
    e.seeds = vec![seed, seed + 1];
    e
}

/// Every file a recipe run writes, keyed by path relative to `dir`.
pub fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs `recipe` twice into fresh directories; `None` when every written
/// file is byte-identical.
pub fn rerun_difference(recipe: Recipe, exp: &ExperimentConfig) -> Option<String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        run_recipe(recipe, exp, Some(dir.path()))
            .unwrap()
            .write(dir.path())
            .unwrap();
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    if fa.is_empty() || fa.keys().ne(fb.keys()) {
        return Some(format!(
            "file sets differ: {:?} vs {:?}",
            fa.keys(),
            fb.keys()
        ));
    }
    fa.iter()
        .find(|(k, v)| fb[*k] != **v)
        .map(|(k, _)| format!("{} differs in {k}", recipe.name()))
}

/// Final training loss after `steps` steps on the first record alone.
pub fn overfit_loss(record: &Record, model: &ModelConfig, steps: usize) -> f64 {
    let mut m = Model::<f32>::new(model, 0).unwrap();
    let cfg = TrainConfig {
        steps,
        batch_size: 1,
        ..TrainConfig::with_seed(0)
    };
    let outcome = train(&mut m, std::slice::from_ref(record), &[], &cfg, None).unwrap();
    outcome.final_loss().unwrap()
}
