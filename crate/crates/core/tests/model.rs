mod common;

use common::pipeline::{loss_examples, loss_of, permutation_mismatch, tiny_data, tiny_model};
use ctseg::mask::BBox;
use ctseg::model::{jitter_box, make_training_boxes, BoxMode, JitterConfig, Model};
use ctseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn category_permutation_changes_nothing() {
    assert_eq!(permutation_mismatch(), None);
}

#[test]
fn mask_loss_examples() {
    for seed in 0..5 {
        let e = loss_examples(seed);
        assert!(e.perfect < 1e-9, "{}", e.perfect);
        assert!(e.zero_gap < 1e-9, "{}", e.zero_gap);
        assert_eq!(e.masked_grad, 0.0);
        assert!(e.masked_gap < 1e-12, "{}", e.masked_gap);
    }
}

#[test]
fn masked_instances_leave_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::new(
        &[3, 6, 6],
        (0..108)
            .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
            .collect(),
    )
    .unwrap();
    let z = Tensor::new(
        &[3, 6, 6],
        (0..108).map(|_| rng.random_range(-4.0..4.0)).collect(),
    )
    .unwrap();
    let (masked, grad) = loss_of(&z, &t, &[true, false, true]);
    assert!(grad.data()[..36].iter().any(|&v| v != 0.0));
    let one = |k: usize, x: &Tensor<f64>| {
        Tensor::new(&[1, 6, 6], x.data()[k * 36..(k + 1) * 36].to_vec()).unwrap()
    };
    let (first, _) = loss_of(&one(0, &z), &one(0, &t), &[true]);
    let (third, _) = loss_of(&one(2, &z), &one(2, &t), &[true]);
    assert!((masked - (first + third) / 2.0).abs() < 1e-12);
}

#[test]
fn gt_only_mode_consumes_no_randomness() {
    let d = tiny_data();
    let anns = &d.train[0].annotations;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let boxes = make_training_boxes(anns, BoxMode::GtOnly, &JitterConfig::default(), &mut rng);
    assert_eq!(
        boxes.iter().map(|b| b.0).collect::<Vec<_>>(),
        anns.iter().map(|a| a.bbox).collect::<Vec<_>>()
    );
    assert_eq!(
        rng.random::<u64>(),
        ChaCha8Rng::seed_from_u64(9).random::<u64>()
    );
    let both = make_training_boxes(
        anns,
        BoxMode::ProposalsPlusGt,
        &JitterConfig::default(),
        &mut rng,
    );
    assert_eq!(both.len(), 2 * anns.len());
    assert!(both
        .iter()
        .enumerate()
        .all(|(i, (_, k))| *k == i % anns.len()));
}

#[test]
fn jittered_boxes_respect_min_iou() {
    let cfg = JitterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut moved = 0;
    let mut worst: f64 = 1.0;
    for _ in 0..10_000 {
        let y = rng.random_range(0.0..0.7);
        let x = rng.random_range(0.0..0.7);
        let gt = BBox::new(
            y,
            x,
            y + rng.random_range(0.05..0.3),
            x + rng.random_range(0.05..0.3),
        )
        .unwrap();
        let j = jitter_box(&gt, &cfg, &mut rng);
        assert!(j.is_valid());
        worst = worst.min(j.iou(&gt));
        moved += usize::from(j != gt);
    }
    assert!(worst >= cfg.min_iou, "{worst}");
    assert!(moved > 9_000, "only {moved} boxes moved");
}

#[test]
fn identical_calls_give_identical_logits() {
    let d = tiny_data();
    let mut m = Model::<f32>::new(&tiny_model(), 0).unwrap();
    let cfg = ctseg::train::TrainConfig {
        steps: 1,
        ..ctseg::train::TrainConfig::with_seed(0)
    };
    ctseg::train::train(&mut m, &d.train, &d.val, &cfg, None).unwrap();
    let boxes: Vec<BBox> = d.val[0].annotations.iter().map(|a| a.bbox).collect();
    let a = m.forward_masks(&d.val[0].image, &boxes).unwrap();
    assert_eq!(a.shape(), &[boxes.len(), 16, 16]);
    assert_eq!(a, m.forward_masks(&d.val[0].image, &boxes).unwrap());
    assert_eq!(
        m.forward_masks(&d.val[0].image, &[]).unwrap().shape(),
        &[0, 16, 16]
    );
}
