use ctseg::autodiff::{ConvOptions, Graph, Padding, Var};
use ctseg::data::RgbImage;
use ctseg::heads::MaskHeadSpec;
use ctseg::mask::BBox;
use ctseg::model::{mask_loss, Model, ModelConfig};
use ctseg::nn::{Mode, Session};
use ctseg::roi::{center_read_var, roi_align_var, Roi};
use ctseg::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 20;
pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Model losses are O(weight), so central differences carry ~1e-9 of
/// round-off; below this magnitude model gradients compare absolutely.
pub const MODEL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, FLOOR)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Scalar probe `sum(f(inputs) * weights)` with fixed random weights.
fn probe<F>(inputs: &[Tensor<f64>], weights: &Tensor<f64>, f: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), false).unwrap())
        .collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Worst relative error between analytic and numeric gradients of every
/// input element.
pub fn max_error<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true).unwrap())
        .collect();
    let out = f(&mut g, &vars).unwrap();
    let weights = random(rng, g.shape(out));
    let w = g.constant(weights.clone()).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("input reached by the loss");
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (probe(&plus, &weights, &f) - probe(&minus, &weights, &f)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Worst error over `TRIALS` seeded trials, with the failing trial index.
pub fn run_trials(trial: fn(&mut ChaCha8Rng) -> f64) -> (f64, u64) {
    let mut worst = (0.0f64, 0);
    for t in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(t);
        let e = trial(&mut rng);
        if e > worst.0 {
            worst = (e, t);
        }
    }
    worst
}

fn conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let dilation = if k == 3 { rng.random_range(1..=2) } else { 1 };
    let padding = if rng.random_bool(0.7) {
        Padding::Same
    } else {
        Padding::Valid
    };
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let x = random(rng, &[2, 6, 5, cin]);
    let w = random(rng, &[k, k, cin, cout]);
    let opts = ConvOptions {
        stride,
        dilation,
        padding,
    };
    max_error(&[x, w], rng, move |g, v| g.conv2d(v[0], v[1], opts))
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let x = random(rng, &[2, 3, 3, c]);
    let gamma = random(rng, &[c]);
    let beta = random(rng, &[c]);
    max_error(&[x, gamma, beta], rng, |g, v| {
        Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-3)?.0)
    })
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let x = random(rng, &[2, 2, 3, c]);
    let gamma = random(rng, &[c]);
    let beta = random(rng, &[c]);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    max_error(&[x, gamma, beta], rng, move |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-3)
    })
}

fn down2(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(rng, &[2, 4, 6, 2]);
    max_error(&[x], rng, |g, v| g.down2(v[0]))
}

fn up2(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(rng, &[1, 3, 2, 3]);
    max_error(&[x], rng, |g, v| g.up2(v[0]))
}

fn dense(rng: &mut ChaCha8Rng) -> f64 {
    let (n, din, dout) = (
        rng.random_range(1..=4),
        rng.random_range(1..=5),
        rng.random_range(1..=4),
    );
    let x = random(rng, &[n, din]);
    let w = random(rng, &[din, dout]);
    let b = random(rng, &[dout]);
    max_error(&[x, w, b], rng, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.add(y, v[2])?;
        g.relu(y)
    })
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (a, b) = (rng.random_range(-0.1..0.9), rng.random_range(-0.1..0.9));
    let (h, w) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
    BBox {
        ymin: a,
        xmin: b,
        ymax: a + h,
        xmax: b + w,
    }
    .clamped()
    .0
}

fn random_rois(rng: &mut ChaCha8Rng) -> Vec<Roi> {
    (0..3)
        .map(|_| Roi {
            batch: rng.random_range(0..2),
            bbox: random_box(rng),
        })
        .collect()
}

fn roi_align(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(rng, &[2, 5, 6, 2]);
    let rois = random_rois(rng);
    let spc = [1, 4][rng.random_range(0..2)];
    max_error(&[x], rng, |g, v| roi_align_var(g, v[0], &rois, 4, spc))
}

fn center_read(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(rng, &[2, 5, 6, 2]);
    let rois = random_rois(rng);
    max_error(&[x], rng, |g, v| center_read_var(g, v[0], &rois))
}

fn sigmoid_bce(rng: &mut ChaCha8Rng) -> f64 {
    let logits = random(rng, &[3, 2, 2]).map(|z| 3.0 * z);
    let targets = random(rng, &[3, 2, 2]).map(|t| if t > 0.0 { 1.0 } else { 0.0 });
    let has_mask = [true, rng.random_bool(0.5), true];
    max_error(&[logits], rng, move |g, v| {
        mask_loss(g, v[0], &targets, &has_mask, 5.0)
    })
}

fn pointwise(rng: &mut ChaCha8Rng) -> f64 {
    let a = random(rng, &[2, 3, 1]);
    let b = random(rng, &[2, 3, 2]);
    let c = random(rng, &[1, 1, 2]);
    max_error(&[a, b, c], rng, |g, v| {
        let s = g.sigmoid(v[0])?;
        let bc = g.broadcast_to(v[2], &[2, 3, 2])?;
        let m = g.mul(v[1], bc)?;
        let cat = g.concat_last(&[s, m])?;
        g.scale(cat, 0.7)
    })
}

/// Every differentiable op with its randomized trial.
pub const OPS: &[(&str, fn(&mut ChaCha8Rng) -> f64)] = &[
    ("conv2d", conv2d),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("down2", down2),
    ("up2", up2),
    ("dense", dense),
    ("roi_align", roi_align),
    ("center_read", center_read),
    ("sigmoid_bce", sigmoid_bce),
    ("sigmoid_mul_concat_broadcast", pointwise),
];

/// Worst relative error of a sample of a tiny model's parameter gradients.
pub fn model_parameter_error(head: &str) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let image = RgbImage {
        height: 8,
        width: 8,
        data: (0..8 * 8 * 3)
            .map(|_| rng.random_range(0..=255u8))
            .collect(),
    };
    let rois = [
        Roi {
            batch: 0,
            bbox: BBox::new(0.1, 0.2, 0.7, 0.9).unwrap(),
        },
        Roi {
            batch: 0,
            bbox: BBox::new(0.3, 0.0, 1.0, 0.6).unwrap(),
        },
    ];
    let cfg = ModelConfig {
        crop_size: 16,
        backbone_width: 2,
        head: MaskHeadSpec::preset(head).unwrap().with_width_divisor(32),
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(&cfg, 5).unwrap();
    let targets = random(&mut rng, &[2, 16, 16]).map(|t| if t > 0.0 { 1.0 } else { 0.0 });
    let loss_of = |m: &Model<f64>| -> (f64, Vec<(ctseg::nn::ParamId, Tensor<f64>)>) {
        let mut s = Session::new(&m.params, Mode::Train);
        let logits = m.forward_masks_var(&mut s, &[&image], &rois).unwrap();
        let l = mask_loss(&mut s.graph, logits, &targets, &[true, true], 5.0).unwrap();
        let v = s.graph.value(l).item();
        s.graph.backward(l).unwrap();
        (v, s.param_grads())
    };
    let (_, grads) = loss_of(&model);
    let mut worst = 0.0f64;
    for (id, g) in grads.iter().step_by(3) {
        for i in (0..g.numel()).step_by(g.numel().div_ceil(4)) {
            let orig = model.params.get(*id).data()[i];
            model.params.get_mut(*id).data_mut()[i] = orig + STEP;
            let up = loss_of(&model).0;
            model.params.get_mut(*id).data_mut()[i] = orig - STEP;
            let down = loss_of(&model).0;
            model.params.get_mut(*id).data_mut()[i] = orig;
            worst = worst.max(rel_err_floor(
                g.data()[i],
                (up - down) / (2.0 * STEP),
                MODEL_FLOOR,
            ));
        }
    }
    worst
}

pub const MODEL_HEADS: &[&str] = &["resnet-4", "hourglass-10", "fc-2"];
