use ctseg::mask::BBox;
use ctseg::roi::roi_align;
use ctseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (y, x) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
    let (h, w) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6));
    BBox::new(y, x, (y + h).min(1.0), (x + w).min(1.0)).unwrap()
}

pub fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::new(
        &[h, w, c],
        (0..h * w * c)
            .map(|_| rng.random_range(-5.0..5.0))
            .collect(),
    )
    .unwrap()
}

/// `alpha + beta * y + gamma * x` sampled at pixel centers, one channel.
pub fn ramp(h: usize, w: usize, alpha: f64, beta: f64, gamma: f64) -> Tensor<f64> {
    let mut d = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            d.push(alpha + beta * (i as f64 + 0.5) + gamma * (j as f64 + 0.5));
        }
    }
    Tensor::new(&[h, w, 1], d).unwrap()
}

/// Closed-form crop of an affine ramp: sample points are clamped to the
/// hull of pixel centers, then the ramp is evaluated and averaged per cell.
pub fn ramp_crop(
    b: &BBox,
    h: usize,
    w: usize,
    s: usize,
    spc: usize,
    coef: (f64, f64, f64),
) -> Vec<f64> {
    let offs: &[f64] = if spc == 1 { &[0.5] } else { &[0.25, 0.75] };
    let (ch, cw) = (
        b.height() * h as f64 / s as f64,
        b.width() * w as f64 / s as f64,
    );
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let mut v = 0.0;
            for &oy in offs {
                for &ox in offs {
                    let y = (b.ymin * h as f64 + (i as f64 + oy) * ch).clamp(0.5, h as f64 - 0.5);
                    let x = (b.xmin * w as f64 + (j as f64 + ox) * cw).clamp(0.5, w as f64 - 0.5);
                    v += coef.0 + coef.1 * y + coef.2 * x;
                }
            }
            out.push(v / (offs.len() * offs.len()) as f64);
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst errors of the constant-field, full-image, linearity and ramp
/// identities over `cases` seeded cases.
pub struct IdentityErrors {
    pub constant: f64,
    pub full_image: f64,
    pub linearity: f64,
    pub ramp: f64,
}

pub fn identity_errors(cases: u64) -> IdentityErrors {
    let mut e = IdentityErrors {
        constant: 0.0,
        full_image: 0.0,
        linearity: 0.0,
        ramp: 0.0,
    };
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let b = random_box(&mut rng);
        let spc = [1, 4][rng.random_range(0..2)];
        let s = rng.random_range(1..9);

        let v: f64 = rng.random_range(-10.0..10.0);
        let out = roi_align(&Tensor::full(&[7, 9, 2], v), &b, s, spc).unwrap();
        e.constant = e
            .constant
            .max(out.data().iter().map(|o| (o - v).abs()).fold(0.0, f64::max));

        let n = rng.random_range(1..8);
        let f = random_field(&mut rng, n, n, 2);
        let out = roi_align(&f, &BBox::full(), n, 1).unwrap();
        e.full_image = e.full_image.max(max_abs(out.data(), f.data()));

        let (f, g) = (
            random_field(&mut rng, 6, 5, 2),
            random_field(&mut rng, 6, 5, 2),
        );
        let (a, c) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix = Tensor::new(
            &[6, 5, 2],
            f.data()
                .iter()
                .zip(g.data())
                .map(|(x, y)| a * x + c * y)
                .collect(),
        )
        .unwrap();
        let lhs = roi_align(&mix, &b, 4, spc).unwrap();
        let (rf, rg) = (
            roi_align(&f, &b, 4, spc).unwrap(),
            roi_align(&g, &b, 4, spc).unwrap(),
        );
        let rhs: Vec<f64> = rf
            .data()
            .iter()
            .zip(rg.data())
            .map(|(x, y)| a * x + c * y)
            .collect();
        e.linearity = e.linearity.max(max_abs(lhs.data(), &rhs));

        let coef = (
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let out = roi_align(&ramp(8, 10, coef.0, coef.1, coef.2), &b, 6, spc).unwrap();
        e.ramp = e
            .ramp
            .max(max_abs(out.data(), &ramp_crop(&b, 8, 10, 6, spc, coef)));
    }
    e
}
