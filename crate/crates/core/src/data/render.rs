//! Shape geometry and anti-aliased compositing.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Category;

/// Supersampling grid per pixel axis for edge coverage.
const SUPERSAMPLE: usize = 4;

/// A shape instance in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub category: Category,
    pub cy: f64,
    pub cx: f64,
    /// Circumscribed radius in pixels.
    pub radius: f64,
    pub angle: f64,
    /// Minor-axis ratio for ellipses and bars.
    pub aspect: f64,
    pub color: [f64; 3],
}

impl ShapeInstance {
    /// Whether the continuous point `(y, x)` lies inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = (y - self.cy) / self.radius;
        let dx = (x - self.cx) / self.radius;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        inside_unit(self.category, u, v, self.aspect)
    }

    /// Exact support test at the center of pixel `(r, c)`.
    pub fn covers_pixel_center(&self, r: usize, c: usize) -> bool {
        self.contains(r as f64 + 0.5, c as f64 + 0.5)
    }

    /// Fraction of pixel `(r, c)` covered, by supersampling.
    pub fn coverage(&self, r: usize, c: usize) -> f64 {
        let n = SUPERSAMPLE as f64;
        let mut hits = 0usize;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let y = r as f64 + (i as f64 + 0.5) / n;
                let x = c as f64 + (j as f64 + 0.5) / n;
                if self.contains(y, x) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (n * n)
    }

    /// Pixel rows and columns the shape can touch, clipped to the image.
    pub fn pixel_extent(&self, size: usize) -> (usize, usize, usize, usize) {
        let lo = |v: f64| (v - self.radius - 1.0).floor().max(0.0) as usize;
        let hi = |v: f64| ((v + self.radius + 1.0).ceil().max(0.0) as usize).min(size);
        (lo(self.cy), lo(self.cx), hi(self.cy), hi(self.cx))
    }
}

/// Membership in the unit-radius canonical shape; `(u, v)` is the rotated
/// offset from the center.
fn inside_unit(category: Category, u: f64, v: f64, aspect: f64) -> bool {
    let r2 = u * u + v * v;
    match category {
        Category::Disk => r2 <= 1.0,
        Category::Ellipse => u * u + (v / aspect) * (v / aspect) <= 1.0,
        Category::Square => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            u.abs() <= h && v.abs() <= h
        }
        Category::Bar => u.abs() <= 0.95 && v.abs() <= aspect * 0.95,
        Category::Triangle => {
            // circumradius 1, apothem 0.5
            [-90.0f64, 30.0, 150.0].iter().all(|deg| {
                let (s, c) = deg.to_radians().sin_cos();
                u * c + v * s <= 0.5
            })
        }
        Category::Ring => (0.3025..=1.0).contains(&r2),
        Category::Cross => {
            let (a, b) = (u.abs(), v.abs());
            (a <= 0.3 && b <= 0.95) || (b <= 0.3 && a <= 0.95)
        }
        Category::Crescent => {
            let du = u - 0.5;
            r2 <= 1.0 && du * du + v * v > 0.64
        }
    }
}

/// Appearance parameters for one image.
#[derive(Clone, Debug)]
pub struct Appearance {
    pub background_noise: f64,
    pub object_noise: f64,
}

pub fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.random::<f64>(),
        rng.random::<f64>(),
        rng.random::<f64>(),
    ]
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Object color at least `min_contrast` (Euclidean, unit RGB cube) from `bg`.
pub fn contrasting_color<R: Rng + ?Sized>(
    rng: &mut R,
    bg: &[f64; 3],
    min_contrast: f64,
) -> [f64; 3] {
    for _ in 0..64 {
        let c = random_color(rng);
        if distance(&c, bg) >= min_contrast {
            return c;
        }
    }
    // the opposite corner of the cube is always at least sqrt(3)/2 away
    bg.map(|v| if v < 0.5 { 1.0 } else { 0.0 })
}

/// Renders a background gradient plus the shapes in z-order (later on top).
pub fn composite<R: Rng + ?Sized>(
    size: usize,
    background: &[f64; 3],
    gradient: &[f64; 3],
    shapes: &[ShapeInstance],
    look: &Appearance,
    rng: &mut R,
) -> Vec<u8> {
    let mut img = vec![0.0f64; size * size * 3];
    let bg_noise = Normal::new(0.0, look.background_noise.max(1e-12)).expect("finite");
    for r in 0..size {
        let t = r as f64 / size as f64 - 0.5;
        for c in 0..size {
            let base = (r * size + c) * 3;
            for k in 0..3 {
                let n = if look.background_noise > 0.0 {
                    bg_noise.sample(rng)
                } else {
                    0.0
                };
                img[base + k] = background[k] + gradient[k] * t + n;
            }
        }
    }
    let obj_noise = Normal::new(0.0, look.object_noise.max(1e-12)).expect("finite");
    for s in shapes {
        let (r0, c0, r1, c1) = s.pixel_extent(size);
        for r in r0..r1 {
            for c in c0..c1 {
                let a = s.coverage(r, c);
                if a == 0.0 {
                    continue;
                }
                let base = (r * size + c) * 3;
                for k in 0..3 {
                    let n = if look.object_noise > 0.0 {
                        obj_noise.sample(rng)
                    } else {
                        0.0
                    };
                    img[base + k] = a * (s.color[k] + n) + (1.0 - a) * img[base + k];
                }
            }
        }
    }
    img.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(category: Category) -> ShapeInstance {
        ShapeInstance {
            category,
            cy: 32.0,
            cx: 32.0,
            radius: 20.0,
            angle: 0.3,
            aspect: 0.5,
            color: [1.0, 0.0, 0.0],
        }
    }

    #[test]
    fn centers_and_holes() {
        assert!(shape(Category::Disk).contains(32.0, 32.0));
        assert!(!shape(Category::Ring).contains(32.0, 32.0));
        assert!(shape(Category::Ring).contains(32.0 + 16.0, 32.0));
        assert!(shape(Category::Cross).contains(32.0, 32.0));
        assert!(!shape(Category::Crescent).contains(32.0, 32.0));
        for cat in Category::ALL {
            let s = shape(cat);
            assert!(!s.contains(32.0 + 20.5, 32.0), "{cat:?} exceeds its radius");
        }
    }

    #[test]
    fn coverage_bounds() {
        let s = shape(Category::Square);
        assert_eq!(s.coverage(32, 32), 1.0);
        assert_eq!(s.coverage(0, 0), 0.0);
    }
}
