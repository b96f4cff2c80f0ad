//! Binary image masks and normalized boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in coordinates normalized to the image extent.
///
/// A valid box satisfies `0 <= ymin < ymax <= 1` and `0 <= xmin < xmax <= 1`;
/// the fields are public so that jittered proposals may temporarily leave
/// that range before being clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub ymin: f64,
    pub xmin: f64,
    pub ymax: f64,
    pub xmax: f64,
}

impl BBox {
    pub fn new(ymin: f64, xmin: f64, ymax: f64, xmax: f64) -> Result<Self> {
        let b = BBox {
            ymin,
            xmin,
            ymax,
            xmax,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox(format!("{b:?}")))
        }
    }

    pub fn full() -> Self {
        BBox {
            ymin: 0.0,
            xmin: 0.0,
            ymax: 1.0,
            xmax: 1.0,
        }
    }

    /// Box covering pixel rows `r0..r1` and columns `c0..c1` (exclusive ends).
    pub fn from_pixels(
        r0: usize,
        c0: usize,
        r1: usize,
        c1: usize,
        height: usize,
        width: usize,
    ) -> Self {
        BBox {
            ymin: r0 as f64 / height as f64,
            xmin: c0 as f64 / width as f64,
            ymax: r1 as f64 / height as f64,
            xmax: c1 as f64 / width as f64,
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.ymin, self.xmin, self.ymax, self.xmax]
            .iter()
            .all(|v| v.is_finite());
        finite
            && 0.0 <= self.ymin
            && self.ymin < self.ymax
            && self.ymax <= 1.0
            && 0.0 <= self.xmin
            && self.xmin < self.xmax
            && self.xmax <= 1.0
    }

    /// Clamps into the unit square; the flag reports whether anything moved.
    pub fn clamped(&self) -> (BBox, bool) {
        let c = BBox {
            ymin: self.ymin.clamp(0.0, 1.0),
            xmin: self.xmin.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
        };
        let moved = c != *self;
        (c, moved)
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn area(&self) -> f64 {
        self.height().max(0.0) * self.width().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.ymin + self.ymax), 0.5 * (self.xmin + self.xmax))
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ih = (self.ymax.min(other.ymax) - self.ymin.max(other.ymin)).max(0.0);
        let iw = (self.xmax.min(other.xmax) - self.xmin.max(other.xmin)).max(0.0);
        let inter = ih * iw;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask with {} bits", bits.len()),
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box of the support as `(r0, c0, r1, c1)`, exclusive ends.
    pub fn support_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bounds = Some(match bounds {
                        None => (r, c, r + 1, c + 1),
                        Some((r0, c0, r1, c1)) => {
                            (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1))
                        }
                    });
                }
            }
        }
        bounds
    }

    pub fn tight_box(&self) -> Option<BBox> {
        self.support_bounds()
            .map(|(r0, c0, r1, c1)| BBox::from_pixels(r0, c0, r1, c1, self.height, self.width))
    }

    /// Keeps only the pixels whose centers fall inside `b`.
    pub fn restricted_to(&self, b: &BBox) -> BinaryMask {
        let (h, w) = (self.height as f64, self.width as f64);
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            let y = (r as f64 + 0.5) / h;
            let x = (c as f64 + 0.5) / w;
            self.get(r, c) && y >= b.ymin && y < b.ymax && x >= b.xmin && x < b.xmax
        })
    }
}
