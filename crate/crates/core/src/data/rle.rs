//! Uncompressed run-length encoding in column-major order.
//!
//! Runs alternate starting with background, so a mask whose first pixel is
//! foreground begins with a zero-length run.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub fn encode(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn decode(counts: &[u32], height: usize, width: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if total != (height * width) as u64 {
        return Err(Error::InvalidArgument(format!(
            "run lengths sum to {total}, mask has {} pixels",
            height * width
        )));
    }
    let mut mask = BinaryMask::new(height, width);
    let mut pos = 0usize;
    let mut value = false;
    for &run in counts {
        if value {
            for p in pos..pos + run as usize {
                mask.set(p % height, p / height, true);
            }
        }
        pos += run as usize;
        value = !value;
    }
    Ok(mask)
}
