//! Binary dilation and erosion with a square structuring element, and the
//! boundary/core masks used by the contrastive loss.
//!
//! Pixels outside the mask count as 0 for both operations, so erosion always
//! clears a border of width `kernel_size / 2` per iteration.

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::tensor::BinaryMask;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MorphConfig {
    pub kernel_size: usize,
    pub iterations: usize,
    pub crop_size: usize,
    pub max_crop_retries: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            iterations: 1,
            crop_size: 64,
            max_crop_retries: 8,
        }
    }
}

impl MorphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(invalid("kernel_size", "must be odd and at least 3"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        if self.crop_size < self.kernel_size {
            return Err(invalid("crop_size", "must be at least kernel_size"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Reduce {
    Any,
    All,
}

/// One pass of a square window reduction, done separably: rows, then columns.
fn window_pass(mask: &BinaryMask, radius: usize, reduce: Reduce) -> BinaryMask {
    let (h, w) = mask.dims();
    // Out-of-bounds taps read as 0.
    let fold = |len: usize, i: usize, read: &dyn Fn(usize) -> u8| -> u8 {
        let lo = i as isize - radius as isize;
        let hi = i + radius;
        let clipped = lo < 0 || hi >= len;
        let taps = (lo.max(0) as usize..=hi.min(len - 1)).map(read);
        match reduce {
            Reduce::Any => taps.fold(0, |a, v| a | v),
            Reduce::All if clipped => 0,
            Reduce::All => taps.fold(1, |a, v| a & v),
        }
    };
    let src = mask.data();
    let mut horiz = alloc::vec![0u8; h * w];
    for row in 0..h {
        for col in 0..w {
            horiz[row * w + col] = fold(w, col, &|c| src[row * w + c]);
        }
    }
    let mut out = alloc::vec![0u8; h * w];
    for row in 0..h {
        for col in 0..w {
            out[row * w + col] = fold(h, row, &|r| horiz[r * w + col]);
        }
    }
    BinaryMask::new(h, w, out).expect("window pass keeps mask shape")
}

fn apply(mask: &BinaryMask, cfg: &MorphConfig, reduce: Reduce) -> BinaryMask {
    let radius = cfg.kernel_size / 2;
    let mut out = window_pass(mask, radius, reduce);
    for _ in 1..cfg.iterations {
        out = window_pass(&out, radius, reduce);
    }
    out
}

/// Sets every pixel whose window touches a one.
pub fn dilate(mask: &BinaryMask, cfg: &MorphConfig) -> BinaryMask {
    apply(mask, cfg, Reduce::Any)
}

/// Keeps only pixels whose whole window is ones.
pub fn erode(mask: &BinaryMask, cfg: &MorphConfig) -> BinaryMask {
    apply(mask, cfg, Reduce::All)
}

/// A crop of the private mask and where it was taken from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivateCrop {
    pub mask: BinaryMask,
    /// Top-left `(row, col)` in the source mask.
    pub origin: (usize, usize),
}

/// Takes a uniformly placed `crop_size` square of `private`, resampling until it
/// holds at least one private pixel. `None` when every attempt came back empty.
pub fn random_private_crop(
    private: &BinaryMask,
    cfg: &MorphConfig,
    rng: &mut Rng,
) -> Result<Option<PrivateCrop>> {
    let size = cfg.crop_size;
    let (h, w) = private.dims();
    if size > h || size > w {
        return Err(invalid("crop_size", "larger than the private mask"));
    }
    for _ in 0..cfg.max_crop_retries {
        let row = rng.random_range(0..=h - size);
        let col = rng.random_range(0..=w - size);
        let mask = private.crop(row, col, size, size)?;
        if !mask.is_empty() {
            return Ok(Some(PrivateCrop {
                mask,
                origin: (row, col),
            }));
        }
    }
    Ok(None)
}

/// Boundary band and eroded core of a cropped private mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeconMasks {
    /// Dilation minus the mask: known pixels just outside the private region.
    pub negative: BinaryMask,
    /// Erosion of the mask: pixels confidently inside the private region.
    pub positive: BinaryMask,
}

pub fn decon_masks(cropped: &BinaryMask, cfg: &MorphConfig) -> DeconMasks {
    let negative = dilate(cropped, cfg)
        .difference(cropped)
        .expect("dilation keeps mask shape");
    DeconMasks {
        negative,
        positive: erode(cropped, cfg),
    }
}
