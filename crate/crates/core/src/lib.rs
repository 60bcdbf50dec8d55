//! Open-set domain adaptation for semantic segmentation, at desk scale.
//!
//! This crate holds the pure algorithmic pieces: label/probability types,
//! binary morphology, teacher pseudo-labeling with an unknown class, the
//! dilation-erosion contrastive loss, open-set mixing augmentation, a tiny
//! hand-differentiated segmentation network with its student/teacher trainer,
//! a synthetic two-domain benchmark generator, and the common/private/H-Score
//! metrics. Everything takes explicit RNGs and allocates only through `alloc`,
//! so the crate builds without `std`. File formats and the command line live in
//! the `busseg` companion crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod morphology;
pub mod pseudolabel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{
    argmax_with_prob, softmax, BinaryMask, ClassSpace, ImageTensor, LabelMap, PixelMap, ProbMap,
    IGNORE_ID,
};

/// Deterministic RNG used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
