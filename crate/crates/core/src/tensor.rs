//! Shared array types: images, label maps, per-pixel score maps and binary masks.
//!
//! All maps are row-major with pixel index `row * width + col`. Per-pixel vectors
//! (logits, probabilities, features, gradients) are stored channels-last, so the
//! vector of pixel `j` is `data[j * channels..(j + 1) * channels]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

/// Label sentinel excluded from every loss and metric.
pub const IGNORE_ID: u8 = 255;

/// The known classes `0..num_known` plus one unknown slot at `num_known`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassSpace {
    num_known: usize,
}

impl ClassSpace {
    pub fn new(num_known: usize) -> Result<Self> {
        if num_known == 0 {
            return Err(invalid("num_known", "need at least one known class"));
        }
        // unknown_id must stay below the ignore sentinel.
        if num_known >= IGNORE_ID as usize {
            return Err(invalid("num_known", "must be below 255"));
        }
        Ok(Self { num_known })
    }

    pub fn num_known(&self) -> usize {
        self.num_known
    }

    /// Number of classifier heads with the unknown head included.
    pub fn num_heads(&self) -> usize {
        self.num_known + 1
    }

    pub fn unknown_id(&self) -> u8 {
        self.num_known as u8
    }

    pub fn ignore_id(&self) -> u8 {
        IGNORE_ID
    }

    pub fn is_known(&self, label: u8) -> bool {
        (label as usize) < self.num_known
    }
}

/// An RGB image with values in `[0, 1]`, channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * Self::CHANNELS;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                what: "image data",
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("image data", "values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * Self::CHANNELS;
        &self.data[i..i + Self::CHANNELS]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * Self::CHANNELS;
        &mut self.data[i..i + Self::CHANNELS]
    }
}

/// Per-pixel class indices in `[0, C]` or [`IGNORE_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::LengthMismatch {
                what: "label data",
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    /// Checks every entry is a known class, the unknown class, or ignore.
    pub fn validate(&self, cs: &ClassSpace) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE_ID && l as usize > cs.num_known())
        {
            Some(&label) => Err(Error::LabelOutOfRange {
                label,
                num_classes: cs.num_heads(),
            }),
            None => Ok(()),
        }
    }

    /// Sorted distinct labels, excluding ignore.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..IGNORE_ID).filter(|&l| seen[l as usize]).collect()
    }

    /// Indicator of pixels carrying `label`.
    pub fn mask_of(&self, label: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&l| (l == label) as u8).collect(),
        }
    }
}

/// Generic per-pixel vectors: logits, features, or their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Raw classifier scores, one vector per pixel.
pub type LogitMap = PixelMap;
/// Penultimate-layer activations, one vector per pixel.
pub type FeatureMap = PixelMap;

impl PixelMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                what: "pixel map data",
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn rows(&self) -> core::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    /// Copy keeping only the first `k` channels of every pixel.
    pub fn leading_channels(&self, k: usize) -> Result<PixelMap> {
        if k == 0 || k > self.channels {
            return Err(invalid("channel count", "must be in 1..=channels"));
        }
        let data = self.rows().flat_map(|row| row[..k].iter().copied()).collect();
        Ok(PixelMap {
            height: self.height,
            width: self.width,
            channels: k,
            data,
        })
    }
}

/// Per-pixel categorical distributions: rows nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(PixelMap);

impl ProbMap {
    const ROW_SUM_TOL: f64 = 1e-9;

    /// Validates row sums and signs.
    pub fn new(map: PixelMap) -> Result<Self> {
        for row in map.rows() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(invalid("probability map", "rows must be nonnegative and sum to 1"));
            }
        }
        Ok(Self(map))
    }

    pub fn as_map(&self) -> &PixelMap {
        &self.0
    }

    pub fn into_map(self) -> PixelMap {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn num_pixels(&self) -> usize {
        self.0.num_pixels()
    }

    pub fn rows(&self) -> core::slice::ChunksExact<'_, f64> {
        self.0.rows()
    }

    /// Largest probability of each pixel.
    pub fn max_probs(&self) -> Vec<f64> {
        self.rows()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// A {0,1} per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::LengthMismatch {
                what: "mask data",
                expected: height * width,
                found: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid("mask data", "entries must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    /// `self − other`, clamped at zero.
    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        check_dims("mask", self.dims(), other.dims())?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// The `size_h × size_w` window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<BinaryMask> {
        if row + size_h > self.height || col + size_w > self.width {
            return Err(invalid("crop window", "extends past the mask"));
        }
        Ok(BinaryMask::from_fn(size_h, size_w, |r, c| self.get(row + r, col + c)))
    }
}

pub(crate) fn check_dims(
    what: &'static str,
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index and value of the row maximum; ties go to the lowest index.
pub(crate) fn argmax_row(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

/// Per-pixel softmax over the channel axis.
pub fn softmax(logits: &LogitMap) -> Result<ProbMap> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "logits" });
    }
    let mut out = PixelMap::zeros(logits.height, logits.width, logits.channels);
    for (row, dst) in logits.rows().zip(out.data.chunks_exact_mut(logits.channels)) {
        softmax_row(row, dst);
    }
    Ok(ProbMap(out))
}

/// Per-pixel argmax (lowest index on ties) with the row maximum.
pub fn argmax_with_prob(probs: &ProbMap) -> (LabelMap, Vec<f64>) {
    let map = probs.as_map();
    let (labels, maxes) = map
        .rows()
        .map(|row| {
            let (i, v) = argmax_row(row);
            (i as u8, v)
        })
        .unzip();
    (
        LabelMap {
            height: map.height,
            width: map.width,
            data: labels,
        },
        maxes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(rows: &[&[f64]]) -> PixelMap {
        let channels = rows[0].len();
        PixelMap::new(1, rows.len(), channels, rows.concat()).unwrap()
    }

    #[test]
    fn class_space_slots() {
        let cs = ClassSpace::new(4).unwrap();
        assert_eq!(cs.unknown_id(), 4);
        assert_eq!(cs.num_heads(), 5);
        assert_eq!(cs.ignore_id(), 255);
        assert!(ClassSpace::new(0).is_err());
        assert!(ClassSpace::new(255).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&map(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(p.as_map().data(), &[0.5, 0.5]);

        let p = softmax(&map(&[&[1.0, 0.0, 0.0]])).unwrap();
        // e / (e + 2), 1 / (e + 2)
        let expected = [0.5761, 0.2119, 0.2119];
        for (a, b) in p.as_map().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert_eq!(
            softmax(&map(&[&[f64::NAN, 0.0]])),
            Err(Error::NonFinite { what: "logits" })
        );
        assert!(softmax(&map(&[&[f64::INFINITY, 0.0]])).is_err());
    }

    #[test]
    fn argmax_examples() {
        let p = ProbMap::new(map(&[&[0.6, 0.3, 0.1]])).unwrap();
        let (l, m) = argmax_with_prob(&p);
        assert_eq!(l.data(), &[0]);
        assert_eq!(m, [0.6]);

        let p = ProbMap::new(map(&[&[0.5, 0.5]])).unwrap();
        let (l, m) = argmax_with_prob(&p);
        assert_eq!(l.data(), &[0]);
        assert_eq!(m, [0.5]);
    }

    #[test]
    fn argmax_two_by_two_matches_scan() {
        let rows: [[f64; 3]; 4] = [
            [0.1, 0.7, 0.2],
            [0.2, 0.2, 0.6],
            [0.5, 0.25, 0.25],
            [0.3, 0.3, 0.4],
        ];
        let p = ProbMap::new(PixelMap::new(2, 2, 3, rows.concat()).unwrap()).unwrap();
        let (l, m) = argmax_with_prob(&p);
        let mut expected = [0u8; 4];
        for (j, row) in rows.iter().enumerate() {
            let mut best = 0;
            for c in 0..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            expected[j] = best as u8;
            assert_eq!(m[j], row[best]);
        }
        assert_eq!(l.data(), &expected);
        assert_eq!(l.data(), &[1, 2, 0, 2]);
    }

    #[test]
    fn prob_map_validation() {
        assert!(ProbMap::new(map(&[&[0.6, 0.6]])).is_err());
        assert!(ProbMap::new(map(&[&[1.2, -0.2]])).is_err());
    }

    #[test]
    fn label_validation() {
        let cs = ClassSpace::new(2).unwrap();
        assert!(LabelMap::new(1, 3, vec![0, 2, 255]).unwrap().validate(&cs).is_ok());
        assert_eq!(
            LabelMap::new(1, 2, vec![0, 3]).unwrap().validate(&cs),
            Err(Error::LabelOutOfRange {
                label: 3,
                num_classes: 3
            })
        );
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(data in prop::collection::vec(-50.0f64..50.0, 4 * 6)) {
            let p = softmax(&PixelMap::new(2, 2, 6, data).unwrap()).unwrap();
            for row in p.rows() {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(
            data in prop::collection::vec(-50.0f64..50.0, 3 * 4),
            shifts in prop::collection::vec(-20.0f64..20.0, 3),
        ) {
            let base = PixelMap::new(1, 3, 4, data.clone()).unwrap();
            let shifted_data: Vec<f64> = data
                .chunks(4)
                .zip(&shifts)
                .flat_map(|(row, s)| row.iter().map(move |v| v + s))
                .collect();
            let shifted = PixelMap::new(1, 3, 4, shifted_data).unwrap();
            let a = softmax(&base).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.as_map().data().iter().zip(b.as_map().data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn argmax_of_softmax_matches_logit_argmax(data in prop::collection::vec(-50.0f64..50.0, 5 * 5)) {
            let logits = PixelMap::new(1, 5, 5, data).unwrap();
            let (labels, _) = argmax_with_prob(&softmax(&logits).unwrap());
            for (j, row) in logits.rows().enumerate() {
                prop_assert_eq!(labels.data()[j] as usize, argmax_row(row).0);
            }
        }
    }
}
