//! Cross-domain mixing: ClassMix, resized thing-class pasting into the target,
//! and attaching target private regions onto the source.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::pseudolabel::PseudoLabel;
use crate::tensor::{check_dims, BinaryMask, ClassSpace, ImageTensor, LabelMap};
use crate::Rng;

pub const DEFAULT_RESIZE_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MixConfig {
    /// Scale applied to the pasted thing-class object.
    pub resize_scale: f64,
    /// Known classes eligible for resize-and-paste.
    pub thing_class_ids: Vec<u8>,
}

impl MixConfig {
    pub fn new(thing_class_ids: Vec<u8>) -> Self {
        Self {
            resize_scale: DEFAULT_RESIZE_SCALE,
            thing_class_ids,
        }
    }

    pub fn validate(&self, cs: &ClassSpace) -> Result<()> {
        if !(self.resize_scale > 0.0 && self.resize_scale.is_finite()) {
            return Err(invalid("resize_scale", "must be positive"));
        }
        if self.thing_class_ids.iter().any(|&c| !cs.is_known(c)) {
            return Err(invalid("thing_class_ids", "must be known classes"));
        }
        Ok(())
    }
}

/// A mixed image/label pair and which pixels came from the pasted domain.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPair {
    pub image: ImageTensor,
    pub label: LabelMap,
    pub origin_mask: BinaryMask,
}

impl MixedPair {
    /// Loss weight per pixel: `pasted` where the origin mask is set, `base` elsewhere.
    pub fn pixel_weights(&self, pasted: f64, base: f64) -> Vec<f64> {
        self.origin_mask
            .data()
            .iter()
            .map(|&m| if m == 1 { pasted } else { base })
            .collect()
    }
}

/// Types that can be composited pixelwise under a binary mask.
pub trait Blend: Sized {
    fn dims(&self) -> (usize, usize);
    fn blend_with(mask: &BinaryMask, fg: &Self, bg: &Self) -> Self;
}

impl Blend for ImageTensor {
    fn dims(&self) -> (usize, usize) {
        ImageTensor::dims(self)
    }

    fn blend_with(mask: &BinaryMask, fg: &Self, bg: &Self) -> Self {
        let c = ImageTensor::CHANNELS;
        let data = mask
            .data()
            .iter()
            .enumerate()
            .flat_map(|(j, &m)| {
                let src = if m == 1 { fg } else { bg };
                src.data()[j * c..(j + 1) * c].iter().copied()
            })
            .collect();
        ImageTensor::new(fg.height(), fg.width(), data).expect("blend keeps image shape")
    }
}

impl Blend for LabelMap {
    fn dims(&self) -> (usize, usize) {
        LabelMap::dims(self)
    }

    fn blend_with(mask: &BinaryMask, fg: &Self, bg: &Self) -> Self {
        let data = mask
            .data()
            .iter()
            .zip(fg.data().iter().zip(bg.data()))
            .map(|(&m, (&f, &b))| if m == 1 { f } else { b })
            .collect();
        LabelMap::new(fg.height(), fg.width(), data).expect("blend keeps label shape")
    }
}

/// `mask ⊙ foreground + (1 − mask) ⊙ background`.
pub fn blend<T: Blend>(mask: &BinaryMask, foreground: &T, background: &T) -> Result<T> {
    check_dims("blend foreground", mask.dims(), foreground.dims())?;
    check_dims("blend background", mask.dims(), background.dims())?;
    Ok(T::blend_with(mask, foreground, background))
}

/// A ClassMix selection: the chosen classes and their pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixSelection {
    pub classes: Vec<u8>,
    pub mask: BinaryMask,
}

/// Picks `ceil(K / 2)` of the `K` classes present in `label` uniformly at random.
pub fn classmix_select(label: &LabelMap, rng: &mut Rng) -> Result<ClassMixSelection> {
    let present = label.classes_present();
    if present.is_empty() {
        return Err(Error::EmptyInput {
            what: "classmix source label",
        });
    }
    let take = present.len().div_ceil(2);
    let mut classes: Vec<u8> = index::sample(rng, present.len(), take)
        .into_iter()
        .map(|i| present[i])
        .collect();
    classes.sort_unstable();
    let mut selected = [false; 256];
    for &c in &classes {
        selected[c as usize] = true;
    }
    let mask = BinaryMask::new(
        label.height(),
        label.width(),
        label.data().iter().map(|&l| selected[l as usize] as u8).collect(),
    )?;
    Ok(ClassMixSelection { classes, mask })
}

pub fn classmix_mask(label: &LabelMap, rng: &mut Rng) -> Result<BinaryMask> {
    classmix_select(label, rng).map(|s| s.mask)
}

/// A thing-class object cut from its bounding box and rescaled.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizedPatch {
    pub image: ImageTensor,
    /// Object pixels inside the resized patch.
    pub mask: BinaryMask,
    pub class_id: u8,
    /// Top-left `(row, col)` of the paste in the destination frame.
    pub origin: (usize, usize),
}

fn bounding_box(label: &LabelMap, class_id: u8) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..label.height() {
        for c in 0..label.width() {
            if label.get(r, c) == class_id {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    (r0 != usize::MAX).then_some((r0, c0, r1 + 1, c1 + 1))
}

/// Half-pixel-centre source coordinate for output index `dst`, clamped to the input.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    let ratio = in_len as f64 / out_len as f64;
    ((dst as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64)
}

/// Bilinear resampling of `image` to `out_h × out_w`.
pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (in_h, in_w) = image.dims();
    let mut out = ImageTensor::zeros(out_h, out_w);
    for r in 0..out_h {
        let y = source_coord(r, in_h, out_h);
        let y0 = y as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = y - y0 as f64;
        for c in 0..out_w {
            let x = source_coord(c, in_w, out_w);
            let x0 = x as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = x - x0 as f64;
            let dst = out.pixel_mut(r, c);
            for (ch, d) in dst.iter_mut().enumerate() {
                let top = image.pixel(y0, x0)[ch] * (1.0 - fx) + image.pixel(y0, x1)[ch] * fx;
                let bottom = image.pixel(y1, x0)[ch] * (1.0 - fx) + image.pixel(y1, x1)[ch] * fx;
                *d = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Nearest-neighbour resampling of a mask to `out_h × out_w`.
pub fn resize_nearest(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (in_h, in_w) = mask.dims();
    let pick = |dst: usize, in_len: usize, out_len: usize| {
        let src = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64) as usize;
        src.min(in_len - 1)
    };
    BinaryMask::from_fn(out_h, out_w, |r, c| {
        mask.get(pick(r, in_h, out_h), pick(c, in_w, out_w))
    })
}

/// Cuts the bounding box of `class_id`, rescales it by `scale` and picks a
/// uniform paste origin inside a `frame` sized destination. `None` when the
/// rescaled patch cannot fit or collapses to nothing.
pub fn resize_thing_patch(
    image: &ImageTensor,
    label: &LabelMap,
    class_id: u8,
    scale: f64,
    frame: (usize, usize),
    rng: &mut Rng,
) -> Result<Option<ResizedPatch>> {
    check_dims("patch source", image.dims(), label.dims())?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid("resize_scale", "must be positive"));
    }
    let (r0, c0, r1, c1) = bounding_box(label, class_id).ok_or(Error::ClassAbsent { class_id })?;
    let (bh, bw) = (r1 - r0, c1 - c0);
    let out_h = libm::floor(bh as f64 * scale).max(1.0) as usize;
    let out_w = libm::floor(bw as f64 * scale).max(1.0) as usize;
    if out_h > frame.0 || out_w > frame.1 {
        return Ok(None);
    }

    let mut crop = ImageTensor::zeros(bh, bw);
    for r in 0..bh {
        for c in 0..bw {
            crop.pixel_mut(r, c).copy_from_slice(image.pixel(r0 + r, c0 + c));
        }
    }
    let object = BinaryMask::from_fn(bh, bw, |r, c| label.get(r0 + r, c0 + c) == class_id);
    let mask = resize_nearest(&object, out_h, out_w);
    if mask.is_empty() {
        return Ok(None);
    }
    let origin = (
        rng.random_range(0..=frame.0 - out_h),
        rng.random_range(0..=frame.1 - out_w),
    );
    Ok(Some(ResizedPatch {
        image: resize_bilinear(&crop, out_h, out_w),
        mask,
        class_id,
        origin,
    }))
}

/// Pastes the object pixels of `patch` over `pair`, overwriting what is beneath.
/// Returns the paste footprint in frame coordinates.
pub fn paste_patch(pair: &mut MixedPair, patch: &ResizedPatch) -> BinaryMask {
    let (h, w) = pair.image.dims();
    let (or, oc) = patch.origin;
    let mut footprint = BinaryMask::zeros(h, w);
    for r in 0..patch.mask.height() {
        for c in 0..patch.mask.width() {
            if patch.mask.get(r, c) {
                pair.image
                    .pixel_mut(or + r, oc + c)
                    .copy_from_slice(patch.image.pixel(r, c));
                pair.label.set(or + r, oc + c, patch.class_id);
                footprint.set(or + r, oc + c, true);
            }
        }
    }
    footprint
}

/// Source content (ClassMix classes) composited onto the target.
fn classmix_onto_target(
    source: (&ImageTensor, &LabelMap),
    target: (&ImageTensor, &PseudoLabel),
    rng: &mut Rng,
) -> Result<(MixedPair, Vec<u8>)> {
    check_dims("source label", source.0.dims(), source.1.dims())?;
    check_dims("target image", source.0.dims(), target.0.dims())?;
    check_dims("target pseudo-label", source.0.dims(), target.1.labels.dims())?;
    let (h, w) = source.0.dims();
    let selection = match classmix_select(source.1, rng) {
        Ok(s) => s,
        // Nothing labeled in the source: nothing to paste.
        Err(Error::EmptyInput { .. }) => ClassMixSelection {
            classes: Vec::new(),
            mask: BinaryMask::zeros(h, w),
        },
        Err(e) => return Err(e),
    };
    let pair = MixedPair {
        image: blend(&selection.mask, source.0, target.0)?,
        label: blend(&selection.mask, source.1, &target.1.labels)?,
        origin_mask: selection.mask,
    };
    Ok((pair, selection.classes))
}

/// Plain ClassMix of source onto target.
pub fn classmix_target(
    source: (&ImageTensor, &LabelMap),
    target: (&ImageTensor, &PseudoLabel),
    rng: &mut Rng,
) -> Result<MixedPair> {
    classmix_onto_target(source, target, rng).map(|(pair, _)| pair)
}

/// ClassMix followed by one extra resized thing-class object from the source.
///
/// The extra class avoids the ClassMix-selected classes when another thing class
/// is available. Without any thing class in the source this is plain ClassMix.
pub fn openremix_target(
    source: (&ImageTensor, &LabelMap),
    target: (&ImageTensor, &PseudoLabel),
    cfg: &MixConfig,
    rng: &mut Rng,
) -> Result<MixedPair> {
    let (mut pair, chosen) = classmix_onto_target(source, target, rng)?;
    let present = source.1.classes_present();
    let things: Vec<u8> = cfg
        .thing_class_ids
        .iter()
        .copied()
        .filter(|c| present.contains(c))
        .collect();
    if things.is_empty() {
        return Ok(pair);
    }
    let fresh: Vec<u8> = things.iter().copied().filter(|c| !chosen.contains(c)).collect();
    let pool = if fresh.is_empty() { &things } else { &fresh };
    let class_id = pool[rng.random_range(0..pool.len())];
    if let Some(patch) =
        resize_thing_patch(source.0, source.1, class_id, cfg.resize_scale, pair.image.dims(), rng)?
    {
        let footprint = paste_patch(&mut pair, &patch);
        pair.origin_mask = pair.origin_mask.union(&footprint)?;
    }
    Ok(pair)
}

/// Copies the target's private regions (and their pseudo-labels) onto the source.
pub fn attach_private(
    source: (&ImageTensor, &LabelMap),
    target: (&ImageTensor, &LabelMap),
    private: &BinaryMask,
) -> Result<MixedPair> {
    Ok(MixedPair {
        image: blend(private, target.0, source.0)?,
        label: blend(private, target.1, source.1)?,
        origin_mask: private.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let mut img = ImageTensor::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let v = (r * w + c) as f64 / (h * w) as f64;
                img.pixel_mut(r, c).copy_from_slice(&[v, 1.0 - v, (r as f64) / h as f64]);
            }
        }
        img
    }

    fn flat_image(h: usize, w: usize, v: f64) -> ImageTensor {
        ImageTensor::new(h, w, vec![v; h * w * 3]).unwrap()
    }

    #[test]
    fn blend_identities_and_checkerboard() {
        let fg = gradient_image(2, 2);
        let bg = flat_image(2, 2, 0.25);
        assert_eq!(blend(&BinaryMask::ones(2, 2), &fg, &bg).unwrap(), fg);
        assert_eq!(blend(&BinaryMask::zeros(2, 2), &fg, &bg).unwrap(), bg);

        let checker = BinaryMask::from_fn(2, 2, |r, c| (r + c) % 2 == 0);
        let out = blend(&checker, &fg, &bg).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let want = if (r + c) % 2 == 0 { fg.pixel(r, c) } else { bg.pixel(r, c) };
                assert_eq!(out.pixel(r, c), want);
            }
        }
        let lf = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let lb = LabelMap::new(2, 2, vec![2, 2, 2, 2]).unwrap();
        assert_eq!(blend(&checker, &lf, &lb).unwrap().data(), &[1, 2, 2, 1]);
    }

    #[test]
    fn blend_dimension_mismatch() {
        let err = blend(&BinaryMask::ones(2, 3), &flat_image(2, 2, 0.0), &flat_image(2, 2, 0.0));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn classmix_single_class_takes_everything() {
        let label = LabelMap::new(2, 2, vec![3, 3, 255, 3]).unwrap();
        let mask = classmix_mask(&label, &mut crate::rng_from_seed(0)).unwrap();
        assert_eq!(mask.data(), &[1, 1, 0, 1]);
    }

    #[test]
    fn classmix_two_classes_picks_exactly_one() {
        let label = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let outcomes = [vec![1u8, 1, 0, 0], vec![0u8, 0, 1, 1]];
        let mut seen = [false; 2];
        for seed in 0..32 {
            let mask = classmix_mask(&label, &mut crate::rng_from_seed(seed)).unwrap();
            let i = outcomes.iter().position(|o| o.as_slice() == mask.data()).unwrap();
            seen[i] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn classmix_four_classes_covers_two() {
        let label = LabelMap::new(2, 4, vec![0, 1, 2, 3, 3, 2, 1, 255]).unwrap();
        for seed in 0..16 {
            let sel = classmix_select(&label, &mut crate::rng_from_seed(seed)).unwrap();
            assert_eq!(sel.classes.len(), 2);
            for (&l, &m) in label.data().iter().zip(sel.mask.data()) {
                assert_eq!(m == 1, sel.classes.contains(&l));
            }
        }
    }

    #[test]
    fn classmix_empty_label_errors() {
        let label = LabelMap::filled(2, 2, 255);
        assert!(classmix_mask(&label, &mut crate::rng_from_seed(0)).is_err());
    }

    #[test]
    fn resize_halves_solid_object() {
        let mut label = LabelMap::filled(8, 8, 0);
        for r in 2..6 {
            for c in 3..7 {
                label.set(r, c, 2);
            }
        }
        let img = gradient_image(8, 8);
        let patch = resize_thing_patch(&img, &label, 2, 0.5, (8, 8), &mut crate::rng_from_seed(1))
            .unwrap()
            .unwrap();
        assert_eq!(patch.image.dims(), (2, 2));
        assert_eq!(patch.mask, BinaryMask::ones(2, 2));
        assert!(patch.origin.0 <= 6 && patch.origin.1 <= 6);

        // Each output pixel sits at the centre of a 2x2 input block.
        for r in 0..2 {
            for c in 0..2 {
                for ch in 0..3 {
                    let avg = (img.pixel(2 + 2 * r, 3 + 2 * c)[ch]
                        + img.pixel(2 + 2 * r, 4 + 2 * c)[ch]
                        + img.pixel(3 + 2 * r, 3 + 2 * c)[ch]
                        + img.pixel(3 + 2 * r, 4 + 2 * c)[ch])
                        / 4.0;
                    assert!((patch.image.pixel(r, c)[ch] - avg).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_identity_scale() {
        let mut label = LabelMap::filled(6, 6, 0);
        for (r, c) in [(1, 1), (1, 2), (2, 1), (3, 3)] {
            label.set(r, c, 1);
        }
        let img = gradient_image(6, 6);
        let patch = resize_thing_patch(&img, &label, 1, 1.0, (6, 6), &mut crate::rng_from_seed(0))
            .unwrap()
            .unwrap();
        assert_eq!(patch.image.dims(), (3, 3));
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(patch.image.pixel(r, c), img.pixel(1 + r, 1 + c));
                assert_eq!(patch.mask.get(r, c), label.get(1 + r, 1 + c) == 1);
            }
        }
    }

    #[test]
    fn resize_absent_class_and_no_fit() {
        let label = LabelMap::filled(4, 4, 0);
        let img = gradient_image(4, 4);
        let mut rng = crate::rng_from_seed(0);
        assert_eq!(
            resize_thing_patch(&img, &label, 1, 0.5, (4, 4), &mut rng),
            Err(Error::ClassAbsent { class_id: 1 })
        );
        assert_eq!(resize_thing_patch(&img, &label, 0, 2.0, (4, 4), &mut rng), Ok(None));
    }

    fn scene() -> (ImageTensor, LabelMap, ImageTensor, PseudoLabel) {
        let mut sl = LabelMap::filled(8, 8, 0);
        for r in 1..5 {
            for c in 1..5 {
                sl.set(r, c, 2);
            }
        }
        sl.set(7, 7, 1);
        let pseudo = PseudoLabel {
            labels: LabelMap::filled(8, 8, 4),
            confidence: 0.3,
        };
        (gradient_image(8, 8), sl, flat_image(8, 8, 0.9), pseudo)
    }

    #[test]
    fn openremix_without_things_is_classmix() {
        let (si, sl, ti, tp) = scene();
        let cfg = MixConfig::new(vec![3]);
        let a = openremix_target((&si, &sl), (&ti, &tp), &cfg, &mut crate::rng_from_seed(4)).unwrap();
        let b = classmix_target((&si, &sl), (&ti, &tp), &mut crate::rng_from_seed(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn openremix_degenerate_source_returns_target() {
        let (si, _, ti, tp) = scene();
        let sl = LabelMap::filled(8, 8, 255);
        let cfg = MixConfig::new(vec![2]);
        let pair = openremix_target((&si, &sl), (&ti, &tp), &cfg, &mut crate::rng_from_seed(0)).unwrap();
        assert_eq!(pair.image, ti);
        assert_eq!(pair.label, tp.labels);
        assert!(pair.origin_mask.is_empty());
    }

    #[test]
    fn openremix_is_blend_then_paste() {
        let (si, sl, ti, tp) = scene();
        let cfg = MixConfig::new(vec![2]);
        for seed in 0..8 {
            let pair =
                openremix_target((&si, &sl), (&ti, &tp), &cfg, &mut crate::rng_from_seed(seed)).unwrap();

            // Replay the same draws through the individual pieces.
            let mut rng = crate::rng_from_seed(seed);
            let sel = classmix_select(&sl, &mut rng).unwrap();
            let mut expected = MixedPair {
                image: blend(&sel.mask, &si, &ti).unwrap(),
                label: blend(&sel.mask, &sl, &tp.labels).unwrap(),
                origin_mask: sel.mask.clone(),
            };
            let _ = rng.random_range(0..1usize);
            let patch = resize_thing_patch(&si, &sl, 2, 0.5, (8, 8), &mut rng).unwrap().unwrap();
            let footprint = paste_patch(&mut expected, &patch);
            expected.origin_mask = expected.origin_mask.union(&footprint).unwrap();
            assert_eq!(pair, expected);
            assert_eq!(footprint.count_ones(), 4);
        }
    }

    #[test]
    fn openremix_is_reproducible() {
        let (si, sl, ti, tp) = scene();
        let cfg = MixConfig::new(vec![1, 2]);
        let a = openremix_target((&si, &sl), (&ti, &tp), &cfg, &mut crate::rng_from_seed(8)).unwrap();
        let b = openremix_target((&si, &sl), (&ti, &tp), &cfg, &mut crate::rng_from_seed(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attach_private_identities() {
        let (si, sl, ti, tp) = scene();
        let none = attach_private((&si, &sl), (&ti, &tp.labels), &BinaryMask::zeros(8, 8)).unwrap();
        assert_eq!((none.image, none.label), (si.clone(), sl.clone()));
        let all = attach_private((&si, &sl), (&ti, &tp.labels), &BinaryMask::ones(8, 8)).unwrap();
        assert_eq!((all.image, all.label), (ti, tp.labels));
    }

    #[test]
    fn attach_private_uses_unknown_indicator() {
        let (si, sl, ti, _) = scene();
        let cs = ClassSpace::new(4).unwrap();
        let pseudo = LabelMap::new(8, 8, (0..64).map(|i| if i % 3 == 0 { 4 } else { 1 }).collect()).unwrap();
        let mu = crate::pseudolabel::private_mask(&pseudo, &cs);
        let pair = attach_private((&si, &sl), (&ti, &pseudo), &mu).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                if mu.get(r, c) {
                    assert_eq!(pair.label.get(r, c), 4);
                    assert_eq!(pair.image.pixel(r, c), ti.pixel(r, c));
                } else {
                    assert_eq!(pair.label.get(r, c), sl.get(r, c));
                    assert_eq!(pair.image.pixel(r, c), si.pixel(r, c));
                }
            }
        }
        assert_eq!(pair.origin_mask, mu);
        let w = pair.pixel_weights(0.25, 1.0);
        assert_eq!(w[0], 0.25);
        assert_eq!(w[1], 1.0);
    }

    #[test]
    fn mix_config_validation() {
        let cs = ClassSpace::new(4).unwrap();
        assert!(MixConfig::new(vec![2, 3]).validate(&cs).is_ok());
        assert!(MixConfig::new(vec![4]).validate(&cs).is_err());
        let mut bad = MixConfig::new(vec![]);
        bad.resize_scale = 0.0;
        assert!(bad.validate(&cs).is_err());
    }
}
