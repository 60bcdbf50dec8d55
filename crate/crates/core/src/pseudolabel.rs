//! Teacher pseudo-labels with an unknown class, the image-level confidence
//! weight, the private-region mask, and the EMA teacher update.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{argmax_row, argmax_with_prob, BinaryMask, ClassSpace, LabelMap, ProbMap};

/// Default threshold below which a pixel becomes unknown.
pub const DEFAULT_TAU_P: f64 = 0.5;
/// Default confidence threshold for the image-level weight.
pub const DEFAULT_TAU_T: f64 = 0.968;

/// Pseudo-labels for one target image and the weight its target pixels get.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelMap,
    pub confidence: f64,
}

fn check_threshold(name: &'static str, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid(name, "must lie strictly between 0 and 1"));
    }
    Ok(())
}

/// Labels each pixel with its most probable known class, or with the unknown
/// class when that probability is below `tau_p`.
///
/// `known_probs` must be a distribution over the known classes only; the
/// unknown id is `known_probs.num_classes()`.
pub fn generate_pseudo_label(known_probs: &ProbMap, tau_p: f64) -> Result<LabelMap> {
    check_threshold("tau_p", tau_p)?;
    let unknown = known_probs.num_classes() as u8;
    let (mut labels, maxes) = argmax_with_prob(known_probs);
    for (label, max) in labels.data_mut().iter_mut().zip(maxes) {
        if max < tau_p {
            *label = unknown;
        }
    }
    Ok(labels)
}

/// Same rule as [`generate_pseudo_label`] applied to a distribution over the
/// known classes plus the unknown class, where only the known columns compete
/// for the maximum. Mass on the unknown column therefore pushes pixels below
/// `tau_p`.
pub fn pseudo_label_from_heads(probs: &ProbMap, num_known: usize, tau_p: f64) -> Result<LabelMap> {
    check_threshold("tau_p", tau_p)?;
    if probs.num_classes() != num_known + 1 {
        return Err(invalid("probs", "expected one column per known class plus unknown"));
    }
    let data = probs
        .rows()
        .map(|row| match argmax_row(&row[..num_known]) {
            (_, max) if max < tau_p => num_known as u8,
            (i, _) => i as u8,
        })
        .collect();
    let (h, w) = probs.dims();
    LabelMap::new(h, w, data)
}

/// Fraction of pixels whose maximum probability reaches `tau_t`.
pub fn confidence_ratio(probs: &ProbMap, tau_t: f64) -> Result<f64> {
    check_threshold("tau_t", tau_t)?;
    let n = probs.num_pixels();
    if n == 0 {
        return Err(Error::EmptyInput {
            what: "probability map",
        });
    }
    let confident = probs.max_probs().into_iter().filter(|&m| m >= tau_t).count();
    Ok(confident as f64 / n as f64)
}

/// Indicator of pixels labeled unknown.
pub fn private_mask(labels: &LabelMap, cs: &ClassSpace) -> BinaryMask {
    labels.mask_of(cs.unknown_id())
}

/// Post-processing applied to pseudo-labels before they are used.
///
/// External mask-based refiners plug in here; the crate ships only the identity.
pub trait LabelRefiner {
    fn refine(&self, labels: LabelMap) -> LabelMap;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl LabelRefiner for IdentityRefiner {
    fn refine(&self, labels: LabelMap) -> LabelMap {
        labels
    }
}

/// Flattened network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(alloc::vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, alpha: f64) -> Result<ParamVector> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, alpha)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut ParamVector, student: &ParamVector, alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            what: "ema parameters",
            expected: teacher.len(),
            found: student.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("alpha", "must lie in [0, 1]"));
    }
    for (t, &s) in teacher.0.iter_mut().zip(&student.0) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax, PixelMap};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn probs(rows: &[&[f64]]) -> ProbMap {
        ProbMap::new(PixelMap::new(1, rows.len(), rows[0].len(), rows.concat()).unwrap()).unwrap()
    }

    fn random_probs(rng: &mut crate::Rng, h: usize, w: usize, k: usize, scale: f64) -> ProbMap {
        let data = (0..h * w * k).map(|_| rng.random_range(-scale..scale)).collect();
        softmax(&PixelMap::new(h, w, k, data).unwrap()).unwrap()
    }

    #[test]
    fn pseudo_label_branches() {
        let p = probs(&[&[0.6, 0.3, 0.1], &[0.4, 0.35, 0.25]]);
        let labels = generate_pseudo_label(&p, DEFAULT_TAU_P).unwrap();
        assert_eq!(labels.data(), &[0, 3]);
        assert_eq!(DEFAULT_TAU_P, 0.5);
    }

    #[test]
    fn pseudo_label_threshold_is_inclusive() {
        let p = probs(&[&[0.5, 0.25, 0.25]]);
        assert_eq!(generate_pseudo_label(&p, 0.5).unwrap().data(), &[0]);
    }

    #[test]
    fn pseudo_label_rejects_bad_tau() {
        let p = probs(&[&[1.0]]);
        for tau in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(generate_pseudo_label(&p, tau).is_err());
        }
    }

    #[test]
    fn confidence_examples() {
        let p = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(confidence_ratio(&p, 0.9).unwrap(), 1.0);
        let p = probs(&[&[0.95, 0.05], &[0.5, 0.5], &[0.02, 0.98], &[0.6, 0.4]]);
        assert_eq!(confidence_ratio(&p, 0.9).unwrap(), 0.5);
    }

    #[test]
    fn confidence_matches_direct_count() {
        let mut rng = crate::rng_from_seed(4);
        let p = random_probs(&mut rng, 8, 8, 4, 4.0);
        let mut count = 0;
        for row in p.rows() {
            if row.iter().any(|&v| v >= 0.7) {
                count += 1;
            }
        }
        assert_eq!(confidence_ratio(&p, 0.7).unwrap(), count as f64 / 64.0);
    }

    #[test]
    fn private_mask_examples() {
        let cs = ClassSpace::new(3).unwrap();
        assert_eq!(private_mask(&LabelMap::filled(2, 2, 3), &cs), BinaryMask::ones(2, 2));
        assert_eq!(private_mask(&LabelMap::filled(2, 2, 1), &cs), BinaryMask::zeros(2, 2));
        let labels = LabelMap::new(4, 4, vec![0, 3, 1, 3, 3, 3, 2, 0, 1, 1, 3, 2, 0, 3, 0, 0]).unwrap();
        let m = private_mask(&labels, &cs);
        for (l, b) in labels.data().iter().zip(m.data()) {
            assert_eq!(*l == 3, *b == 1);
        }
    }

    #[test]
    fn identity_refiner_passes_through() {
        let labels = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(IdentityRefiner.refine(labels.clone()), labels);
    }

    #[test]
    fn ema_examples() {
        let t = ParamVector(vec![0.0, 2.0]);
        let s = ParamVector(vec![1.0, -1.0]);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        let r = ema_update(&ParamVector(vec![0.0]), &ParamVector(vec![1.0]), 0.999).unwrap();
        assert!((r.0[0] - 0.001).abs() < 1e-15);
        assert!(ema_update(&t, &ParamVector(vec![1.0]), 0.5).is_err());
        assert!(ema_update(&t, &s, 1.5).is_err());
    }

    #[test]
    fn ema_contracts_toward_constant_student() {
        let s = ParamVector(vec![1.0, -3.0, 0.5]);
        let mut t = ParamVector(vec![5.0, 2.0, -1.0]);
        let alpha = 0.9;
        let mut gap = t.max_abs_diff(&s);
        for _ in 0..20 {
            ema_update_in_place(&mut t, &s, alpha).unwrap();
            let next = t.max_abs_diff(&s);
            assert!((next - alpha * gap).abs() < 1e-12);
            gap = next;
        }
    }

    proptest! {
        #[test]
        fn unknown_iff_below_threshold(seed in 0u64..1000, tau in 0.05f64..0.95) {
            let mut rng = crate::rng_from_seed(seed);
            let p = random_probs(&mut rng, 6, 6, 4, 3.0);
            let labels = generate_pseudo_label(&p, tau).unwrap();
            for (l, m) in labels.data().iter().zip(p.max_probs()) {
                prop_assert_eq!(*l == 4, m < tau);
            }
        }

        #[test]
        fn confidence_monotone_in_tau(seed in 0u64..1000, a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let mut rng = crate::rng_from_seed(seed);
            let p = random_probs(&mut rng, 5, 5, 3, 4.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(confidence_ratio(&p, lo).unwrap() >= confidence_ratio(&p, hi).unwrap());
        }

        #[test]
        fn ema_matches_scalar_formula(
            t in prop::collection::vec(-10.0f64..10.0, 8),
            s in prop::collection::vec(-10.0f64..10.0, 8),
            alpha in 0.0f64..=1.0,
        ) {
            let r = ema_update(&ParamVector(t.clone()), &ParamVector(s.clone()), alpha).unwrap();
            for i in 0..8 {
                prop_assert_eq!(r.0[i], alpha * t[i] + (1.0 - alpha) * s[i]);
            }
        }
    }
}
