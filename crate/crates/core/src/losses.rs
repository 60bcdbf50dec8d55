//! Pixel-weighted cross-entropy and the dilation-erosion contrastive loss,
//! each returning its gradient with respect to the map it consumes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::morphology::{DeconMasks, MorphConfig};
use crate::tensor::{check_dims, softmax_row, FeatureMap, LabelMap, LogitMap, PixelMap, IGNORE_ID};

/// Added to squared norms before the square root, keeping normalization smooth at 0.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeconConfig {
    pub temperature: f64,
    pub morph: MorphConfig,
    /// Weight of the contrastive term in the total loss.
    pub weight: f64,
}

impl Default for DeconConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            morph: MorphConfig::default(),
            weight: 1.0,
        }
    }
}

impl DeconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(invalid("decon weight", "must be nonnegative"));
        }
        self.morph.validate()
    }
}

/// A scalar loss and its gradient with respect to the differentiated map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: PixelMap,
    /// Set when the loss had nothing to act on and contributes zero.
    pub skipped: bool,
}

impl LossValue {
    pub fn zero_like(map: &PixelMap) -> Self {
        Self {
            value: 0.0,
            grad: PixelMap::zeros(map.height(), map.width(), map.channels()),
            skipped: true,
        }
    }
}

/// Mean over labeled pixels of `weight_j * -log softmax(logits_j)[label_j]`.
///
/// Ignore pixels add neither loss nor gradient and are not counted in the mean.
pub fn weighted_cross_entropy(
    logits: &LogitMap,
    labels: &LabelMap,
    pixel_weights: &[f64],
) -> Result<LossValue> {
    check_dims("cross-entropy labels", logits.dims(), labels.dims())?;
    if pixel_weights.len() != logits.num_pixels() {
        return Err(Error::LengthMismatch {
            what: "pixel weights",
            expected: logits.num_pixels(),
            found: pixel_weights.len(),
        });
    }
    if pixel_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(invalid("pixel weights", "must be nonnegative"));
    }
    let k = logits.channels();
    if let Some(&label) = labels
        .data()
        .iter()
        .find(|&&l| l != IGNORE_ID && l as usize >= k)
    {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    let count = labels.data().iter().filter(|&&l| l != IGNORE_ID).count();
    let mut grad = PixelMap::zeros(logits.height(), logits.width(), k);
    if count == 0 {
        return Ok(LossValue {
            value: 0.0,
            grad,
            skipped: true,
        });
    }

    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for (j, (&label, &weight)) in labels.data().iter().zip(pixel_weights).enumerate() {
        if label == IGNORE_ID {
            continue;
        }
        let row = logits.pixel(j);
        let g = grad.pixel_mut(j);
        softmax_row(row, g);
        // -log p via log-sum-exp stays finite when p underflows.
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
        total += weight * (lse - row[label as usize]);
        g[label as usize] -= 1.0;
        for v in g.iter_mut() {
            *v *= weight * scale;
        }
    }
    Ok(LossValue {
        value: total * scale,
        grad,
        skipped: false,
    })
}

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Backpropagates `g` (gradient w.r.t. `v / norm`) to `v`.
fn normalize_backward(v: &[f64], norm: f64, g: &[f64], out: &mut [f64]) {
    let dot: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
    let n3 = norm * norm * norm;
    for ((o, &vi), &gi) in out.iter_mut().zip(v).zip(g) {
        *o += gi / norm - vi * dot / n3;
    }
}

fn log_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| libm::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    (max + libm::log(sum), exps.into_iter().map(|e| e / sum).collect())
}

/// Contrastive loss between the eroded private core and the dilation band.
///
/// Every selected feature vector is L2-normalized; the anchor is the
/// renormalized mean of the normalized positives. With similarities `s = anchor · v`,
/// the loss is `-log(Σ_pos exp(s/τ) / Σ_neg exp(s/τ))`. `masks` are in crop
/// coordinates and `origin` places the crop inside `features`. An empty positive
/// or negative set gives a skipped zero loss.
pub fn decon_loss(
    features: &FeatureMap,
    masks: &DeconMasks,
    origin: (usize, usize),
    temperature: f64,
) -> Result<LossValue> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid("temperature", "must be positive"));
    }
    check_dims("decon masks", masks.positive.dims(), masks.negative.dims())?;
    let (ch, cw) = masks.positive.dims();
    if origin.0 + ch > features.height() || origin.1 + cw > features.width() {
        return Err(invalid("decon crop", "extends past the feature map"));
    }
    let pixels_of = |mask: &crate::tensor::BinaryMask| -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..ch {
            for c in 0..cw {
                if mask.get(r, c) {
                    out.push((origin.0 + r) * features.width() + origin.1 + c);
                }
            }
        }
        out
    };
    let pos = pixels_of(&masks.positive);
    let neg = pixels_of(&masks.negative);
    if pos.is_empty() || neg.is_empty() {
        return Ok(LossValue::zero_like(features));
    }

    let dim = features.channels();
    let unit = |idx: &[usize]| -> Vec<(Vec<f64>, f64)> {
        idx.iter().map(|&j| normalize(features.pixel(j))).collect()
    };
    let pos_u = unit(&pos);
    let neg_u = unit(&neg);

    let mut mean = vec![0.0; dim];
    for (u, _) in &pos_u {
        for (m, x) in mean.iter_mut().zip(u) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= pos.len() as f64;
    }
    let (anchor, anchor_norm) = normalize(&mean);

    let sims = |set: &[(Vec<f64>, f64)]| -> Vec<f64> {
        set.iter()
            .map(|(u, _)| anchor.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / temperature)
            .collect()
    };
    let (lse_pos, w_pos) = log_sum_exp(&sims(&pos_u));
    let (lse_neg, w_neg) = log_sum_exp(&sims(&neg_u));
    let value = lse_neg - lse_pos;

    // d/ds_p = -w_p / τ, d/ds_n = w_n / τ.
    let coef_pos: Vec<f64> = w_pos.iter().map(|w| -w / temperature).collect();
    let coef_neg: Vec<f64> = w_neg.iter().map(|w| w / temperature).collect();

    let mut grad_anchor = vec![0.0; dim];
    for ((u, _), c) in pos_u.iter().zip(&coef_pos).chain(neg_u.iter().zip(&coef_neg)) {
        for (g, x) in grad_anchor.iter_mut().zip(u) {
            *g += c * x;
        }
    }
    let mut grad_mean = vec![0.0; dim];
    normalize_backward(&mean, anchor_norm, &grad_anchor, &mut grad_mean);

    let mut grad = PixelMap::zeros(features.height(), features.width(), dim);
    let inv_p = 1.0 / pos.len() as f64;
    let mut g_unit = vec![0.0; dim];
    for (k, &j) in pos.iter().enumerate() {
        for ((g, a), m) in g_unit.iter_mut().zip(&anchor).zip(&grad_mean) {
            *g = coef_pos[k] * a + m * inv_p;
        }
        normalize_backward(features.pixel(j), pos_u[k].1, &g_unit, grad.pixel_mut(j));
    }
    for (k, &j) in neg.iter().enumerate() {
        for (g, a) in g_unit.iter_mut().zip(&anchor) {
            *g = coef_neg[k] * a;
        }
        normalize_backward(features.pixel(j), neg_u[k].1, &g_unit, grad.pixel_mut(j));
    }

    Ok(LossValue {
        value,
        grad,
        skipped: false,
    })
}

/// The three training losses combined, with their gradients scaled to match.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub source_grad: PixelMap,
    pub target_grad: PixelMap,
    pub decon_grad: Option<PixelMap>,
}

/// `source + target + decon_weight * decon`.
pub fn total_loss(
    source: LossValue,
    target: LossValue,
    decon: Option<LossValue>,
    decon_weight: f64,
) -> Result<TotalLoss> {
    let decon_value = decon.as_ref().map_or(0.0, |d| d.value);
    let value = source.value + target.value + decon_weight * decon_value;
    if !value.is_finite() {
        return Err(Error::NonFinite { what: "total loss" });
    }
    let decon_grad = decon.map(|d| {
        let mut g = d.grad;
        for v in g.data_mut() {
            *v *= decon_weight;
        }
        g
    });
    Ok(TotalLoss {
        value,
        source_grad: source.grad,
        target_grad: target.grad,
        decon_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::BinaryMask;
    use rand::Rng as _;

    fn random_map(rng: &mut crate::Rng, h: usize, w: usize, c: usize, scale: f64) -> PixelMap {
        let data = (0..h * w * c).map(|_| rng.random_range(-scale..scale)).collect();
        PixelMap::new(h, w, c, data).unwrap()
    }

    /// Cross-entropy evaluated the long way: explicit softmax, explicit log.
    fn ce_oracle(logits: &PixelMap, labels: &LabelMap, weights: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for j in 0..logits.num_pixels() {
            let l = labels.data()[j];
            if l == IGNORE_ID {
                continue;
            }
            count += 1;
            let row = logits.pixel(j);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += weights[j] * -(row[l as usize].exp() / z).ln();
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    #[test]
    fn ce_examples() {
        let logits = PixelMap::new(1, 1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        let labels = LabelMap::new(1, 1, vec![1]).unwrap();
        let loss = weighted_cross_entropy(&logits, &labels, &[1.0]).unwrap();
        assert_eq!(loss.value, 0.0);

        let logits = PixelMap::zeros(2, 2, 5);
        let labels = LabelMap::new(2, 2, vec![0, 1, 4, 2]).unwrap();
        let loss = weighted_cross_entropy(&logits, &labels, &[1.0; 4]).unwrap();
        assert!((loss.value - 5f64.ln()).abs() < 1e-12);
        assert!((loss.value - 1.6094).abs() < 1e-4);

        let zero = weighted_cross_entropy(&logits, &labels, &[0.0; 4]).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(zero.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ce_ignores_and_rejects() {
        let logits = PixelMap::new(1, 2, 2, vec![3.0, -1.0, 0.5, 0.2]).unwrap();
        let labels = LabelMap::new(1, 2, vec![255, 1]).unwrap();
        let loss = weighted_cross_entropy(&logits, &labels, &[1.0, 1.0]).unwrap();
        assert!(loss.grad.pixel(0).iter().all(|&g| g == 0.0));
        assert!((loss.value - ce_oracle(&logits, &labels, &[1.0, 1.0])).abs() < 1e-12);

        let all_ignored = LabelMap::new(1, 2, vec![255, 255]).unwrap();
        let loss = weighted_cross_entropy(&logits, &all_ignored, &[1.0, 1.0]).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.skipped);

        let bad = LabelMap::new(1, 2, vec![2, 0]).unwrap();
        assert_eq!(
            weighted_cross_entropy(&logits, &bad, &[1.0, 1.0]),
            Err(Error::LabelOutOfRange {
                label: 2,
                num_classes: 2
            })
        );
        assert!(weighted_cross_entropy(&logits, &labels, &[1.0]).is_err());
        assert!(weighted_cross_entropy(&logits, &labels, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = crate::rng_from_seed(21);
        for _ in 0..5 {
            let logits = random_map(&mut rng, 6, 6, 5, 3.0);
            let labels = LabelMap::new(
                6,
                6,
                (0..36)
                    .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..5u8) })
                    .collect(),
            )
            .unwrap();
            let weights: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
            let loss = weighted_cross_entropy(&logits, &labels, &weights).unwrap();
            assert!((loss.value - ce_oracle(&logits, &labels, &weights)).abs() < 1e-12);
            let h = 1e-6;
            let mut num = Vec::new();
            for i in 0..logits.data().len() {
                let mut plus = logits.clone();
                plus.data_mut()[i] += h;
                let mut minus = logits.clone();
                minus.data_mut()[i] -= h;
                num.push((ce_oracle(&plus, &labels, &weights) - ce_oracle(&minus, &labels, &weights)) / (2.0 * h));
            }
            assert!(relative_error(loss.grad.data(), &num) <= 1e-5);
        }
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    fn masks(positive: &[(usize, usize)], negative: &[(usize, usize)], size: usize) -> DeconMasks {
        DeconMasks {
            positive: BinaryMask::from_fn(size, size, |r, c| positive.contains(&(r, c))),
            negative: BinaryMask::from_fn(size, size, |r, c| negative.contains(&(r, c))),
        }
    }

    #[test]
    fn decon_single_pair() {
        let f = PixelMap::new(1, 2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let m = DeconMasks {
            positive: BinaryMask::new(1, 2, vec![1, 0]).unwrap(),
            negative: BinaryMask::new(1, 2, vec![0, 1]).unwrap(),
        };
        let loss = decon_loss(&f, &m, (0, 0), 0.5).unwrap();
        // Anchor equals the lone positive, so s_p = 1 and s_n = 0.6.
        assert!((loss.value - (-(1.0 - 0.6) / 0.5)).abs() < 1e-9);

        let same = PixelMap::new(1, 2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        assert!(decon_loss(&same, &m, (0, 0), 0.1).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn decon_skips_empty_sets() {
        let f = PixelMap::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let loss = decon_loss(&f, &masks(&[], &[(0, 0)], 2), (0, 0), 0.1).unwrap();
        assert!(loss.skipped);
        assert_eq!(loss.value, 0.0);
        assert!(loss.grad.data().iter().all(|&g| g == 0.0));
        assert!(decon_loss(&f, &masks(&[(1, 1)], &[], 2), (0, 0), 0.1).unwrap().skipped);
    }

    #[test]
    fn decon_rejects_bad_temperature_and_crop() {
        let f = PixelMap::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let m = masks(&[(0, 0)], &[(1, 1)], 2);
        assert!(decon_loss(&f, &m, (0, 0), 0.0).is_err());
        assert!(decon_loss(&f, &m, (0, 0), -1.0).is_err());
        assert!(decon_loss(&f, &m, (1, 0), 0.1).is_err());
    }

    #[test]
    fn decon_is_scale_invariant_per_pixel() {
        let mut rng = crate::rng_from_seed(13);
        let f = random_map(&mut rng, 4, 4, 3, 1.0);
        let m = masks(&[(0, 0), (1, 1), (2, 0)], &[(3, 3), (0, 3)], 4);
        let base = decon_loss(&f, &m, (0, 0), 0.1).unwrap().value;
        for j in [0, 5, 15] {
            let mut scaled = f.clone();
            for v in scaled.pixel_mut(j) {
                *v *= 7.5;
            }
            assert!((decon_loss(&scaled, &m, (0, 0), 0.1).unwrap().value - base).abs() < 1e-9);
        }
    }

    #[test]
    fn total_loss_combines_linearly() {
        let g = |v: f64| PixelMap::new(1, 1, 2, vec![v, -v]).unwrap();
        let lv = |value: f64, grad: f64| LossValue {
            value,
            grad: g(grad),
            skipped: false,
        };
        let t = total_loss(lv(0.7, 1.0), lv(0.2, 2.0), Some(lv(1.5, 3.0)), 0.4).unwrap();
        assert!((t.value - (0.7 + 0.2 + 0.4 * 1.5)).abs() < 1e-15);
        assert_eq!(t.decon_grad.unwrap().data(), &[0.4 * 3.0, -0.4 * 3.0]);

        let t = total_loss(lv(0.7, 1.0), lv(0.2, 2.0), Some(lv(1.5, 3.0)), 0.0).unwrap();
        assert_eq!(t.value, 0.7 + 0.2);
        let t = total_loss(lv(0.0, 0.0), lv(0.0, 0.0), None, 1.0).unwrap();
        assert_eq!(t.value, 0.0);
    }
}
