//! Per-class IoU, common mIoU over known classes, private (unknown) IoU and
//! the H-Score, pooled over a whole split.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{check_dims, ClassSpace, LabelMap, IGNORE_ID};

/// Pooled intersection and union pixel counts for classes `0..=C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(cs: &ClassSpace) -> Self {
        Self {
            intersection: vec![0; cs.num_heads()],
            union: vec![0; cs.num_heads()],
        }
    }

    /// Adds one image. Pixels whose ground truth is ignore are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_dims("prediction", gt.dims(), pred.dims())?;
        let k = self.intersection.len();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_ID {
                continue;
            }
            for l in [p, g] {
                if l as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        num_classes: k,
                    });
                }
            }
            if p == g {
                self.intersection[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    /// IoU per class; `None` when the class appears in neither map.
    pub fn iou(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }
}

/// Per-class intersection/union and IoU for a single image pair.
pub fn per_class_iou(pred: &LabelMap, gt: &LabelMap, cs: &ClassSpace) -> Result<IouCounts> {
    let mut counts = IouCounts::new(cs);
    counts.accumulate(pred, gt)?;
    Ok(counts)
}

/// Harmonic mean of common and private scores; 0 when both are 0.
///
/// Scale-agnostic: works on fractions or percentages alike.
pub fn h_score(common: f64, private: f64) -> f64 {
    let sum = common + private;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * common * private / sum
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// IoU of each known class; `None` when absent from both prediction and truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over the known classes that are defined.
    pub common_miou: f64,
    /// IoU of the unknown class (0 when undefined).
    pub private_iou: f64,
    pub h_score: f64,
    pub counts: IouCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: IouCounts, cs: &ClassSpace) -> Self {
        let iou = counts.iou();
        let known = &iou[..cs.num_known()];
        let defined: Vec<f64> = known.iter().flatten().copied().collect();
        let common_miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let private_iou = iou[cs.unknown_id() as usize].unwrap_or(0.0);
        Self {
            per_class_iou: known.to_vec(),
            common_miou,
            private_iou,
            h_score: h_score(common_miou, private_iou),
            counts,
        }
    }
}

/// Pooled metrics over a split of stored predictions.
pub fn evaluate(preds: &[LabelMap], gts: &[LabelMap], cs: &ClassSpace) -> Result<MetricsReport> {
    if gts.is_empty() {
        return Err(Error::EmptyInput {
            what: "evaluation split",
        });
    }
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: gts.len(),
            found: preds.len(),
        });
    }
    let mut counts = IouCounts::new(cs);
    for (p, g) in preds.iter().zip(gts) {
        counts.accumulate(p, g)?;
    }
    Ok(MetricsReport::from_counts(counts, cs))
}
