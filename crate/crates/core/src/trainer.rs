//! Student/teacher self-training with an unknown head, the contrastive
//! boundary loss and open-set mixing, plus inference and evaluation.
//!
//! One step, per (source, target) pair in the batch:
//!
//! 1. the teacher labels the clean target image: known-class argmax, unknown
//!    below `tau_p`, and an image weight `q_t` from `tau_t`;
//! 2. mixing builds the training pair: ClassMix (or ClassMix plus a resized
//!    thing class) onto the target, and, with remix, target private regions
//!    attached onto the source;
//! 3. cross-entropy on both mixed images, plus the contrastive loss on a crop of
//!    the target private mask when enabled;
//! 4. gradients are averaged over the batch, SGD updates the student and the
//!    teacher follows by EMA.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::dataset::{Benchmark, Sample};
use crate::error::{invalid, Result};
use crate::losses::{decon_loss, total_loss, weighted_cross_entropy, DeconConfig};
use crate::metrics::{IouCounts, MetricsReport};
use crate::mixing::{attach_private, classmix_target, openremix_target, MixConfig};
use crate::model::{sgd_step_in_place, SegNet, SgdState, DEFAULT_FEATURES};
use crate::morphology::{decon_masks, random_private_crop, DeconMasks};
use crate::pseudolabel::{
    confidence_ratio, ema_update_in_place, pseudo_label_from_heads, private_mask, IdentityRefiner,
    LabelRefiner, ParamVector, PseudoLabel, DEFAULT_TAU_P, DEFAULT_TAU_T,
};
use crate::tensor::{argmax_row, argmax_with_prob, softmax, ClassSpace, ImageTensor, LabelMap};
use crate::Rng;

/// Training recipe, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// C heads; unknown assigned at inference by thresholding confidence.
    ConfThreshold,
    /// C+1 heads trained on pseudo-labels with unknown.
    HeadExpansion,
    HeadExpansionDecon,
    HeadExpansionRemix,
    /// Unknown head, contrastive boundary loss and open-set mixing together.
    BusFull,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::ConfThreshold,
        Mode::HeadExpansion,
        Mode::HeadExpansionDecon,
        Mode::HeadExpansionRemix,
        Mode::BusFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ConfThreshold => "conf_threshold",
            Mode::HeadExpansion => "head_expansion",
            Mode::HeadExpansionDecon => "head_expansion_decon",
            Mode::HeadExpansionRemix => "head_expansion_remix",
            Mode::BusFull => "bus_full",
        }
    }

    /// Row label in the ablation table.
    pub fn row_label(self) -> &'static str {
        match self {
            Mode::ConfThreshold => "A",
            Mode::HeadExpansion => "B",
            Mode::HeadExpansionDecon => "C",
            Mode::HeadExpansionRemix => "D",
            Mode::BusFull => "Ours",
        }
    }

    pub fn from_name(name: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn has_unknown_head(self) -> bool {
        self != Mode::ConfThreshold
    }

    pub fn uses_decon(self) -> bool {
        matches!(self, Mode::HeadExpansionDecon | Mode::BusFull)
    }

    pub fn uses_remix(self) -> bool {
        matches!(self, Mode::HeadExpansionRemix | Mode::BusFull)
    }

    /// Output heads of the network for this mode.
    pub fn num_outputs(self, cs: &ClassSpace) -> usize {
        if self.has_unknown_head() {
            cs.num_heads()
        } else {
            cs.num_known()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub tau_p: f64,
    pub tau_t: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Width of the feature layers.
    pub features: usize,
    /// Unknown heads; only 1 is supported.
    pub unknown_heads: usize,
    /// Inference threshold for [`Mode::ConfThreshold`].
    pub tau_inf: f64,
    pub resize_scale: f64,
    /// Global gradient-norm ceiling before the SGD step; 0 disables it.
    pub grad_clip: f64,
    /// L2 penalty coefficient added to the gradient (`wd * params`).
    pub weight_decay: f64,
    pub decon: DeconConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BusFull,
            tau_p: DEFAULT_TAU_P,
            tau_t: DEFAULT_TAU_T,
            alpha: 0.99,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            features: DEFAULT_FEATURES,
            unknown_heads: 1,
            tau_inf: 0.5,
            resize_scale: crate::mixing::DEFAULT_RESIZE_SCALE,
            grad_clip: 5.0,
            weight_decay: 0.0,
            decon: DeconConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_p", self.tau_p), ("tau_t", self.tau_t), ("tau_inf", self.tau_inf)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(name, "must lie strictly between 0 and 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.features == 0 {
            return Err(invalid("features", "must be at least 1"));
        }
        if self.unknown_heads != 1 {
            return Err(invalid("unknown_heads", "only a single unknown head is supported"));
        }
        if !(self.resize_scale > 0.0 && self.resize_scale.is_finite()) {
            return Err(invalid("resize_scale", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be nonnegative"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(invalid("grad_clip", "must be nonnegative"));
        }
        self.decon.validate()
    }
}

/// Everything one (source, target) pair contributes to a step, with all
/// randomness already drawn. Evaluating it is a pure function of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemPlan {
    pub source_image: ImageTensor,
    pub source_label: LabelMap,
    pub source_weights: Vec<f64>,
    pub target_image: ImageTensor,
    pub target_label: LabelMap,
    pub target_weights: Vec<f64>,
    pub pseudo: PseudoLabel,
    pub decon: Option<DeconPlan>,
}

/// Contrastive term inputs: the clean target and the crop masks.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconPlan {
    pub image: ImageTensor,
    /// `None` when no crop with private pixels was found.
    pub crop: Option<(DeconMasks, (usize, usize))>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemLosses {
    pub total: f64,
    pub source_ce: f64,
    pub target_ce: f64,
    pub decon: f64,
    pub decon_skipped: bool,
}

/// Loss of `plan` under `net` and the gradient w.r.t. every parameter.
pub fn plan_loss(net: &SegNet, plan: &ItemPlan, decon: &DeconConfig) -> Result<(ItemLosses, ParamVector)> {
    let src = net.forward(&plan.source_image);
    let tgt = net.forward(&plan.target_image);
    let src_ce = weighted_cross_entropy(&src.logits, &plan.source_label, &plan.source_weights)?;
    let tgt_ce = weighted_cross_entropy(&tgt.logits, &plan.target_label, &plan.target_weights)?;

    let mut decon_fwd = None;
    let mut decon_skipped = false;
    let decon_value = match &plan.decon {
        Some(DeconPlan { image, crop }) => {
            let fwd = net.forward(image);
            let loss = match crop {
                Some((masks, origin)) => decon_loss(&fwd.features, masks, *origin, decon.temperature)?,
                None => crate::losses::LossValue::zero_like(&fwd.features),
            };
            decon_skipped = loss.skipped;
            decon_fwd = Some(fwd);
            Some(loss)
        }
        None => None,
    };
    let losses = ItemLosses {
        source_ce: src_ce.value,
        target_ce: tgt_ce.value,
        decon: decon_value.as_ref().map_or(0.0, |d| d.value),
        decon_skipped,
        total: 0.0,
    };
    let total = total_loss(src_ce, tgt_ce, decon_value, decon.weight)?;

    let mut grads = ParamVector::zeros(net.layout().len());
    net.backward(&src, Some(&total.source_grad), None, &mut grads)?;
    net.backward(&tgt, Some(&total.target_grad), None, &mut grads)?;
    if let (Some(fwd), Some(g)) = (&decon_fwd, &total.decon_grad) {
        if !losses.decon_skipped {
            net.backward(fwd, None, Some(g), &mut grads)?;
        }
    }
    Ok((
        ItemLosses {
            total: total.value,
            ..losses
        },
        grads,
    ))
}

/// Averaged losses of one optimization step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub source_ce: f64,
    pub target_ce: f64,
    pub decon: f64,
    pub mean_confidence: f64,
    /// Fraction of batch items whose contrastive term was skipped.
    pub decon_skip_rate: f64,
    /// Fraction of target pixels pseudo-labeled unknown.
    pub unknown_rate: f64,
    /// Norm of the batch gradient before clipping.
    pub grad_norm: f64,
}

pub struct Trainer<R: LabelRefiner = IdentityRefiner> {
    cfg: TrainerConfig,
    cs: ClassSpace,
    mix: MixConfig,
    student: SegNet,
    teacher: SegNet,
    sgd: SgdState,
    /// Batch indices, mixing draws and DECON crops use separate streams so
    /// every mode sees the same batches for a given seed.
    sample_rng: Rng,
    mix_rng: Rng,
    crop_rng: Rng,
    step: usize,
    refiner: R,
}

impl Trainer<IdentityRefiner> {
    pub fn new(cfg: TrainerConfig, cs: ClassSpace, thing_class_ids: Vec<u8>) -> Result<Self> {
        Self::with_refiner(cfg, cs, thing_class_ids, IdentityRefiner)
    }
}

impl<R: LabelRefiner> Trainer<R> {
    pub fn with_refiner(
        cfg: TrainerConfig,
        cs: ClassSpace,
        thing_class_ids: Vec<u8>,
        refiner: R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mix = MixConfig {
            resize_scale: cfg.resize_scale,
            thing_class_ids,
        };
        mix.validate(&cs)?;
        let stream = |id: u64| {
            let mut rng = crate::rng_from_seed(cfg.seed);
            rng.set_stream(id);
            rng
        };
        let student = SegNet::new(cfg.features, cfg.mode.num_outputs(&cs), &mut stream(0))?;
        Ok(Self {
            sample_rng: stream(1),
            mix_rng: stream(2),
            crop_rng: stream(3),
            teacher: student.clone(),
            sgd: SgdState::new(student.layout().len()),
            student,
            cfg,
            cs,
            mix,
            step: 0,
            refiner,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn class_space(&self) -> ClassSpace {
        self.cs
    }

    pub fn student(&self) -> &SegNet {
        &self.student
    }

    pub fn teacher(&self) -> &SegNet {
        &self.teacher
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Teacher pseudo-labels and confidence for a clean target image.
    pub fn pseudo_label(&self, target: &ImageTensor) -> Result<PseudoLabel> {
        let fwd = self.teacher.forward(target);
        let c = self.cs.num_known();
        let probs = softmax(&fwd.logits.leading_channels(c)?)?;
        let labels = if self.cfg.mode.has_unknown_head() {
            pseudo_label_from_heads(&softmax(&fwd.logits)?, c, self.cfg.tau_p)?
        } else {
            argmax_with_prob(&probs).0
        };
        Ok(PseudoLabel {
            labels: self.refiner.refine(labels),
            confidence: confidence_ratio(&probs, self.cfg.tau_t)?,
        })
    }

    /// Draws the mixing and cropping randomness for one pair.
    pub fn plan_item(&mut self, source: &Sample, target: &ImageTensor) -> Result<ItemPlan> {
        let pseudo = self.pseudo_label(target)?;
        let q = pseudo.confidence;
        let mode = self.cfg.mode;
        let private = private_mask(&pseudo.labels, &self.cs);

        let (source_image, source_label, source_weights) = if mode.uses_remix() {
            let mixed = attach_private((&source.image, &source.label), (target, &pseudo.labels), &private)?;
            let w = mixed.pixel_weights(q, 1.0);
            (mixed.image, mixed.label, w)
        } else {
            let n = source.label.data().len();
            (source.image.clone(), source.label.clone(), alloc::vec![1.0; n])
        };

        let mixed = if mode.uses_remix() {
            openremix_target((&source.image, &source.label), (target, &pseudo), &self.mix, &mut self.mix_rng)?
        } else {
            classmix_target((&source.image, &source.label), (target, &pseudo), &mut self.mix_rng)?
        };
        let target_weights = mixed.pixel_weights(1.0, q);

        let decon = if mode.uses_decon() {
            let crop = random_private_crop(&private, &self.cfg.decon.morph, &mut self.crop_rng)?
                .map(|c| (decon_masks(&c.mask, &self.cfg.decon.morph), c.origin));
            Some(DeconPlan {
                image: target.clone(),
                crop,
            })
        } else {
            None
        };

        Ok(ItemPlan {
            source_image,
            source_label,
            source_weights,
            target_image: mixed.image,
            target_label: mixed.label,
            target_weights,
            pseudo,
            decon,
        })
    }

    /// One optimization step on a batch of (source, target) pairs.
    pub fn train_step(&mut self, batch: &[(&Sample, &ImageTensor)]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(crate::Error::EmptyInput { what: "training batch" });
        }
        let mut grads = ParamVector::zeros(self.student.layout().len());
        let mut m = StepMetrics {
            step: self.step + 1,
            ..StepMetrics::default()
        };
        for (source, target) in batch {
            let plan = self.plan_item(source, target)?;
            let (losses, g) = plan_loss(&self.student, &plan, &self.cfg.decon)?;
            for (a, b) in grads.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
            m.total += losses.total;
            m.source_ce += losses.source_ce;
            m.target_ce += losses.target_ce;
            m.decon += losses.decon;
            m.decon_skip_rate += (plan.decon.is_some() && losses.decon_skipped) as u8 as f64;
            m.mean_confidence += plan.pseudo.confidence;
            let unknown = self.cs.unknown_id();
            let labels = plan.pseudo.labels.data();
            m.unknown_rate += labels.iter().filter(|&&l| l == unknown).count() as f64 / labels.len() as f64;
        }
        let n = batch.len() as f64;
        for g in grads.as_mut_slice() {
            *g /= n;
        }
        for v in [
            &mut m.total,
            &mut m.source_ce,
            &mut m.target_ce,
            &mut m.decon,
            &mut m.decon_skip_rate,
            &mut m.mean_confidence,
            &mut m.unknown_rate,
        ] {
            *v /= n;
        }

        if self.cfg.weight_decay > 0.0 {
            for (g, p) in grads.as_mut_slice().iter_mut().zip(self.student.params().as_slice()) {
                *g += self.cfg.weight_decay * p;
            }
        }
        m.grad_norm = libm::sqrt(grads.as_slice().iter().map(|g| g * g).sum());
        if self.cfg.grad_clip > 0.0 && m.grad_norm > self.cfg.grad_clip {
            let k = self.cfg.grad_clip / m.grad_norm;
            grads.as_mut_slice().iter_mut().for_each(|g| *g *= k);
        }
        sgd_step_in_place(
            self.student.params_mut(),
            &grads,
            self.cfg.learning_rate,
            self.cfg.momentum,
            &mut self.sgd,
        )?;
        ema_update_in_place(self.teacher.params_mut(), self.student.params(), self.cfg.alpha)?;
        self.step += 1;
        Ok(m)
    }

    /// Samples `batch_size` uniform (source, target) pairs and steps once.
    pub fn train_step_on(&mut self, bench: &Benchmark) -> Result<StepMetrics> {
        if bench.source.is_empty() || bench.target_images.is_empty() {
            return Err(crate::Error::EmptyInput { what: "benchmark split" });
        }
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let s = self.sample_rng.random_range(0..bench.source.len());
            let t = self.sample_rng.random_range(0..bench.target_images.len());
            batch.push((&bench.source[s], &bench.target_images[t]));
        }
        self.train_step(&batch)
    }

    /// Runs the configured number of steps, reporting each one.
    pub fn train(&mut self, bench: &Benchmark, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.step < self.cfg.steps {
            let m = self.train_step_on(bench)?;
            on_step(&m);
        }
        Ok(())
    }

    /// The trained (student) network with its inference settings.
    pub fn model(&self) -> TrainedModel {
        TrainedModel {
            mode: self.cfg.mode,
            class_space: self.cs,
            tau_inf: self.cfg.tau_inf,
            net: self.student.clone(),
        }
    }
}

/// A network plus what is needed to turn its outputs into labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub mode: Mode,
    pub class_space: ClassSpace,
    pub tau_inf: f64,
    pub net: SegNet,
}

impl TrainedModel {
    pub fn predict(&self, image: &ImageTensor) -> Result<LabelMap> {
        predict(&self.net, image, self.mode, &self.class_space, self.tau_inf)
    }

    pub fn evaluate(&self, images: &[ImageTensor], labels: &[LabelMap]) -> Result<MetricsReport> {
        if labels.is_empty() {
            return Err(crate::Error::EmptyInput { what: "evaluation split" });
        }
        if images.len() != labels.len() {
            return Err(crate::Error::LengthMismatch {
                what: "evaluation labels",
                expected: images.len(),
                found: labels.len(),
            });
        }
        let mut counts = IouCounts::new(&self.class_space);
        for (img, gt) in images.iter().zip(labels) {
            counts.accumulate(&self.predict(img)?, gt)?;
        }
        Ok(MetricsReport::from_counts(counts, &self.class_space))
    }
}

/// Labels an image. With the confidence-threshold recipe, pixels whose top known
/// probability is below `tau_inf` become unknown; otherwise the argmax over all
/// heads (unknown included) is taken.
pub fn predict(
    net: &SegNet,
    image: &ImageTensor,
    mode: Mode,
    cs: &ClassSpace,
    tau_inf: f64,
) -> Result<LabelMap> {
    if net.num_outputs() != mode.num_outputs(cs) {
        return Err(invalid("network", "head count does not match mode and class space"));
    }
    let logits = net.forward(image).logits;
    if mode.has_unknown_head() {
        let data = logits.rows().map(|row| argmax_row(row).0 as u8).collect();
        return LabelMap::new(logits.height(), logits.width(), data);
    }
    let (mut labels, maxes) = argmax_with_prob(&softmax(&logits)?);
    for (l, m) in labels.data_mut().iter_mut().zip(maxes) {
        if m < tau_inf {
            *l = cs.unknown_id();
        }
    }
    Ok(labels)
}

/// Short human label for logs.
pub fn describe(mode: Mode) -> String {
    alloc::format!("{} ({})", mode.name(), mode.row_label())
}
