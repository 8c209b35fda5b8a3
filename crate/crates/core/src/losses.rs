//! Training objectives of both networks.
//!
//! Every loss is a per-pixel mean over its contributing pixels, uses the
//! natural logarithm with arguments clamped to `[LOG_EPS, 1]`, and is 0 when
//! no pixel contributes. Each loss has a `*_grad` companion returning the
//! derivative with respect to the map it consumes; self-taught targets and
//! confidence masks enter those derivatives as constants.

use serde::{Deserialize, Serialize};

use crate::data::{
    argmax_labels, one_hot_encode, threshold_mask, BinaryMask, ConfidenceMap, OneHotMap, ProbabilityMap, LOG_EPS,
};
use crate::error::{Error, Result};
use crate::networks::MapGrad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub lambda_adv_labeled: f64,
    pub lambda_adv_unlabeled: f64,
    pub lambda_semi: f64,
    pub t_semi: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_adv_labeled: 0.01,
            lambda_adv_unlabeled: 0.001,
            lambda_semi: 0.1,
            t_semi: 0.2,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_adv_labeled, self.lambda_adv_unlabeled, self.lambda_semi];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.t_semi) {
            return Err(Error::InvalidThreshold(self.t_semi));
        }
        Ok(())
    }
}

/// Source of a discriminator input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminatorTarget {
    /// Segmentation prediction, `y = 0`.
    Prediction,
    /// One-hot ground truth, `y = 1`.
    GroundTruth,
}

impl DiscriminatorTarget {
    pub fn y(self) -> f64 {
        match self {
            DiscriminatorTarget::Prediction => 0.0,
            DiscriminatorTarget::GroundTruth => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub contributing_pixels: usize,
}

impl LossValue {
    pub const ZERO: LossValue = LossValue {
        value: 0.0,
        contributing_pixels: 0,
    };

    fn mean(sum: f64, count: usize) -> Self {
        if count == 0 {
            Self::ZERO
        } else {
            Self {
                value: sum / count as f64,
                contributing_pixels: count,
            }
        }
    }
}

/// Compensated (Neumaier) running sum. Loss values are means over thousands
/// of similar terms, and plain accumulation would bury small parameter
/// effects in rounding noise.
#[derive(Default)]
struct Accumulator {
    sum: f64,
    carry: f64,
}

impl Accumulator {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

#[inline]
fn neg_log(x: f64) -> f64 {
    -x.clamp(LOG_EPS, 1.0).ln()
}

/// Derivative of `neg_log`; zero where the clamp is active.
#[inline]
fn neg_log_grad(x: f64) -> f64 {
    if (LOG_EPS..=1.0).contains(&x) {
        -1.0 / x
    } else {
        0.0
    }
}

fn check_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<()> {
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, map is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Discriminator cross entropy `-[(1-y) log(1-D) + y log D]` averaged over
/// the pixels selected by `include`.
pub fn loss_discriminator(conf: &ConfidenceMap, target: DiscriminatorTarget, include: &BinaryMask) -> Result<LossValue> {
    check_mask(include, conf.height(), conf.width())?;
    let mut sum = Accumulator::default();
    for (&d, &keep) in conf.data().iter().zip(include.bits()) {
        if keep {
            sum.add(match target {
                DiscriminatorTarget::Prediction => neg_log(1.0 - d),
                DiscriminatorTarget::GroundTruth => neg_log(d),
            });
        }
    }
    Ok(LossValue::mean(sum.total(), include.count()))
}

pub fn loss_discriminator_grad(conf: &ConfidenceMap, target: DiscriminatorTarget, include: &BinaryMask) -> Result<MapGrad> {
    check_mask(include, conf.height(), conf.width())?;
    let n = include.count();
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    Ok(conf
        .data()
        .iter()
        .zip(include.bits())
        .map(|(&d, &keep)| {
            if !keep {
                return 0.0;
            }
            scale
                * match target {
                    DiscriminatorTarget::Prediction => -neg_log_grad(1.0 - d),
                    DiscriminatorTarget::GroundTruth => neg_log_grad(d),
                }
        })
        .collect())
}

fn check_pair(prob: &ProbabilityMap, target: &OneHotMap) -> Result<()> {
    if prob.channels() != target.channels() || prob.height() != target.height() || prob.width() != target.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            prob.channels(),
            prob.height(),
            prob.width(),
            target.channels(),
            target.height(),
            target.width()
        )));
    }
    Ok(())
}

/// Cross entropy restricted to `mask`, skipping all-zero (ignored) targets.
pub fn masked_ce(prob: &ProbabilityMap, target: &OneHotMap, mask: Option<&BinaryMask>) -> Result<LossValue> {
    check_pair(prob, target)?;
    if let Some(m) = mask {
        check_mask(m, prob.height(), prob.width())?;
    }
    let plane = prob.height() * prob.width();
    let (p, y) = (prob.data(), target.data());
    let mut sum = Accumulator::default();
    let mut count = 0;
    for i in 0..plane {
        if mask.is_some_and(|m| !m.bits()[i]) {
            continue;
        }
        let mut labeled = false;
        for c in 0..prob.channels() {
            let k = c * plane + i;
            if y[k] != 0.0 {
                labeled = true;
                sum.add(y[k] * neg_log(p[k]));
            }
        }
        count += labeled as usize;
    }
    Ok(LossValue::mean(sum.total(), count))
}

/// Derivative of [`masked_ce`] with `target` and `mask` held constant.
pub fn masked_ce_grad(prob: &ProbabilityMap, target: &OneHotMap, mask: Option<&BinaryMask>) -> Result<MapGrad> {
    check_pair(prob, target)?;
    if let Some(m) = mask {
        check_mask(m, prob.height(), prob.width())?;
    }
    let plane = prob.height() * prob.width();
    let channels = prob.channels();
    let (p, y) = (prob.data(), target.data());
    let selected = |i: usize| mask.map_or(true, |m| m.bits()[i]);
    let count = (0..plane)
        .filter(|&i| selected(i) && (0..channels).any(|c| y[c * plane + i] != 0.0))
        .count();
    let mut grad = vec![0.0; channels * plane];
    if count == 0 {
        return Ok(grad);
    }
    let scale = 1.0 / count as f64;
    for i in (0..plane).filter(|&i| selected(i)) {
        for c in 0..channels {
            let k = c * plane + i;
            if y[k] != 0.0 {
                grad[k] = scale * y[k] * neg_log_grad(p[k]);
            }
        }
    }
    Ok(grad)
}

/// Supervised cross entropy against a one-hot ground truth.
pub fn loss_ce(prob: &ProbabilityMap, target: &OneHotMap) -> Result<LossValue> {
    masked_ce(prob, target, None)
}

pub fn loss_ce_grad(prob: &ProbabilityMap, target: &OneHotMap) -> Result<MapGrad> {
    masked_ce_grad(prob, target, None)
}

/// Adversarial loss `-log D(S(X))` averaged over all pixels.
pub fn loss_adv(conf: &ConfidenceMap) -> LossValue {
    let mut sum = Accumulator::default();
    conf.data().iter().for_each(|&d| sum.add(neg_log(d)));
    LossValue::mean(sum.total(), conf.data().len())
}

pub fn loss_adv_grad(conf: &ConfidenceMap) -> MapGrad {
    let n = conf.data().len() as f64;
    conf.data().iter().map(|&d| neg_log_grad(d) / n).collect()
}

/// One-hot encoding of the prediction's own argmax. The result is a plain
/// value, so nothing downstream can differentiate through it.
pub fn build_self_taught_target(prob: &ProbabilityMap) -> OneHotMap {
    one_hot_encode(&argmax_labels(prob), prob.channels()).expect("argmax labels are in range")
}

fn check_conf(prob: &ProbabilityMap, conf: &ConfidenceMap) -> Result<()> {
    if prob.height() != conf.height() || prob.width() != conf.width() {
        return Err(Error::ShapeMismatch("prediction and confidence map differ in size".into()));
    }
    Ok(())
}

/// Self-taught cross entropy on pixels whose confidence exceeds `t_semi`.
pub fn loss_semi(prob: &ProbabilityMap, conf: &ConfidenceMap, t_semi: f64) -> Result<LossValue> {
    check_conf(prob, conf)?;
    let mask = threshold_mask(conf, t_semi)?;
    masked_ce(prob, &build_self_taught_target(prob), Some(&mask))
}

/// Derivative of [`loss_semi`] with respect to `prob`, with the mask and
/// self-taught target recomputed here and treated as constants.
pub fn loss_semi_grad(prob: &ProbabilityMap, conf: &ConfidenceMap, t_semi: f64) -> Result<MapGrad> {
    check_conf(prob, conf)?;
    let mask = threshold_mask(conf, t_semi)?;
    masked_ce_grad(prob, &build_self_taught_target(prob), Some(&mask))
}

/// Segmentation objective of one batch kind.
///
/// Labeled: `l_ce + lambda_adv_labeled * l_adv`; unlabeled:
/// `lambda_adv_unlabeled * l_adv + lambda_semi * l_semi`. Absent terms count
/// as zero, except that a labeled batch must carry `l_ce`.
pub fn loss_seg_total(
    l_ce: Option<LossValue>,
    l_adv: Option<LossValue>,
    l_semi: Option<LossValue>,
    hp: &HyperParams,
    labeled: bool,
) -> Result<LossValue> {
    let weighted = |l: Option<LossValue>, lambda: f64| match l {
        Some(l) if lambda != 0.0 => lambda * l.value,
        _ => 0.0,
    };
    if labeled {
        let ce = l_ce.ok_or_else(|| Error::InvalidCombination("labeled batch without cross entropy".into()))?;
        if l_semi.is_some() {
            return Err(Error::InvalidCombination("labeled batch with a semi-supervised term".into()));
        }
        Ok(LossValue {
            value: ce.value + weighted(l_adv, hp.lambda_adv_labeled),
            contributing_pixels: ce.contributing_pixels,
        })
    } else {
        if l_ce.is_some() {
            return Err(Error::InvalidCombination("unlabeled batch with cross entropy".into()));
        }
        let pixels = l_adv
            .map(|l| l.contributing_pixels)
            .max(l_semi.map(|l| l.contributing_pixels))
            .unwrap_or(0);
        Ok(LossValue {
            value: weighted(l_adv, hp.lambda_adv_unlabeled) + weighted(l_semi, hp.lambda_semi),
            contributing_pixels: pixels,
        })
    }
}
