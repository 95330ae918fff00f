//! Per-pixel losses and pseudo-label confidence estimates.
//!
//! Every CE/BCE term is normalised by the number of pixels that take part in
//! it, so loss weights stay comparable across image sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Grid, LabelMap, NoiseMask, IGNORE};
use crate::segnet::PrnOutput;

/// A scalar loss together with its gradient w.r.t. the logits it was
/// computed from.
#[derive(Clone, Debug)]
pub struct LossGrad {
    /// Sum of per-pixel terms divided by `count` (0 when `count == 0`).
    pub value: f64,
    /// Unnormalised sum of per-pixel terms.
    pub sum: f64,
    /// Pixels that contributed.
    pub count: usize,
    pub grad: Grid,
}

impl LossGrad {
    fn empty(like: &Grid) -> Self {
        LossGrad {
            value: 0.0,
            sum: 0.0,
            count: 0,
            grad: Grid::zeros(like.channels, like.height, like.width),
        }
    }

    pub fn scaled_grad(&self, s: f64) -> Grid {
        self.grad.scale(s)
    }
}

fn check_labels(l: &Grid, y: &LabelMap, ctx: &'static str) -> Result<()> {
    if (l.height, l.width) != (y.height, y.width) {
        return Err(Error::shape(
            ctx,
            format!("{}x{}", l.height, l.width),
            format!("{}x{}", y.height, y.width),
        ));
    }
    y.validate(l.channels)
}

/// Cross-entropy averaged over participating pixels, with optional
/// per-pixel weights and an optional participation mask. `IGNORE` labels
/// never participate.
pub fn weighted_ce(l: &Grid, y: &LabelMap, weights: Option<&[f64]>, include: Option<&[bool]>) -> Result<LossGrad> {
    check_labels(l, y, "weighted_ce")?;
    let n = l.plane_len();
    let k = l.channels;
    if weights.is_some_and(|w| w.len() != n) || include.is_some_and(|m| m.len() != n) {
        return Err(Error::shape("weighted_ce weights/mask", n, "other"));
    }
    let mut out = LossGrad::empty(l);
    let mut probs = vec![0.0; k];
    let mut active = Vec::new();
    for p in 0..n {
        let t = y.data[p];
        if t == IGNORE || include.is_some_and(|m| !m[p]) {
            continue;
        }
        let w = weights.map_or(1.0, |w| w[p]);
        let mx = (0..k).map(|c| l.data[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            probs[c] = (l.data[c * n + p] - mx).exp();
            z += probs[c];
        }
        let t = t as usize;
        let log_p = l.data[t * n + p] - mx - z.ln();
        out.sum += -w * log_p;
        out.count += 1;
        for c in 0..k {
            let pc = probs[c] / z;
            out.grad.data[c * n + p] = w * (pc - if c == t { 1.0 } else { 0.0 });
        }
        active.push(p);
    }
    if out.count > 0 {
        let inv = 1.0 / out.count as f64;
        out.value = out.sum * inv;
        for p in active {
            for c in 0..k {
                out.grad.data[c * n + p] *= inv;
            }
        }
    }
    Ok(out)
}

/// Supervised source cross-entropy.
pub fn ce_source(l: &Grid, y: &LabelMap) -> Result<LossGrad> {
    weighted_ce(l, y, None, None)
}

/// Target cross-entropy over the pixels the noise mask marks clean, each
/// scaled by the image-level confidence `eta`.
pub fn ce_target(l: &Grid, y_ref: &LabelMap, m: &NoiseMask, eta: f64) -> Result<LossGrad> {
    if (m.height, m.width) != (y_ref.height, y_ref.width) {
        return Err(Error::shape("ce_target mask", y_ref.len(), m.data.len()));
    }
    let clean: Vec<bool> = m.data.iter().map(|&b| !b).collect();
    let w = vec![eta; y_ref.len()];
    weighted_ce(l, y_ref, Some(&w), Some(&clean))
}

/// Binary cross-entropy of `sigmoid(z)` against a binary target, averaged
/// over participating pixels.
pub fn bce_with_logits(z: &Grid, target: &NoiseMask, include: Option<&[bool]>) -> Result<LossGrad> {
    if z.channels != 1 || (z.height, z.width) != (target.height, target.width) {
        return Err(Error::shape(
            "bce_with_logits",
            format!("1x{}x{}", target.height, target.width),
            format!("{:?}", z.shape()),
        ));
    }
    let mut out = LossGrad::empty(z);
    let mut active = Vec::new();
    for (p, &t) in target.data.iter().enumerate() {
        if include.is_some_and(|m| !m[p]) {
            continue;
        }
        let x = z.data[p];
        let t = if t { 1.0 } else { 0.0 };
        // log(1 + exp(-|x|)) + max(x, 0) - x t
        out.sum += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        out.grad.data[p] = sigmoid(x) - t;
        out.count += 1;
        active.push(p);
    }
    if out.count > 0 {
        let inv = 1.0 / out.count as f64;
        out.value = out.sum * inv;
        for p in active {
            out.grad.data[p] *= inv;
        }
    }
    Ok(out)
}

/// Refinement losses on perturbed source logits: CE of refined logits
/// against GT labels and BCE of the noise head against the perturbation mask.
pub fn prn_source_losses(out: &PrnOutput, y_gt: &LabelMap, mu_gt: &NoiseMask) -> Result<(LossGrad, LossGrad)> {
    let ce = ce_source(&out.refined_logits, y_gt)?;
    let bce = bce_with_logits(&out.noise_logits, mu_gt, None)?;
    Ok((ce, bce))
}

/// Reference pseudo-labels for target-side refinement supervision, taken
/// from the refinement decoder run on clean teacher logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBundle {
    pub labels: LabelMap,
    /// Image-level confidence in `[0, 1]`.
    pub confidence: f64,
    /// Per-pixel maximum softmax probability of the logits `labels` came from.
    pub max_prob: Vec<f64>,
    /// Predicted noise mask, when the noise head is in use.
    pub noise_mask: Option<NoiseMask>,
}

/// Refinement losses on perturbed target logits.
///
/// Before `warmup_steps` the CE only sees pixels whose reference max-softmax
/// reaches `tau2`; afterwards it sees the pixels the predicted noise mask
/// calls clean (falling back to the `tau2` rule without a mask). The BCE is
/// always taken against the perturbation-derived mask.
pub fn prn_target_losses(
    out: &PrnOutput,
    reference: &PseudoLabelBundle,
    mu_gt: &NoiseMask,
    step: u64,
    warmup_steps: u64,
    tau2: f64,
) -> Result<(LossGrad, LossGrad)> {
    if reference.max_prob.len() != reference.labels.len() {
        return Err(Error::shape(
            "prn_target_losses max_prob",
            reference.labels.len(),
            reference.max_prob.len(),
        ));
    }
    let include: Vec<bool> = match (&reference.noise_mask, step >= warmup_steps) {
        (Some(m), true) => m.data.iter().map(|&b| !b).collect(),
        _ => reference.max_prob.iter().map(|&p| p >= tau2).collect(),
    };
    let ce = weighted_ce(&out.refined_logits, &reference.labels, None, Some(&include))?;
    let bce = bce_with_logits(&out.noise_logits, mu_gt, None)?;
    Ok((ce, bce))
}

/// Fraction of pixels whose maximum class probability exceeds `tau1`.
pub fn confidence_threshold(probs: &Grid, tau1: f64) -> Result<f64> {
    if !(tau1 > 0.0 && tau1 < 1.0) {
        return Err(Error::InvalidArgument(format!("tau1 {tau1} outside (0, 1)")));
    }
    let n = probs.plane_len();
    if n == 0 {
        return Ok(0.0);
    }
    let over = crate::numerics::max_channel(probs).iter().filter(|&&p| p > tau1).count();
    Ok(over as f64 / n as f64)
}

/// Fraction of pixels the noise mask calls clean.
pub fn confidence_mask(m: &NoiseMask) -> f64 {
    if m.data.is_empty() {
        return 0.0;
    }
    m.data.iter().filter(|&&b| !b).count() as f64 / m.data.len() as f64
}

/// All loss terms of one training step plus the two optimised totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub source_ce: f64,
    pub target_ce: f64,
    pub contrastive: f64,
    pub prn_source_ce: f64,
    pub prn_source_bce: f64,
    pub prn_target_ce: f64,
    pub prn_target_bce: f64,
    pub total_student: f64,
    pub total_prn: f64,
}

impl LossReport {
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("source_ce", self.source_ce),
            ("target_ce", self.target_ce),
            ("contrastive", self.contrastive),
            ("prn_source_ce", self.prn_source_ce),
            ("prn_source_bce", self.prn_source_bce),
            ("prn_target_ce", self.prn_target_ce),
            ("prn_target_bce", self.prn_target_bce),
            ("total_student", self.total_student),
            ("total_prn", self.total_prn),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }

    /// Fills in both totals from the parts.
    pub fn with_totals(mut self, lambda1: f64, lambda2: f64) -> Self {
        let (s, p) = total_losses(&self, lambda1, lambda2);
        self.total_student = s;
        self.total_prn = p;
        self
    }
}

/// `(L_T + L_S + lambda1 * L_con, lambda2 * (L_RS_ce + L_RS_bce) + L_RT_ce + L_RT_bce)`.
pub fn total_losses(parts: &LossReport, lambda1: f64, lambda2: f64) -> (f64, f64) {
    let student = parts.target_ce + parts.source_ce + lambda1 * parts.contrastive;
    let prn = lambda2 * (parts.prn_source_ce + parts.prn_source_bce) + parts.prn_target_ce + parts.prn_target_bce;
    (student, prn)
}
