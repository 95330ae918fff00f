//! Teacher-student self-training with the refinement decoder.
//!
//! A step runs in three phases. [`prepare_step`] does everything that needs
//! no student gradient: teacher inference, refinement of pseudo-labels,
//! target mixing and augmentation. [`student_phase`] and [`prn_phase`] then
//! produce the two losses and their gradients over disjoint parameter
//! vectors, and [`train_step`] applies both optimizer updates and the EMA.

pub mod losses;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    bce_with_logits, ce_source, ce_target, confidence_mask, confidence_threshold, prn_source_losses,
    prn_target_losses, total_losses, weighted_ce, LossGrad, LossReport, PseudoLabelBundle,
};

use crate::augment::{classmix, mask_guided_mix, photometric, AugConfig, Mixed};
use crate::contrastive::{contrastive_loss, sample_pairs, ContrastConfig};
use crate::error::{Error, Result};
use crate::numerics::{argmax_labels, max_channel, softmax_channels, Grid, LabelMap, NoiseMask};
use crate::segnet::{
    adamw_step, prn_backward, prn_decode, prn_forward, seg_backward, seg_forward, segment, AdamW, Arch, GroupRates,
    LrSchedule, ModelState, OptimState, PrnOutput, SegOutput,
};
use crate::spectral::{fda_image, make_noise_mask_gt, perturb_logits, PerturbConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub model: ModelState,
    pub beta: f64,
}

impl TeacherState {
    pub fn from_student(student: &ModelState, beta: f64) -> Self {
        TeacherState {
            model: student.clone(),
            beta,
        }
    }
}

/// `phi <- beta * phi + (1 - beta) * theta`, elementwise.
pub fn ema_update(t: &TeacherState, student: &ModelState) -> Result<TeacherState> {
    let mut next = t.clone();
    ema_update_in_place(&mut next, student)?;
    Ok(next)
}

pub fn ema_update_in_place(t: &mut TeacherState, student: &ModelState) -> Result<()> {
    if t.model.arch != student.arch || t.model.len() != student.len() {
        return Err(Error::InvalidArgument(format!(
            "teacher/student architecture mismatch: {} vs {}",
            t.model.arch, student.arch
        )));
    }
    let b = t.beta;
    for (p, s) in t.model.params.iter_mut().zip(&student.params) {
        *p = b * *p + (1.0 - b) * s;
    }
    Ok(())
}

/// Argmax of the teacher's logits.
pub fn pseudo_label(t: &TeacherState, x: &Grid) -> Result<LabelMap> {
    Ok(argmax_labels(&segment(&t.model, x)?.logits))
}

/// How target features take part in the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    Off,
    /// Raw teacher pseudo-labels, no noise mask.
    Plain,
    /// Refined pseudo-labels with noisy pixels excluded.
    Refined,
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub self_training: bool,
    pub refine: bool,
    pub noise_mask: bool,
    pub contrast: ContrastMode,
    pub fourier: bool,
}

impl Switches {
    pub fn source_only() -> Self {
        Switches {
            self_training: false,
            refine: false,
            noise_mask: false,
            contrast: ContrastMode::Off,
            fourier: false,
        }
    }

    pub fn self_training() -> Self {
        Switches {
            self_training: true,
            ..Self::source_only()
        }
    }

    pub fn refined() -> Self {
        Switches {
            refine: true,
            ..Self::self_training()
        }
    }

    pub fn refined_masked() -> Self {
        Switches {
            noise_mask: true,
            ..Self::refined()
        }
    }

    pub fn full() -> Self {
        Switches {
            contrast: ContrastMode::Refined,
            fourier: true,
            ..Self::refined_masked()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = if self.refine && !self.self_training {
            Some("refinement requires self-training")
        } else if self.noise_mask && !self.refine {
            Some("noise masking requires refinement")
        } else if self.contrast == ContrastMode::Refined && !self.refine {
            Some("contrastive learning with refined labels requires refinement")
        } else if self.contrast != ContrastMode::Off && !self.self_training {
            Some("contrastive learning requires self-training")
        } else {
            None
        };
        match bad {
            Some(msg) => Err(Error::Config(msg.into())),
            None => Ok(()),
        }
    }

    /// Compact tag such as `st+prn+nm`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if !self.self_training {
            parts.push("source-only");
        } else {
            parts.push("st");
        }
        if self.refine {
            parts.push("prn");
        }
        if self.noise_mask {
            parts.push("nm");
        }
        match self.contrast {
            ContrastMode::Off => {}
            ContrastMode::Plain => parts.push("cl"),
            ContrastMode::Refined => parts.push("cl-r"),
        }
        if self.fourier {
            parts.push("fa");
        }
        parts.join("+")
    }
}

/// Every hyperparameter the training step reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub switches: Switches,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_prn: f64,
    pub adamw: AdamW,
    pub ema_beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub perturb: PerturbConfig,
    pub fa_eps: f64,
    pub schedule: LrSchedule,
    pub aug: AugConfig,
    pub contrast: ContrastConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            switches: Switches::full(),
            lr_encoder: 6e-5,
            lr_decoder: 6e-4,
            lr_prn: 6e-4,
            adamw: AdamW::default(),
            ema_beta: 0.999,
            tau1: 0.968,
            tau2: 0.968,
            lambda1: 0.1,
            lambda2: 25.0,
            perturb: PerturbConfig::default(),
            fa_eps: 0.005,
            schedule: LrSchedule {
                warmup_steps: 1500,
                total_steps: 40_000,
                warmup_ratio: 1e-6,
            },
            aug: AugConfig::default(),
            contrast: ContrastConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.switches.validate()?;
        self.perturb.validate()?;
        self.aug.validate()?;
        self.contrast.validate()?;
        let unit = |name: &str, v: f64, lo_open: bool| -> Result<()> {
            let ok = if lo_open { v > 0.0 && v < 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} out of range")))
            }
        };
        unit("ema_beta", self.ema_beta, false)?;
        unit("tau1", self.tau1, true)?;
        unit("tau2", self.tau2, true)?;
        if !(0.0..1.0).contains(&self.fa_eps) {
            return Err(Error::Config(format!("fa_eps = {} out of range", self.fa_eps)));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("lr_prn", self.lr_prn),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.schedule.warmup_steps > self.schedule.total_steps {
            return Err(Error::Config("warm-up longer than the run".into()));
        }
        Ok(())
    }
}

/// Student, teacher, refinement decoder and both optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ModelState,
    pub teacher: TeacherState,
    pub prn: ModelState,
    pub student_opt: OptimState,
    pub prn_opt: OptimState,
    pub step: u64,
}

impl TrainState {
    pub fn new(seg_arch: Arch, prn_arch: Arch, ema_beta: f64, seed: u64) -> Result<Self> {
        if seg_arch.num_classes() != prn_arch.num_classes() {
            return Err(Error::ArchMismatch {
                expected: seg_arch.to_string(),
                actual: prn_arch.to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = ModelState::init(seg_arch, &mut rng);
        let prn = ModelState::init(prn_arch, &mut rng);
        Ok(TrainState {
            teacher: TeacherState::from_student(&student, ema_beta),
            student_opt: OptimState::for_model(&student),
            prn_opt: OptimState::for_model(&prn),
            student,
            prn,
            step: 0,
        })
    }
}

/// One source/target pair. Target labels are never read during training.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub id: u64,
    pub source: &'a Grid,
    pub source_labels: &'a LabelMap,
    pub target: &'a Grid,
}

/// Refinement of the clean teacher prediction.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub output: PrnOutput,
    pub bundle: PseudoLabelBundle,
}

/// Everything computed before the student forward pass.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub source_input: Grid,
    pub teacher: SegOutput,
    pub pseudo_labels: LabelMap,
    pub refinement: Option<Refinement>,
    /// Image-level confidence used to weight the target loss.
    pub confidence: f64,
    pub target_mix: Option<Mixed>,
    /// Target labels and exclusion mask for the contrastive term.
    pub contrast_target: Option<(LabelMap, Option<NoiseMask>)>,
    pub eps: f64,
    contrast_seed: u64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn prepare_step(state: &TrainState, batch: &Batch, cfg: &TrainConfig, seed: u64) -> Result<StepPlan> {
    let sw = cfg.switches;
    let mut aug_rng = stream(seed, 1);
    let eps = cfg.perturb.sample_eps(&mut stream(seed, 3));
    let source_input = if sw.fourier {
        fda_image(batch.source, batch.target, cfg.fa_eps)?
    } else {
        batch.source.clone()
    };
    let teacher = segment(&state.teacher.model, batch.target)?;
    let pseudo_labels = argmax_labels(&teacher.logits);

    let refinement = if sw.refine {
        let output = prn_decode(&state.prn, &teacher.features, &teacher.logits)?;
        let probs = softmax_channels(&output.refined_logits)?;
        let labels = argmax_labels(&output.refined_logits);
        let mask = NoiseMask::from_logits(&output.noise_logits);
        let confidence = if sw.noise_mask {
            confidence_mask(&mask)
        } else {
            confidence_threshold(&probs, cfg.tau1)?
        };
        Some(Refinement {
            bundle: PseudoLabelBundle {
                labels,
                confidence,
                max_prob: max_channel(&probs),
                noise_mask: Some(mask),
            },
            output,
        })
    } else {
        None
    };
    let confidence = match &refinement {
        Some(r) => r.bundle.confidence,
        None => confidence_threshold(&softmax_channels(&teacher.logits)?, cfg.tau1)?,
    };

    let (target_mix, contrast_target) = if sw.self_training {
        let labels = refinement.as_ref().map_or(&pseudo_labels, |r| &r.bundle.labels);
        let n = labels.len();
        let mut weights = vec![confidence; n];
        let mut from_source = vec![false; n];
        let (mut image, mut mixed_labels) = (batch.target.clone(), labels.clone());
        if sw.noise_mask {
            let mask = refinement.as_ref().and_then(|r| r.bundle.noise_mask.as_ref()).unwrap();
            let (i, l) = mask_guided_mix((&image, &mixed_labels), mask, (&source_input, batch.source_labels))?;
            image = i;
            mixed_labels = l;
            for p in (0..n).filter(|&p| mask.data[p]) {
                weights[p] = 1.0;
                from_source[p] = true;
            }
        }
        let mut mix = classmix(
            (&source_input, batch.source_labels),
            (&image, &mixed_labels),
            &weights,
            cfg.aug.classmix_fraction,
            &mut aug_rng,
        )?;
        for (a, b) in mix.from_source.iter_mut().zip(&from_source) {
            *a |= *b;
        }
        mix.image = photometric(&mix.image, &cfg.aug, &mut aug_rng)?;

        let contrast = match sw.contrast {
            ContrastMode::Off => None,
            mode => {
                let own = match (mode, &refinement) {
                    (ContrastMode::Refined, Some(r)) => &r.bundle.labels,
                    _ => &pseudo_labels,
                };
                let mut lbl = mix.labels.clone();
                for p in (0..n).filter(|&p| !mix.from_source[p]) {
                    lbl.data[p] = own.data[p];
                }
                let mask = match (mode, &refinement) {
                    (ContrastMode::Refined, Some(r)) => r.bundle.noise_mask.as_ref().map(|m| NoiseMask {
                        height: m.height,
                        width: m.width,
                        data: m.data.iter().zip(&mix.from_source).map(|(&x, &s)| x && !s).collect(),
                    }),
                    _ => None,
                };
                Some((lbl, mask))
            }
        };
        (Some(mix), contrast)
    } else {
        (None, None)
    };

    Ok(StepPlan {
        source_input,
        teacher,
        pseudo_labels,
        refinement,
        confidence,
        target_mix,
        contrast_target,
        eps,
        contrast_seed: stream(seed, 2).gen(),
    })
}

/// Student losses, their gradient over the student parameters, and the
/// student's pre-update source outputs (consumed by the refinement phase).
#[derive(Clone, Debug)]
pub struct StudentPhase {
    pub source_ce: f64,
    pub target_ce: f64,
    pub contrastive: f64,
    pub grad: Vec<f64>,
    pub source_out: SegOutput,
}

impl StudentPhase {
    pub fn total(&self, lambda1: f64) -> f64 {
        self.target_ce + self.source_ce + lambda1 * self.contrastive
    }
}

pub fn student_phase(student: &ModelState, plan: &StepPlan, batch: &Batch, cfg: &TrainConfig) -> Result<StudentPhase> {
    let (src_out, src_tape) = seg_forward(student, &plan.source_input)?;
    let ce_s = ce_source(&src_out.logits, batch.source_labels)?;
    let mut d_src_feat = None;
    let mut target_ce = 0.0;
    let mut contrastive = 0.0;
    let mut tgt = None;
    if let Some(mix) = &plan.target_mix {
        let (out, tape) = seg_forward(student, &mix.image)?;
        let ce_t = weighted_ce(&out.logits, &mix.labels, Some(&mix.weights), None)?;
        target_ce = ce_t.value;
        let mut d_tgt_feat = None;
        if let Some((labels, mask)) = &plan.contrast_target {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.contrast_seed);
            let (bank, pairs) = sample_pairs(
                &src_out.features,
                &out.features,
                batch.source_labels,
                labels,
                mask.as_ref(),
                &cfg.contrast,
                &mut rng,
            )?;
            let cl = contrastive_loss(&pairs, &bank, cfg.contrast.temperature)?;
            contrastive = cl.value;
            if cfg.lambda1 != 0.0 && !cl.empty {
                let scaled: Vec<f64> = cl.grad.iter().map(|g| g * cfg.lambda1).collect();
                let mut parts = bank.split_grad(&scaled).into_iter();
                d_src_feat = parts.next();
                d_tgt_feat = parts.next();
            }
        }
        tgt = Some((tape, ce_t, d_tgt_feat));
    }
    let mut grad = seg_backward(student, &src_tape, Some(&ce_s.grad), d_src_feat.as_ref());
    if let Some((tape, ce_t, d_feat)) = tgt {
        let g = seg_backward(student, &tape, Some(&ce_t.grad), d_feat.as_ref());
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok(StudentPhase {
        source_ce: ce_s.value,
        target_ce,
        contrastive,
        grad,
        source_out: src_out,
    })
}

/// Refinement losses and their gradient over the refinement decoder only.
#[derive(Clone, Debug, Default)]
pub struct PrnPhase {
    pub source_ce: f64,
    pub source_bce: f64,
    pub target_ce: f64,
    pub target_bce: f64,
    pub grad: Vec<f64>,
    /// Density of the perturbation-derived target mask.
    pub target_mask_density: f64,
}

impl PrnPhase {
    pub fn total(&self, lambda2: f64) -> f64 {
        lambda2 * (self.source_ce + self.source_bce) + self.target_ce + self.target_bce
    }
}

/// Source branch: the student's source logits are perturbed with the
/// teacher's target amplitude and refined from the student's (detached)
/// source features. Target branch: the teacher's target logits are perturbed
/// with the student's source amplitude, refined from the teacher's target
/// features, and supervised by the refined clean-target reference.
pub fn prn_phase(
    prn: &ModelState,
    plan: &StepPlan,
    student_source: &SegOutput,
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<PrnPhase> {
    let reference = plan
        .refinement
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("refinement phase needs a refined reference".into()))?;
    let l_s = &student_source.logits;
    let l_t = &plan.teacher.logits;

    let l_s_pert = perturb_logits(l_s, l_t, plan.eps)?;
    let mu_s = make_noise_mask_gt(l_s, &l_s_pert)?;
    let (out_s, tape_s) = prn_forward(prn, &student_source.features, &l_s_pert)?;
    let (ce_rs, bce_rs) = prn_source_losses(&out_s, batch.source_labels, &mu_s)?;
    let lam = cfg.lambda2;
    let mut grad = prn_backward(
        prn,
        &tape_s,
        Some(&ce_rs.scaled_grad(lam)),
        Some(&bce_rs.scaled_grad(lam)),
    );

    let l_t_pert = perturb_logits(l_t, l_s, plan.eps)?;
    let mu_t = make_noise_mask_gt(l_t, &l_t_pert)?;
    let (out_t, tape_t) = prn_forward(prn, &plan.teacher.features, &l_t_pert)?;
    let (ce_rt, bce_rt) = prn_target_losses(
        &out_t,
        &reference.bundle,
        &mu_t,
        step,
        cfg.schedule.warmup_steps,
        cfg.tau2,
    )?;
    let g = prn_backward(prn, &tape_t, Some(&ce_rt.grad), Some(&bce_rt.grad));
    grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);

    Ok(PrnPhase {
        source_ce: ce_rs.value,
        source_bce: bce_rs.value,
        target_ce: ce_rt.value,
        target_bce: bce_rt.value,
        grad,
        target_mask_density: mu_t.density(),
    })
}

/// Per-step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: u64,
    pub losses: LossReport,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub confidence: f64,
    /// Density of the predicted target noise mask, when refinement is on.
    pub noise_density: Option<f64>,
}

pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let seed: u64 = rng.gen();
    let step = state.step;
    let plan = prepare_step(state, batch, cfg, seed)?;
    let sp = student_phase(&state.student, &plan, batch, cfg)?;
    let pp = if cfg.switches.refine {
        Some(prn_phase(&state.prn, &plan, &sp.source_out, batch, cfg, step)?)
    } else {
        None
    };
    let p = pp.clone().unwrap_or_default();
    let losses = LossReport {
        source_ce: sp.source_ce,
        target_ce: sp.target_ce,
        contrastive: sp.contrastive,
        prn_source_ce: p.source_ce,
        prn_source_bce: p.source_bce,
        prn_target_ce: p.target_ce,
        prn_target_bce: p.target_bce,
        ..Default::default()
    }
    .with_totals(cfg.lambda1, cfg.lambda2);
    if !losses.all_finite() {
        log::error!("non-finite loss at step {step}, batch {}: {losses:?}", batch.id);
        return Err(Error::NonFinite(format!(
            "step {step}, batch {}: {}",
            batch.id,
            serde_json::to_string(&losses).unwrap_or_default()
        )));
    }

    let base = GroupRates {
        encoder: cfg.lr_encoder,
        decoder: cfg.lr_decoder,
    };
    let rates = cfg.schedule.rates(step, base);
    adamw_step(&mut state.student, &sp.grad, &mut state.student_opt, &cfg.adamw, rates)
        .map_err(|e| tag_batch(e, step, batch.id))?;
    if let Some(pp) = &pp {
        let prn_rates = cfg.schedule.rates(step, GroupRates::uniform(cfg.lr_prn));
        adamw_step(&mut state.prn, &pp.grad, &mut state.prn_opt, &cfg.adamw, prn_rates)
            .map_err(|e| tag_batch(e, step, batch.id))?;
    }
    ema_update_in_place(&mut state.teacher, &state.student)?;
    state.step += 1;

    Ok(StepOutcome {
        step,
        losses,
        lr_encoder: rates.encoder,
        lr_decoder: rates.decoder,
        confidence: plan.confidence,
        noise_density: plan
            .refinement
            .as_ref()
            .and_then(|r| r.bundle.noise_mask.as_ref())
            .map(NoiseMask::density),
    })
}

fn tag_batch(e: Error, step: u64, id: u64) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {step}, batch {id}: {msg}")),
        other => other,
    }
}
