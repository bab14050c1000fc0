//! Distillation objectives and the knowledge bridge module (KBM).
//!
//! All losses are built on a caller-owned [`Tape`]. Supervision signals are
//! detached before they enter a loss, so one backward pass over the sum of
//! several networks' losses hands each network only the gradient of its own
//! objective.
//!
//! KL terms default to learner-first order, `KL(p_learner, p_target) =
//! Σ p_learner · ln(p_learner / p_target)`, with the same temperature on
//! every term and no `τ²` rescaling. [`KlDirection::TargetFirst`] and
//! [`LossWeights::scale_kl_by_tau_sq`] switch to the Hinton convention.

mod features;

pub use features::{
    feature_distance, feature_distill_losses, feature_transform, FeatureDistance, FeatureLossInputs,
    FeatureTransform, FeatureTransformSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::{build_model, compose, Network, SequentialModel};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_learner, p_target)`.
    #[default]
    LearnerFirst,
    /// `KL(p_target, p_learner)`.
    TargetFirst,
}

/// Balancing weights of every distillation objective.
///
/// `lambda*` weight the student's terms, `alpha*` the KBM's (or, in DML,
/// `lambda*` weight both peers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub alpha1: f32,
    pub alpha2: f32,
    pub alpha3: f32,
    pub tau: f32,
    pub kl_direction: KlDirection,
    pub scale_kl_by_tau_sq: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            tau: 3.0,
            kl_direction: KlDirection::LearnerFirst,
            scale_kl_by_tau_sq: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid_arg!("{name} must be a non-negative finite number, got {v}"));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(invalid_arg!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

/// Temperature-softened class probabilities.
#[derive(Clone, Copy, Debug)]
pub struct SoftTarget {
    pub probs: Var,
    pub tau: f32,
    /// No gradient reaches the producer.
    pub detached: bool,
}

pub fn soften(tape: &mut Tape, logits: Var, tau: f32, detached: bool) -> Result<SoftTarget> {
    let src = if detached { tape.detach(logits) } else { logits };
    let probs = tape.softmax(src, tau)?;
    Ok(SoftTarget {
        probs,
        tau,
        detached,
    })
}

/// Batch-mean `Σ_j p_j ln(p_j / q_j)`, `q` floored at `1e-8`.
pub fn kl_divergence(tape: &mut Tape, p: &SoftTarget, q: &SoftTarget) -> Result<Var> {
    tape.kl_div(p.probs, q.probs)
}

/// KL between a learner and its (detached) target, honouring the
/// direction and `τ²` switches.
fn kl_term(tape: &mut Tape, learner: Var, target: Var, w: &LossWeights) -> Result<Var> {
    let p_learner = soften(tape, learner, w.tau, false)?;
    let p_target = soften(tape, target, w.tau, true)?;
    let kl = match w.kl_direction {
        KlDirection::LearnerFirst => kl_divergence(tape, &p_learner, &p_target)?,
        KlDirection::TargetFirst => kl_divergence(tape, &p_target, &p_learner)?,
    };
    Ok(if w.scale_kl_by_tau_sq {
        tape.scale(kl, w.tau * w.tau)
    } else {
        kl
    })
}

type Term<'a> = (f32, Box<dyn FnOnce(&mut Tape) -> Result<Var> + 'a>);

/// Weighted sum of lazily built terms. Zero-weight terms are never
/// recorded, and unit weights are not multiplied in.
fn weighted_sum(tape: &mut Tape, terms: Vec<Term<'_>>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (weight, build) in terms {
        if weight == 0.0 {
            continue;
        }
        let term = build(tape)?;
        let term = if weight == 1.0 { term } else { tape.scale(term, weight) };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// `λ1·CE(student) + λ2·KL(p_s, p_t)`; the teacher side is always detached.
pub fn kd_student_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    weighted_sum(
        tape,
        vec![
            (w.lambda1, Box::new(|t: &mut Tape| t.cross_entropy(student_logits, labels))),
            (w.lambda2, Box::new(|t: &mut Tape| kl_term(t, student_logits, teacher_logits, w))),
        ],
    )
}

/// Mutual-learning losses; each peer's KL target is the other's detached
/// soft output.
pub fn dml_losses(
    tape: &mut Tape,
    logits_a: Var,
    logits_b: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let loss_a = kd_student_loss(tape, logits_a, logits_b, labels, w)?;
    let loss_b = kd_student_loss(tape, logits_b, logits_a, labels, w)?;
    Ok((loss_a, loss_b))
}

#[derive(Clone, Copy, Debug)]
pub struct SokdLosses {
    pub kbm: Var,
    pub student: Var,
}

/// Semi-online objectives:
///
/// ```text
/// L_kbm = α1·CE(kbm) + α2·KL(p_kbm, p_t) + α3·KL(p_kbm, p_s)
/// L_s   = λ1·CE(s)   + λ2·KL(p_s, p_kbm)
/// ```
pub fn sokd_losses(
    tape: &mut Tape,
    kbm_logits: Var,
    teacher_logits: Var,
    student_logits: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<SokdLosses> {
    w.validate()?;
    let kbm = weighted_sum(
        tape,
        vec![
            (w.alpha1, Box::new(|t: &mut Tape| t.cross_entropy(kbm_logits, labels))),
            (w.alpha2, Box::new(|t: &mut Tape| kl_term(t, kbm_logits, teacher_logits, w))),
            (w.alpha3, Box::new(|t: &mut Tape| kl_term(t, kbm_logits, student_logits, w))),
        ],
    )?;
    let student = weighted_sum(
        tape,
        vec![
            (w.lambda1, Box::new(|t: &mut Tape| t.cross_entropy(student_logits, labels))),
            (w.lambda2, Box::new(|t: &mut Tape| kl_term(t, student_logits, kbm_logits, w))),
        ],
    )?;
    Ok(SokdLosses { kbm, student })
}

/// How the KBM's parameters start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbmInit {
    #[default]
    TeacherCopy,
    Random,
}

/// Trainable copy of the teacher's blocks `l+1..=L`, fed by the frozen
/// low-level output.
pub fn build_kbm(teacher: &SequentialModel, l: usize, init: KbmInit, seed: u64) -> Result<SequentialModel> {
    let (_, high) = teacher.split(l)?;
    match init {
        KbmInit::TeacherCopy => Ok(high.to_model()),
        KbmInit::Random => build_model(&high.spec(), seed),
    }
}

/// Inference-time teacher: frozen low-level layers followed by the KBM.
pub fn reconstruct_teacher(teacher_low: &impl Network, kbm: &SequentialModel) -> Result<SequentialModel> {
    compose(teacher_low, kbm)
}
