use serde::{Deserialize, Serialize};

use super::{weighted_sum, LossWeights};
use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    /// Channel-wise sum of squared activations, flattened and L2-normalized
    /// per sample. Vector features count as a single channel.
    AttentionMap,
    /// Batch Gram matrix of flattened features, rows L2-normalized.
    #[default]
    PairwiseSimilarity,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDistance {
    /// Mean squared difference over all elements.
    #[default]
    L2,
    /// Mean absolute difference over all elements.
    L1,
    /// `‖a - b‖_F`.
    Frobenius,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureTransformSpec {
    pub kind: FeatureTransform,
    pub distance: FeatureDistance,
}

pub fn feature_transform(tape: &mut Tape, f: Var, kind: FeatureTransform) -> Result<Var> {
    let shape = tape.value(f).shape().to_vec();
    match kind {
        FeatureTransform::AttentionMap => {
            let f = if shape.len() == 2 {
                tape.reshape(f, vec![shape[0], 1, shape[1]])?
            } else {
                f
            };
            let sq = tape.square(f);
            let summed = tape.sum_channels(sq)?;
            Ok(tape.l2_normalize_rows(summed))
        }
        FeatureTransform::PairwiseSimilarity => {
            let n = shape[0];
            let flat = tape.reshape(f, vec![n, shape[1..].iter().product()])?;
            let ft = tape.transpose(flat)?;
            let gram = tape.matmul(flat, ft)?;
            Ok(tape.l2_normalize_rows(gram))
        }
        FeatureTransform::Identity => Ok(f),
    }
}

pub fn feature_distance(tape: &mut Tape, a: Var, b: Var, kind: FeatureDistance) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(shape_err!(
            "transformed features differ in shape: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        ));
    }
    let diff = tape.sub(a, b)?;
    Ok(match kind {
        FeatureDistance::L2 => {
            let sq = tape.square(diff);
            tape.mean(sq)
        }
        FeatureDistance::L1 => {
            let ab = tape.abs(diff);
            tape.mean(ab)
        }
        FeatureDistance::Frobenius => {
            let sq = tape.square(diff);
            let s = tape.sum(sq);
            tape.sqrt(s)
        }
    })
}

/// Logits and tapped features of the three networks taking part in
/// feature-based semi-online distillation.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLossInputs {
    pub kbm_logits: Var,
    pub student_logits: Var,
    pub feat_kbm: Var,
    pub feat_teacher: Var,
    pub feat_student: Var,
}

/// Feature-matching counterpart of [`super::sokd_losses`]:
///
/// ```text
/// L_kbm = α1·CE(kbm) + α2·d(T(F_kbm), T(F_t)) + α3·d(T(F_kbm), T(F_s))
/// L_s   = λ1·CE(s)   + λ2·d(T(F_s), T(F_kbm))
/// ```
///
/// Returns `(loss_kbm, loss_student)`.
pub fn feature_distill_losses(
    tape: &mut Tape,
    inputs: FeatureLossInputs,
    labels: &[usize],
    spec: FeatureTransformSpec,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    w.validate()?;
    let FeatureLossInputs {
        kbm_logits,
        student_logits,
        feat_kbm,
        feat_teacher,
        feat_student,
    } = inputs;
    let matched = move |tape: &mut Tape, learner: Var, target: Var| -> Result<Var> {
        let target = tape.detach(target);
        let tl = feature_transform(tape, learner, spec.kind)?;
        let tt = feature_transform(tape, target, spec.kind)?;
        feature_distance(tape, tl, tt, spec.distance)
    };
    let loss_kbm = weighted_sum(
        tape,
        vec![
            (w.alpha1, Box::new(|t: &mut Tape| t.cross_entropy(kbm_logits, labels))),
            (w.alpha2, Box::new(move |t: &mut Tape| matched(t, feat_kbm, feat_teacher))),
            (w.alpha3, Box::new(move |t: &mut Tape| matched(t, feat_kbm, feat_student))),
        ],
    )?;
    let loss_student = weighted_sum(
        tape,
        vec![
            (w.lambda1, Box::new(|t: &mut Tape| t.cross_entropy(student_logits, labels))),
            (w.lambda2, Box::new(move |t: &mut Tape| matched(t, feat_student, feat_kbm))),
        ],
    )?;
    Ok((loss_kbm, loss_student))
}
