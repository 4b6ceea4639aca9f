//! The three training objectives and their combination: generative QA loss,
//! per-document discrimination BCE, and the perturbed-vs-original
//! contrastive term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Which auxiliary terms participate in the total; the QA term always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub use_bce: bool,
    pub use_contra: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            use_bce: true,
            use_contra: true,
        }
    }
}

impl LossFlags {
    pub fn qa_only() -> Self {
        LossFlags {
            use_bce: false,
            use_contra: false,
        }
    }

    /// Parses "qa", "qa,bce", "qa,bce,contra" (order-insensitive).
    pub fn parse(spec: &str) -> Result<Self, LossError> {
        let mut flags = LossFlags::qa_only();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "qa" => {}
                "bce" => flags.use_bce = true,
                "contra" => flags.use_contra = true,
                other => return Err(LossError::UnknownComponent(other.to_string())),
            }
        }
        Ok(flags)
    }
}

impl std::fmt::Display for LossFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "qa")?;
        if self.use_bce {
            write!(f, ",bce")?;
        }
        if self.use_contra {
            write!(f, ",contra")?;
        }
        Ok(())
    }
}

/// What the contrastive term exponentiates per document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContraScore {
    /// Raw discriminator logits (default).
    Logit,
    /// Sigmoid probabilities (the literal formulation).
    Probability,
}

/// Scalar values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<S> {
    pub l_qa: S,
    pub l_bce: S,
    pub l_contra: S,
    pub total: S,
}

/// Probability floor for log terms.
pub const CLAMP_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("step {step}: distribution sums to {sum}, not 1 within 1e-6")]
    NotNormalized { step: usize, sum: f64 },
    #[error("target has {targets} steps but {dists} distributions were given")]
    LengthMismatch { targets: usize, dists: usize },
    #[error("target token {token} out of vocabulary range {vocab}")]
    TargetOutOfRange { token: usize, vocab: usize },
    #[error("probability outside (0,1) at index {0}")]
    ProbOutOfRange(usize),
    #[error("labels and scores have different lengths")]
    LabelMismatch,
    #[error("unknown loss component '{0}'")]
    UnknownComponent(String),
}

/// Negative log-likelihood of the target sequence under per-step
/// distributions, with zero-probability clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QaLoss<S> {
    pub value: S,
    /// Steps whose target probability hit the clamp floor.
    pub clamped_steps: usize,
}

pub fn qa_loss<S: Scalar>(
    step_dists: &[Vec<S>],
    target: &[usize],
) -> Result<QaLoss<S>, LossError> {
    if step_dists.len() != target.len() {
        return Err(LossError::LengthMismatch {
            targets: target.len(),
            dists: step_dists.len(),
        });
    }
    let mut value = S::zero();
    let mut clamped = 0;
    for (step, (dist, &token)) in step_dists.iter().zip(target).enumerate() {
        let sum: f64 = dist.iter().map(|p| p.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::NotNormalized { step, sum });
        }
        if token >= dist.len() {
            return Err(LossError::TargetOutOfRange {
                token,
                vocab: dist.len(),
            });
        }
        let mut p = dist[token];
        let floor = S::from_f64(CLAMP_EPSILON);
        if p < floor {
            p = floor;
            clamped += 1;
            log::warn!("qa_loss: clamped zero target probability at step {step}");
        }
        value -= p.ln();
    }
    Ok(QaLoss {
        value,
        clamped_steps: clamped,
    })
}

/// Mean binary cross-entropy of discriminator probabilities against
/// perturbation labels.
pub fn bce_loss<S: Scalar>(probs: &[S], labels: &[bool]) -> Result<S, LossError> {
    if probs.len() != labels.len() {
        return Err(LossError::LabelMismatch);
    }
    let one = S::one();
    for (i, p) in probs.iter().enumerate() {
        if !(*p > S::zero() && *p < one) {
            return Err(LossError::ProbOutOfRange(i));
        }
    }
    let m = S::from_usize(probs.len());
    let mut sum = S::zero();
    for (&p, &t) in probs.iter().zip(labels) {
        sum -= if t { p.ln() } else { (one - p).ln() };
    }
    Ok(sum / m)
}

/// Contrastive loss: -log of the perturbed-document share of exp scores,
/// computed with max-subtraction. A set with no perturbed document
/// contributes exactly zero (and is excluded from gradients upstream).
pub fn contrastive_loss<S: Scalar>(scores: &[S], labels: &[bool]) -> Result<S, LossError> {
    if scores.len() != labels.len() {
        return Err(LossError::LabelMismatch);
    }
    if !labels.iter().any(|&t| t) {
        return Ok(S::zero());
    }
    let max = scores
        .iter()
        .cloned()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut num = S::zero();
    let mut den = S::zero();
    for (&s, &t) in scores.iter().zip(labels) {
        let e = (s - max).exp();
        den += e;
        if t {
            num += e;
        }
    }
    Ok(den.ln() - num.ln())
}

/// Everything a combined loss evaluation needs.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, S> {
    pub step_dists: &'a [Vec<S>],
    pub target: &'a [usize],
    pub disc_logits: &'a [S],
    pub disc_probs: &'a [S],
    pub labels: &'a [bool],
}

/// Combines the enabled components; disabled components are reported as
/// zero so ablation histories show exactly which terms were live.
pub fn total_loss<S: Scalar>(
    inputs: &LossInputs<'_, S>,
    flags: LossFlags,
    contra_score: ContraScore,
) -> Result<LossBreakdown<S>, LossError> {
    let l_qa = qa_loss(inputs.step_dists, inputs.target)?.value;
    let l_bce = if flags.use_bce {
        bce_loss(inputs.disc_probs, inputs.labels)?
    } else {
        S::zero()
    };
    let l_contra = if flags.use_contra {
        let scores = match contra_score {
            ContraScore::Logit => inputs.disc_logits,
            ContraScore::Probability => inputs.disc_probs,
        };
        contrastive_loss(scores, inputs.labels)?
    } else {
        S::zero()
    };
    Ok(LossBreakdown {
        l_qa,
        l_bce,
        l_contra,
        total: l_qa + l_bce + l_contra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / sum).collect()
    }

    #[test]
    fn one_hot_distributions_give_zero_qa_loss() {
        let dists = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        let loss = qa_loss(&dists, &[1, 0]).unwrap();
        assert_eq!(loss.value, 0.0);
        assert_eq!(loss.clamped_steps, 0);
    }

    #[test]
    fn uniform_distribution_closed_form() {
        // two steps over a four-token vocabulary: 2 * ln 4
        let dists = vec![vec![0.25; 4], vec![0.25; 4]];
        let loss = qa_loss(&dists, &[2, 0]).unwrap();
        assert_abs_diff_eq!(loss.value, 2.0 * 4.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn qa_loss_matches_hand_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let v = rng.gen_range(2..9);
            let steps = rng.gen_range(1..6);
            let dists: Vec<Vec<f64>> = (0..steps).map(|_| random_dist(&mut rng, v)).collect();
            let target: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..v)).collect();

            let loss = qa_loss(&dists, &target).unwrap().value;
            let oracle: f64 = dists
                .iter()
                .zip(&target)
                .map(|(d, &t)| -d[t].ln())
                .sum();
            assert_abs_diff_eq!(loss, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn qa_loss_clamps_and_flags_zero_probability() {
        let dists = vec![vec![0.0, 1.0]];
        let loss = qa_loss(&dists, &[0]).unwrap();
        assert_eq!(loss.clamped_steps, 1);
        assert_abs_diff_eq!(loss.value, -CLAMP_EPSILON.ln(), epsilon = 1e-6);
    }

    #[test]
    fn unnormalized_distribution_is_rejected() {
        let dists = vec![vec![0.5, 0.6]];
        assert!(matches!(
            qa_loss(&dists, &[0]),
            Err(LossError::NotNormalized { step: 0, .. })
        ));
    }

    #[test]
    fn half_probabilities_give_ln_two() {
        let probs = vec![0.5, 0.5, 0.5];
        for labels in [[true, false, true], [false, false, false]] {
            let loss = bce_loss(&probs, &labels).unwrap();
            assert_abs_diff_eq!(loss, LN_2, epsilon = 1e-12);
        }
    }

    #[test]
    fn confident_correct_probabilities_give_near_zero() {
        let probs = vec![1.0 - 1e-9, 1e-9];
        let labels = vec![true, false];
        let loss = bce_loss(&probs, &labels).unwrap();
        assert!(loss < 1e-8, "loss = {loss}");
    }

    #[test]
    fn bce_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let m = rng.gen_range(1..8);
            let probs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.99)).collect();
            let labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
            let loss = bce_loss(&probs, &labels).unwrap();
            let oracle = probs
                .iter()
                .zip(&labels)
                .map(|(&p, &t)| {
                    let t = if t { 1.0 } else { 0.0 };
                    -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / m as f64;
            assert_abs_diff_eq!(loss, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn contrastive_is_zero_when_everything_is_perturbed() {
        let scores = vec![0.3, -1.2, 4.0];
        let labels = vec![true, true, true];
        assert_eq!(contrastive_loss(&scores, &labels).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_two_document_symmetric_case() {
        let loss = contrastive_loss(&[0.7, 0.7], &[true, false]).unwrap();
        assert_abs_diff_eq!(loss, LN_2, epsilon = 1e-12);
    }

    #[test]
    fn contrastive_empty_positive_set_contributes_zero() {
        let loss = contrastive_loss(&[1.0, 2.0], &[false, false]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn contrastive_matches_brute_force_exp_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..40 {
            let m = rng.gen_range(1..9);
            let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.4)).collect();
            if !labels.iter().any(|&t| t) {
                labels[0] = true;
            }
            let loss = contrastive_loss(&scores, &labels).unwrap();
            // naive oracle without stabilization
            let num: f64 = scores
                .iter()
                .zip(&labels)
                .filter(|(_, &t)| t)
                .map(|(s, _)| s.exp())
                .sum();
            let den: f64 = scores.iter().map(|s| s.exp()).sum();
            assert_abs_diff_eq!(loss, -(num / den).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn contrastive_shift_invariance_is_exact_on_representable_shifts() {
        // dyadic scores and shifts make every addition exact, so the
        // stabilized computation must return bit-identical losses
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..200 {
            let m = rng.gen_range(1..7);
            let scores: Vec<f64> = (0..m)
                .map(|_| rng.gen_range(-4096..=4096i32) as f64 / 1024.0)
                .collect();
            let mut labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            let c = rng.gen_range(-4096..=4096i32) as f64 / 1024.0;
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let a = contrastive_loss(&scores, &labels).unwrap();
            let b = contrastive_loss(&shifted, &labels).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn inputs<'a>(
        dists: &'a [Vec<f64>],
        target: &'a [usize],
        logits: &'a [f64],
        probs: &'a [f64],
        labels: &'a [bool],
    ) -> LossInputs<'a, f64> {
        LossInputs {
            step_dists: dists,
            target,
            disc_logits: logits,
            disc_probs: probs,
            labels,
        }
    }

    #[test]
    fn disabled_components_report_zero() {
        let dists = vec![vec![0.25; 4]];
        let target = vec![1];
        let logits = vec![0.5, -0.5];
        let probs = vec![0.62, 0.38];
        let labels = vec![true, false];
        let breakdown = total_loss(
            &inputs(&dists, &target, &logits, &probs, &labels),
            LossFlags::qa_only(),
            ContraScore::Logit,
        )
        .unwrap();
        assert_eq!(breakdown.l_bce, 0.0);
        assert_eq!(breakdown.l_contra, 0.0);
        assert_eq!(breakdown.total, breakdown.l_qa);
    }

    #[test]
    fn full_flags_sum_all_three_components() {
        let dists = vec![vec![0.25; 4]];
        let target = vec![1];
        let logits = vec![0.5, -0.5];
        let probs = vec![0.62, 0.38];
        let labels = vec![true, false];
        let breakdown = total_loss(
            &inputs(&dists, &target, &logits, &probs, &labels),
            LossFlags::default(),
            ContraScore::Logit,
        )
        .unwrap();
        assert!(breakdown.l_bce > 0.0 && breakdown.l_contra > 0.0);
        assert_abs_diff_eq!(
            breakdown.total,
            breakdown.l_qa + breakdown.l_bce + breakdown.l_contra,
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_matches_hand_sum_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..25 {
            let v = rng.gen_range(2..6);
            let dists = vec![random_dist(&mut rng, v)];
            let target = vec![rng.gen_range(0..v)];
            let m = rng.gen_range(1..5);
            let logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let probs: Vec<f64> = logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
            let labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
            let breakdown = total_loss(
                &inputs(&dists, &target, &logits, &probs, &labels),
                LossFlags::default(),
                ContraScore::Logit,
            )
            .unwrap();
            let hand = qa_loss(&dists, &target).unwrap().value
                + bce_loss(&probs, &labels).unwrap()
                + contrastive_loss(&logits, &labels).unwrap();
            assert_abs_diff_eq!(breakdown.total, hand, epsilon = 1e-12);
        }
    }

    #[test]
    fn flags_parse_ablation_rows() {
        assert_eq!(LossFlags::parse("qa").unwrap(), LossFlags::qa_only());
        assert_eq!(
            LossFlags::parse("qa,bce").unwrap(),
            LossFlags {
                use_bce: true,
                use_contra: false
            }
        );
        assert_eq!(LossFlags::parse("qa,bce,contra").unwrap(), LossFlags::default());
        assert!(LossFlags::parse("qa,magic").is_err());
    }
}
