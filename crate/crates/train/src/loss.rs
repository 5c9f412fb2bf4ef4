//! Classification losses: cross-entropy and teacher distillation.

use crate::{Result, TrainError};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
}

fn check_label(len: usize, label: usize) -> Result<()> {
    if label >= len {
        return Err(TrainError::BadLabel { label, classes: len });
    }
    Ok(())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(logits.len(), label)?;
    Ok(-log_softmax(logits)[label])
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(logits.len(), label)?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

/// Distillation setup: convex weight on the hard-label term and the
/// temperature ramp for the teacher term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Weight on cross-entropy; `1 - alpha` goes to the KL term.
    pub alpha: f64,
    pub temp_start: f64,
    pub temp_end: f64,
}

impl DistillConfig {
    pub fn new(alpha: f64, temp_start: f64, temp_end: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(TrainError::BadAlpha(alpha));
        }
        if temp_start < 1.0 || temp_end < 1.0 {
            return Err(TrainError::BadTemperature(temp_start.min(temp_end)));
        }
        Ok(DistillConfig { alpha, temp_start, temp_end })
    }

    /// Equal CE/KL weighting, temperature annealed 4 -> 1.
    pub fn default_schedule() -> Self {
        DistillConfig { alpha: 0.5, temp_start: 4.0, temp_end: 1.0 }
    }

    /// Linear temperature at `progress` in `[0, 1]` through the run.
    pub fn temperature_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.temp_start + (self.temp_end - self.temp_start) * p
    }
}

fn scaled(logits: &[f64], temp: f64) -> Vec<f64> {
    logits.iter().map(|v| v / temp).collect()
}

/// `alpha * CE(logits, label) + (1 - alpha) * temp^2 *
/// KL(softmax(teacher / temp) || softmax(logits / temp))`.
///
/// The `temp^2` factor keeps the KL term's gradient magnitude comparable
/// across temperatures.
pub fn distill_loss(
    logits: &[f64],
    teacher_logits: &[f64],
    cfg: &DistillConfig,
    temp: f64,
    label: usize,
) -> Result<f64> {
    if logits.len() != teacher_logits.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "{} student logits vs {} teacher logits",
            logits.len(),
            teacher_logits.len()
        )));
    }
    let ce = cross_entropy(logits, label)?;
    let p_teacher = softmax(&scaled(teacher_logits, temp));
    let log_p_teacher = log_softmax(&scaled(teacher_logits, temp));
    let log_p_student = log_softmax(&scaled(logits, temp));
    let kl: f64 = p_teacher
        .iter()
        .zip(log_p_teacher.iter().zip(&log_p_student))
        .map(|(p, (lp, lq))| p * (lp - lq))
        .sum();
    Ok(cfg.alpha * ce + (1.0 - cfg.alpha) * temp * temp * kl)
}

/// Gradient of [`distill_loss`] with respect to the student logits.
pub fn distill_grad(
    logits: &[f64],
    teacher_logits: &[f64],
    cfg: &DistillConfig,
    temp: f64,
    label: usize,
) -> Result<Vec<f64>> {
    if logits.len() != teacher_logits.len() {
        return Err(TrainError::DimensionMismatch(format!(
            "{} student logits vs {} teacher logits",
            logits.len(),
            teacher_logits.len()
        )));
    }
    let ce = cross_entropy_grad(logits, label)?;
    let p_student = softmax(&scaled(logits, temp));
    let p_teacher = softmax(&scaled(teacher_logits, temp));
    Ok(ce
        .iter()
        .zip(p_student.iter().zip(&p_teacher))
        .map(|(c, (s, t))| cfg.alpha * c + (1.0 - cfg.alpha) * temp * (s - t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_cost_log_n() {
        let loss = cross_entropy(&[0.5; 10], 3).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_drives_loss_to_zero() {
        let mut logits = vec![0.0; 5];
        logits[2] = 60.0;
        assert!(cross_entropy(&logits, 2).unwrap() < 1e-12);
    }

    #[test]
    fn stabilized_matches_naive_at_moderate_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let label = rng.gen_range(0..8);
            let naive = -(logits[label].exp() / logits.iter().map(|v| v.exp()).sum::<f64>()).ln();
            let stable = cross_entropy(&logits, label).unwrap();
            assert!((naive - stable).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(cross_entropy(&[0.0; 3], 3), Err(TrainError::BadLabel { .. })));
    }

    #[test]
    fn softmax_sums_to_one_and_loss_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let s: f64 = softmax(&logits).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(cross_entropy(&logits, 0).unwrap() >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = cross_entropy_grad(&logits, 2).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let mut plus = logits.clone();
            plus[i] += h;
            let mut minus = logits.clone();
            minus[i] -= h;
            let fd = (cross_entropy(&plus, 2).unwrap() - cross_entropy(&minus, 2).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn alpha_one_reduces_to_cross_entropy() {
        let cfg = DistillConfig::new(1.0, 4.0, 1.0).unwrap();
        let logits = [0.3, -0.7, 1.2];
        let teacher = [5.0, -3.0, 0.0];
        let a = distill_loss(&logits, &teacher, &cfg, 4.0, 1).unwrap();
        let b = cross_entropy(&logits, 1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn self_distillation_kl_term_is_zero() {
        let cfg = DistillConfig::new(0.0, 4.0, 1.0).unwrap();
        let logits = [0.4, 0.1, -0.9, 2.0];
        let loss = distill_loss(&logits, &logits, &cfg, 2.5, 0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn distill_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DistillConfig::new(0.3, 4.0, 1.0).unwrap();
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let teacher: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let temp = 4.0;
            // direct evaluation without log-space tricks
            let sm = |v: &[f64]| {
                let s: f64 = v.iter().map(|x| (x / temp).exp()).sum();
                v.iter().map(|x| (x / temp).exp() / s).collect::<Vec<f64>>()
            };
            let ps = sm(&logits);
            let pt = sm(&teacher);
            let kl: f64 = pt.iter().zip(&ps).map(|(t, s)| t * (t / s).ln()).sum();
            let naive = 0.3 * cross_entropy(&logits, 2).unwrap() + 0.7 * temp * temp * kl;
            let got = distill_loss(&logits, &teacher, &cfg, temp, 2).unwrap();
            assert!((naive - got).abs() < 1e-10);
            assert!(got >= -1e-12);
        }
    }

    #[test]
    fn distill_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DistillConfig::new(0.4, 4.0, 1.0).unwrap();
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let teacher: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let temp = 3.0;
        let g = distill_grad(&logits, &teacher, &cfg, temp, 1).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let mut plus = logits.clone();
            plus[i] += h;
            let mut minus = logits.clone();
            minus[i] -= h;
            let fd = (distill_loss(&plus, &teacher, &cfg, temp, 1).unwrap()
                - distill_loss(&minus, &teacher, &cfg, temp, 1).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn temperature_ramp_is_linear_and_bounded() {
        let cfg = DistillConfig::default_schedule();
        assert_eq!(cfg.temperature_at(0.0), 4.0);
        assert_eq!(cfg.temperature_at(1.0), 1.0);
        assert_eq!(cfg.temperature_at(0.5), 2.5);
        assert!(cfg.temperature_at(2.0) >= 1.0);
        assert!(DistillConfig::new(0.5, 4.0, 0.5).is_err());
        assert!(DistillConfig::new(1.5, 4.0, 1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = DistillConfig::default_schedule();
        assert!(matches!(
            distill_loss(&[0.0; 3], &[0.0; 4], &cfg, 4.0, 0),
            Err(TrainError::DimensionMismatch(_))
        ));
    }
}
