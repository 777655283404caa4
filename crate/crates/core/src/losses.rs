//! Classification and distillation objectives.
//!
//! The mutual-learning pair trains a personalized ("local") model and a
//! forked global ("meme") model on the same batch:
//!
//! ```text
//! L_local = alpha * CE(local, y) + (1 - alpha) * KL(p_meme || p_local)
//! L_meme  = beta  * CE(meme,  y) + (1 - beta)  * KL(p_local || p_meme)
//! ```
//!
//! In each term the other model's distribution is a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Interpolates from `(alpha, beta)` at round 0 to the given endpoints at
    /// the final round.
    Linear { alpha_end: f64, beta_end: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "half")]
    pub beta: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "constant")]
    pub schedule: Schedule,
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

fn constant() -> Schedule {
    Schedule::Constant
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            temperature: 1.0,
            schedule: Schedule::Constant,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        if let Schedule::Linear { alpha_end, beta_end } = self.schedule {
            unit("alpha_end", alpha_end)?;
            unit("beta_end", beta_end)?;
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::param(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `(alpha_t, beta_t)` for round `t` of `total`.
pub fn schedule_alphabeta(round: usize, total: usize, cfg: &DistillConfig) -> (f64, f64) {
    match cfg.schedule {
        Schedule::Constant => (cfg.alpha, cfg.beta),
        Schedule::Linear { alpha_end, beta_end } => {
            let frac = if total == 0 {
                0.0
            } else {
                round.min(total) as f64 / total as f64
            };
            (
                cfg.alpha + frac * (alpha_end - cfg.alpha),
                cfg.beta + frac * (beta_end - cfg.beta),
            )
        }
    }
}

pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `KL(p_teacher || p_student)`; no gradient reaches `teacher`.
pub fn kl_divergence<T: Element>(
    tape: &mut Tape<T>,
    teacher: Var,
    student: Var,
    temperature: f64,
) -> Result<Var> {
    tape.kl_div(teacher, student, temperature)
}

/// `weight * CE(student, y) + (1 - weight) * KL(teacher || student)`.
fn mutual<T: Element>(
    tape: &mut Tape<T>,
    student: Var,
    teacher: Var,
    labels: &[usize],
    weight: f64,
    temperature: f64,
) -> Result<Var> {
    unit("loss weight", weight)?;
    let ce = tape.cross_entropy(student, labels)?;
    let kl = tape.kl_div(teacher, student, temperature)?;
    let a = tape.scale(ce, T::from_f64_lossy(weight));
    let b = tape.scale(kl, T::from_f64_lossy(1.0 - weight));
    tape.add(a, b)
}

pub fn fml_local_loss<T: Element>(
    tape: &mut Tape<T>,
    local_logits: Var,
    meme_logits: Var,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    mutual(tape, local_logits, meme_logits, labels, alpha, temperature)
}

pub fn fml_meme_loss<T: Element>(
    tape: &mut Tape<T>,
    meme_logits: Var,
    local_logits: Var,
    labels: &[usize],
    beta: f64,
    temperature: f64,
) -> Result<Var> {
    mutual(tape, meme_logits, local_logits, labels, beta, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(tape: &mut Tape<f64>, rows: &[&[f64]], trainable: bool) -> Var {
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let t = Tensor::from_f64(vec![rows.len(), c], &data).unwrap();
        if trainable { tape.param(t) } else { tape.constant(t) }
    }

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[&[0.0; 10]], false);
        let l = cross_entropy(&mut tape, z, &[3]).unwrap();
        assert!((value(&tape, l) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_row() {
        let mut row = [0.0; 10];
        row[0] = 10.0;
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[&row], false);
        let l = cross_entropy(&mut tape, z, &[0]).unwrap();
        let expected = (1.0 + 9.0 * (-10f64).exp()).ln();
        assert!((value(&tape, l) - expected).abs() < 1e-15);
        assert!((value(&tape, l) - 4.086e-4).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_is_a_batch_mean() {
        let row: &[f64] = &[0.3, -1.2, 2.0];
        let mut tape = Tape::new();
        let one = logits(&mut tape, &[row], false);
        let two = logits(&mut tape, &[row, row], false);
        let a = cross_entropy(&mut tape, one, &[2]).unwrap();
        let b = cross_entropy(&mut tape, two, &[2, 2]).unwrap();
        assert!((value(&tape, a) - value(&tape, b)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[&[0.0, 1.0]], false);
        assert!(matches!(cross_entropy(&mut tape, z, &[2]), Err(Error::Parameter(_))));
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let a = logits(&mut tape, &[&[0.2, -0.7, 1.5]], false);
        let same = kl_divergence(&mut tape, a, a, 1.0).unwrap();
        assert!(value(&tape, same).abs() < 1e-12);

        let t = logits(&mut tape, &[&[50.0, -50.0]], false);
        let s = logits(&mut tape, &[&[0.0, 0.0]], false);
        let l = kl_divergence(&mut tape, t, s, 1.0).unwrap();
        assert!((value(&tape, l) - 2f64.ln()).abs() < 1e-9);

        let t = logits(&mut tape, &[&[3f64.ln(), 0.0]], false);
        let l = kl_divergence(&mut tape, t, s, 1.0).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((value(&tape, l) - expected).abs() < 1e-12);
        assert!((value(&tape, l) - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut tape = Tape::new();
        let a = logits(&mut tape, &[&[0.0, 1.0]], false);
        let b = logits(&mut tape, &[&[0.0, 1.0, 2.0]], false);
        assert!(matches!(kl_divergence(&mut tape, a, b, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn kl_temperature_scaling() {
        // tau = 2: tau^2 * KL(softmax(t/2) || softmax(s/2))
        let mut tape = Tape::new();
        let t = logits(&mut tape, &[&[2.0, 0.0]], false);
        let s = logits(&mut tape, &[&[0.0, 0.0]], false);
        let l = kl_divergence(&mut tape, t, s, 2.0).unwrap();
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = 4.0 * (p * (p / 0.5).ln() + (1.0 - p) * ((1.0 - p) / 0.5).ln());
        assert!((value(&tape, l) - expected).abs() < 1e-12);
    }

    #[test]
    fn no_gradient_reaches_teacher() {
        let mut tape = Tape::new();
        let t = logits(&mut tape, &[&[1.0, -2.0, 0.5]], true);
        let s = logits(&mut tape, &[&[0.0, 0.4, -0.1]], true);
        let l = kl_divergence(&mut tape, t, s, 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(t).is_none());
        assert!(g.get(s).is_some());
    }

    #[test]
    fn local_loss_endpoints_and_midpoint() {
        let local: &[f64] = &[0.5, -0.25, 1.0];
        let meme: &[f64] = &[-0.5, 0.75, 0.0];
        let y = [2usize];
        let eval = |alpha: f64, a: &[f64], b: &[f64]| {
            let mut tape = Tape::new();
            let l = logits(&mut tape, &[a], true);
            let m = logits(&mut tape, &[b], false);
            let v = fml_local_loss(&mut tape, l, m, &y, alpha, 1.0).unwrap();
            value(&tape, v)
        };
        let ce = {
            let mut tape = Tape::new();
            let l = logits(&mut tape, &[local], false);
            let v = cross_entropy(&mut tape, l, &y).unwrap();
            value(&tape, v)
        };
        assert_eq!(eval(1.0, local, meme), ce);
        assert!(eval(0.0, local, local).abs() < 1e-12);

        // Scalar oracle for alpha = 0.5.
        let sm = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (pl, pm) = (sm(local), sm(meme));
        let ce_oracle = -pl[2].ln();
        let kl_oracle: f64 = pm.iter().zip(&pl).map(|(a, b)| a * (a / b).ln()).sum();
        let mid = eval(0.5, local, meme);
        assert!((mid - (0.5 * ce_oracle + 0.5 * kl_oracle)).abs() < 1e-12);
        // affine in alpha
        let (e0, e1) = (eval(0.0, local, meme), eval(1.0, local, meme));
        assert!((mid - 0.5 * (e0 + e1)).abs() < 1e-12);
    }

    #[test]
    fn meme_loss_mirrors_local_loss() {
        let a: &[f64] = &[0.1, 0.9, -0.3];
        let b: &[f64] = &[1.1, -0.4, 0.2];
        let mut tape = Tape::new();
        let va = logits(&mut tape, &[a], true);
        let vb = logits(&mut tape, &[b], true);
        let m = fml_meme_loss(&mut tape, va, vb, &[1], 0.3, 1.0).unwrap();
        let l = fml_local_loss(&mut tape, va, vb, &[1], 0.3, 1.0).unwrap();
        assert_eq!(value(&tape, m), value(&tape, l));

        let ce = cross_entropy(&mut tape, va, &[1]).unwrap();
        let pure = fml_meme_loss(&mut tape, va, vb, &[1], 1.0, 1.0).unwrap();
        assert_eq!(value(&tape, pure), value(&tape, ce));
        let zero = fml_meme_loss(&mut tape, va, va, &[1], 0.0, 1.0).unwrap();
        assert!(value(&tape, zero).abs() < 1e-12);
    }

    #[test]
    fn meme_loss_gradient_only_to_meme() {
        let mut tape = Tape::new();
        let meme = logits(&mut tape, &[&[0.1, 0.2]], true);
        let local = logits(&mut tape, &[&[0.7, -0.2]], true);
        let l = fml_meme_loss(&mut tape, meme, local, &[0], 0.5, 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(local).is_none());
        assert!(g.get(meme).is_some());
    }

    #[test]
    fn schedules() {
        let c = DistillConfig::default();
        for t in [0, 3, 10] {
            assert_eq!(schedule_alphabeta(t, 10, &c), (0.5, 0.5));
        }
        let lin = DistillConfig {
            alpha: 0.8,
            beta: 0.2,
            schedule: Schedule::Linear { alpha_end: 0.2, beta_end: 0.8 },
            ..DistillConfig::default()
        };
        assert_eq!(schedule_alphabeta(0, 10, &lin), (0.8, 0.2));
        let (a, b) = schedule_alphabeta(10, 10, &lin);
        assert!((a - 0.2).abs() < 1e-15 && (b - 0.8).abs() < 1e-15);
        let (a, b) = schedule_alphabeta(5, 10, &lin);
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig { alpha: 1.5, ..DistillConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DistillConfig { temperature: 0.0, ..DistillConfig::default() };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            schedule: Schedule::Linear { alpha_end: -0.1, beta_end: 0.5 },
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
