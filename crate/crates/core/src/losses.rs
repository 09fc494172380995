//! Cross-entropy, temperature-softened distillation divergence and the
//! combined student objectives.
//!
//! All reductions are batch means accumulated in `f64`. The distillation
//! term is `tau^2 * KL(teacher || student)` over `softmax(logits / tau)`;
//! the teacher side is always treated as a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub probs: Tensor,
    pub temperature: f32,
}

fn check_tau(tau: f32) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn check_logits(logits: &Tensor) -> Result<()> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "logits must be (batch, classes), got {:?}",
            logits.shape()
        )));
    }
    Ok(())
}

/// Row-wise `log softmax(row / tau)` in f64, stabilised by max subtraction.
fn log_softmax_row(row: &[f32], tau: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / tau));
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v as f64 / tau - max;
        sum += o.exp();
    }
    let log_sum = sum.ln();
    out.iter_mut().for_each(|o| *o -= log_sum);
}

pub fn softmax_t(logits: &Tensor, tau: f32) -> Result<SoftTargets> {
    check_tau(tau)?;
    check_logits(logits)?;
    let k = logits.shape()[1];
    let mut buf = vec![0.0f64; k];
    let mut data = Vec::with_capacity(logits.len());
    for r in 0..logits.batch() {
        log_softmax_row(logits.row(r), tau as f64, &mut buf);
        data.extend(buf.iter().map(|&l| l.exp() as f32));
    }
    Ok(SoftTargets {
        probs: Tensor::from_parts(logits.shape().to_vec(), data),
        temperature: tau,
    })
}

/// One-hot encoding of class ids.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (r, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {c} out of range for {classes} classes"
            )));
        }
        data[r * classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Class id of every one-hot row; rejects rows that are not one-hot.
fn decode_one_hot(labels: &Tensor) -> Result<Vec<usize>> {
    (0..labels.batch())
        .map(|r| {
            let row = labels.row(r);
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() != 1 || zeros != row.len() - 1 {
                return Err(Error::InvalidArgument(format!("label row {r} is not one-hot")));
            }
            Ok(ones[0])
        })
        .collect()
}

/// Mean over the batch of `-ln max(p_true, 1e-12)`.
pub fn cross_entropy(probs: &SoftTargets, labels: &Tensor) -> Result<f64> {
    if probs.probs.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "probabilities {:?} and labels {:?} differ",
            probs.probs.shape(),
            labels.shape()
        )));
    }
    let classes = decode_one_hot(labels)?;
    let total: f64 = classes
        .iter()
        .enumerate()
        .map(|(r, &c)| -(probs.probs.row(r)[c] as f64).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / classes.len() as f64)
}

/// Cross-entropy of `softmax(logits)` against integer labels, with its
/// gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    check_logits(logits)?;
    let (b, k) = (logits.batch(), logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut buf = vec![0.0f64; k];
    let mut grad = Vec::with_capacity(b * k);
    let mut total = 0.0f64;
    for (r, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!("label {c} out of range for {k} classes")));
        }
        log_softmax_row(logits.row(r), 1.0, &mut buf);
        total -= buf[c].max(PROB_FLOOR.ln());
        for (j, &l) in buf.iter().enumerate() {
            let target = if j == c { 1.0 } else { 0.0 };
            grad.push(((l.exp() - target) / b as f64) as f32);
        }
    }
    Ok((total / b as f64, Tensor::from_parts(vec![b, k], grad)))
}

fn check_pair(teacher: &Tensor, student: &Tensor) -> Result<()> {
    check_logits(student)?;
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} and student logits {:?} differ",
            teacher.shape(),
            student.shape()
        )));
    }
    Ok(())
}

/// `tau^2 * mean_batch KL(softmax(teacher/tau) || softmax(student/tau))`.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, tau: f32) -> Result<f64> {
    Ok(kd_loss_with_grad(teacher_logits, student_logits, tau)?.0)
}

/// Distillation loss and its gradient with respect to the student logits,
/// `tau * (p_student - p_teacher) / batch`.
pub fn kd_loss_with_grad(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    tau: f32,
) -> Result<(f64, Tensor)> {
    check_tau(tau)?;
    check_pair(teacher_logits, student_logits)?;
    let (b, k) = (student_logits.batch(), student_logits.shape()[1]);
    let tau = tau as f64;
    let mut lt = vec![0.0f64; k];
    let mut ls = vec![0.0f64; k];
    let mut grad = Vec::with_capacity(b * k);
    let mut total = 0.0f64;
    for r in 0..b {
        log_softmax_row(teacher_logits.row(r), tau, &mut lt);
        log_softmax_row(student_logits.row(r), tau, &mut ls);
        for (&t, &s) in lt.iter().zip(&ls) {
            let pt = t.exp();
            if pt > 0.0 {
                total += pt * (t - s);
            }
            grad.push((tau * (s.exp() - pt) / b as f64) as f32);
        }
    }
    // KL is non-negative; clamp rounding residue.
    let loss = (tau * tau * total / b as f64).max(0.0);
    Ok((loss, Tensor::from_parts(vec![b, k], grad)))
}

/// How the cross-entropy and distillation terms are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `(1 - lambda) * ce + lambda * kd`, lambda in [0, 1].
    Convex,
    /// `ce + lambda * kd`, lambda >= 0.
    #[default]
    Additive,
}

impl LambdaMode {
    pub fn check(self, lambda: f64) -> Result<()> {
        let ok = match self {
            LambdaMode::Convex => (0.0..=1.0).contains(&lambda),
            LambdaMode::Additive => lambda >= 0.0 && lambda.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "lambda {lambda} outside the valid range for {self:?} weighting"
            )));
        }
        Ok(())
    }

    /// Weights applied to (ce, kd).
    fn weights(self, lambda: f64) -> (f64, f64) {
        match self {
            LambdaMode::Convex => (1.0 - lambda, lambda),
            LambdaMode::Additive => (1.0, lambda),
        }
    }
}

pub fn student_loss(ce: f64, kd: f64, lambda: f64, mode: LambdaMode) -> Result<f64> {
    mode.check(lambda)?;
    let (wc, wk) = mode.weights(lambda);
    Ok(wc * ce + wk * kd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
    pub lambda: f64,
    pub mode: LambdaMode,
}

impl LossBreakdown {
    fn combine(ce: f64, kd: f64, lambda: f64, mode: LambdaMode) -> Result<Self> {
        let total = student_loss(ce, kd, lambda, mode)?;
        Ok(LossBreakdown {
            ce,
            kd,
            total,
            lambda,
            mode,
        })
    }
}

/// Loss for one curriculum stage: `ce(labels, student) + lambda * kd(teacher, student)`.
pub fn slkd_stage_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    lambda: f64,
    tau: f32,
) -> Result<LossBreakdown> {
    Ok(objective_with_grad(
        &Objective::Distill {
            tau,
            lambda,
            mode: LambdaMode::Additive,
        },
        student_logits,
        Some(teacher_logits),
        labels,
    )?
    .0)
}

/// A training objective over student logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Plain cross-entropy against the labels.
    Supervised,
    /// Cross-entropy combined with distillation from teacher logits.
    Distill {
        tau: f32,
        lambda: f64,
        mode: LambdaMode,
    },
}

impl Objective {
    pub fn needs_teacher(&self) -> bool {
        matches!(self, Objective::Distill { .. })
    }
}

/// Loss breakdown and gradient with respect to the student logits.
pub fn objective_with_grad(
    objective: &Objective,
    student_logits: &Tensor,
    teacher_logits: Option<&Tensor>,
    labels: &[usize],
) -> Result<(LossBreakdown, Tensor)> {
    let (ce, ce_grad) = cross_entropy_with_grad(student_logits, labels)?;
    match *objective {
        Objective::Supervised => Ok((LossBreakdown::combine(ce, 0.0, 0.0, LambdaMode::Additive)?, ce_grad)),
        Objective::Distill { tau, lambda, mode } => {
            let teacher = teacher_logits.ok_or_else(|| {
                Error::InvalidArgument("distillation objective needs teacher logits".into())
            })?;
            let (kd, kd_grad) = kd_loss_with_grad(teacher, student_logits, tau)?;
            let breakdown = LossBreakdown::combine(ce, kd, lambda, mode)?;
            let (wc, wk) = mode.weights(lambda);
            let grad = ce_grad
                .data()
                .iter()
                .zip(kd_grad.data())
                .map(|(&c, &k)| (wc * c as f64 + wk * k as f64) as f32)
                .collect();
            Ok((breakdown, Tensor::from_parts(ce_grad.shape().to_vec(), grad)))
        }
    }
}
