//! Head losses, their weighting, and classifier score fusion.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::nn::Real;

/// Transition point of the smooth-L1 regression loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Loss weights of the two heads and of each head's unfocused task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub omega_fc: f64,
    pub omega_conv: f64,
    /// Weight of classification inside the fc-head loss.
    pub lambda_fc: f64,
    /// Weight of regression inside the conv-head loss.
    pub lambda_conv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            omega_fc: 2.0,
            omega_conv: 2.5,
            lambda_fc: 0.7,
            lambda_conv: 0.8,
        }
    }
}

impl LossWeights {
    /// Both heads restricted to their focused task.
    pub fn vanilla(omega_fc: f64, omega_conv: f64) -> Self {
        LossWeights {
            omega_fc,
            omega_conv,
            lambda_fc: 1.0,
            lambda_conv: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_omega = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        let check_lambda = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        check_omega("omega_fc", self.omega_fc)?;
        check_omega("omega_conv", self.omega_conv)?;
        check_lambda("lambda_fc", self.lambda_fc)?;
        check_lambda("lambda_conv", self.lambda_conv)
    }

    /// Classifier fusion needs a trained classifier in both heads.
    pub fn fusion_applicable(&self) -> bool {
        self.lambda_fc != 0.0 && self.lambda_conv != 1.0
    }
}

/// Per-step losses. Branches a detector does not have are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_fc: Option<f64>,
    pub l_conv: Option<f64>,
    pub l_rpn: f64,
    pub fc_cls: Option<f64>,
    pub fc_reg: Option<f64>,
    pub conv_cls: Option<f64>,
    pub conv_reg: Option<f64>,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,total,l_fc,l_conv,fc_cls,fc_reg,conv_cls,conv_reg,l_rpn";

    pub fn csv_row(&self, step: usize) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{step},{:.9e},{},{},{},{},{},{},{:.9e}",
            self.total,
            opt(self.l_fc),
            opt(self.l_conv),
            opt(self.fc_cls),
            opt(self.fc_reg),
            opt(self.conv_cls),
            opt(self.conv_reg),
            self.l_rpn
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            Some(self.total),
            self.l_fc,
            self.l_conv,
            Some(self.l_rpn),
            self.fc_cls,
            self.fc_reg,
            self.conv_cls,
            self.conv_reg,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }
}

/// Raw task losses of both heads.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadLosses {
    pub fc_cls: f64,
    pub fc_reg: f64,
    pub conv_cls: f64,
    pub conv_reg: f64,
}

pub fn head_loss_fc(cls: f64, reg: f64, w: &LossWeights) -> f64 {
    w.lambda_fc * cls + (1.0 - w.lambda_fc) * reg
}

/// Note the weight sits on the regression term here.
pub fn head_loss_conv(cls: f64, reg: f64, w: &LossWeights) -> f64 {
    (1.0 - w.lambda_conv) * cls + w.lambda_conv * reg
}

/// Assembles the weighted sum of both head losses plus the proposal loss.
pub fn total_loss(parts: &HeadLosses, w: &LossWeights, l_rpn: f64) -> Result<LossBreakdown> {
    let all = [parts.fc_cls, parts.fc_reg, parts.conv_cls, parts.conv_reg, l_rpn];
    if all.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::contract(format!("loss components must be >= 0, got {all:?}")));
    }
    let l_fc = head_loss_fc(parts.fc_cls, parts.fc_reg, w);
    let l_conv = head_loss_conv(parts.conv_cls, parts.conv_reg, w);
    Ok(LossBreakdown {
        total: w.omega_fc * l_fc + w.omega_conv * l_conv + l_rpn,
        l_fc: Some(l_fc),
        l_conv: Some(l_conv),
        l_rpn,
        fc_cls: Some(parts.fc_cls),
        fc_reg: Some(parts.fc_reg),
        conv_cls: Some(parts.conv_cls),
        conv_reg: Some(parts.conv_reg),
    })
}

/// Softmax cross-entropy of one sample.
pub fn cls_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!("label {label} out of range for {} logits", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Smooth-L1 summed over the four delta components of one foreground sample.
pub fn reg_loss(pred: &BoxDelta, target: &BoxDelta) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1(p - t, SMOOTH_L1_BETA))
        .sum()
}

/// Batch cross-entropy averaged over rows, with its gradient w.r.t. logits.
pub fn batch_cls_loss<T: Real>(logits: &Array2<T>, labels: &[usize]) -> (f64, Array2<T>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "one label per row");
    let mut probs = logits.clone();
    crate::heads::softmax_rows(&mut probs);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.f64()).collect();
        loss += cls_loss(&row, label).expect("label within range");
        probs[[i, label]] -= T::one();
    }
    let scale = T::of(1.0 / n as f64);
    probs.mapv_inplace(|v| v * scale);
    (loss / n as f64, probs)
}

/// Result of the class-specific regression loss over a batch.
#[derive(Debug, Clone)]
pub struct RegLossOutput<T> {
    pub loss: f64,
    pub grad: Array2<T>,
    /// Zero means the batch had no foreground and the loss was defined as 0.
    pub foreground: usize,
}

/// Smooth-L1 over the true-class delta slice of every foreground row,
/// averaged over the foreground count. `pred` is `(N, 4C)`.
pub fn batch_reg_loss<T: Real>(pred: &Array2<T>, labels: &[usize], targets: &[Option<[f64; 4]>]) -> RegLossOutput<T> {
    let mut grad = Array2::zeros(pred.raw_dim());
    let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    if fg.is_empty() {
        return RegLossOutput {
            loss: 0.0,
            grad,
            foreground: 0,
        };
    }
    let inv = 1.0 / fg.len() as f64;
    let mut loss = 0.0;
    for &i in &fg {
        let t = targets[i].expect("foreground rows carry targets");
        let base = 4 * (labels[i] - 1);
        for k in 0..4 {
            let d = pred[[i, base + k]].f64() - t[k];
            loss += smooth_l1(d, SMOOTH_L1_BETA);
            grad[[i, base + k]] = T::of(smooth_l1_grad(d, SMOOTH_L1_BETA) * inv);
        }
    }
    RegLossOutput {
        loss: loss * inv,
        grad,
        foreground: fg.len(),
    }
}

/// Foreground class probabilities; index 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores(pub Vec<f64>);

impl ClassScores {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        ClassScores(exp.into_iter().map(|v| v / sum).collect())
    }

    pub fn foreground(&self) -> &[f64] {
        &self.0[1..]
    }
}

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::contract(format!("{name} score {bad} outside [0, 1]")));
    }
    Ok(())
}

fn fuse_with(s_fc: &ClassScores, s_conv: &ClassScores, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    if s_fc.0.len() != s_conv.0.len() {
        return Err(Error::contract("fused score vectors differ in length"));
    }
    check_unit("fc", &s_fc.0)?;
    check_unit("conv", &s_conv.0)?;
    Ok(s_fc
        .foreground()
        .iter()
        .zip(s_conv.foreground())
        .map(|(&a, &b)| f(a, b))
        .collect())
}

pub fn complementary(a: f64, b: f64) -> f64 {
    a + b * (1.0 - a)
}

/// Complementary fusion over the foreground classes; returns `C` scores.
pub fn fuse_complementary(s_fc: &ClassScores, s_conv: &ClassScores) -> Result<Vec<f64>> {
    fuse_with(s_fc, s_conv, complementary)
}

pub fn fuse_max(s_fc: &ClassScores, s_conv: &ClassScores) -> Result<Vec<f64>> {
    fuse_with(s_fc, s_conv, f64::max)
}

pub fn fuse_avg(s_fc: &ClassScores, s_conv: &ClassScores) -> Result<Vec<f64>> {
    fuse_with(s_fc, s_conv, |a, b| 0.5 * (a + b))
}

/// How a detector turns two classifiers into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Complementary,
    Max,
    Average,
    /// fc-head scores only.
    None,
}

impl FusionMethod {
    pub fn apply(&self, s_fc: &ClassScores, s_conv: &ClassScores) -> Result<Vec<f64>> {
        match self {
            FusionMethod::Complementary => fuse_complementary(s_fc, s_conv),
            FusionMethod::Max => fuse_max(s_fc, s_conv),
            FusionMethod::Average => fuse_avg(s_fc, s_conv),
            FusionMethod::None => {
                check_unit("fc", &s_fc.0)?;
                Ok(s_fc.foreground().to_vec())
            }
        }
    }
}
