//! Per-proposal records, IoU-binned moments and Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::detector::HeadKind;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const NUM_BINS: usize = 20;

/// What one head made of one proposal; a field is `None` when the head
/// does not provide that output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    /// Probability of the ground-truth class.
    pub score: Option<f64>,
    /// Proposal regressed with the ground-truth class deltas.
    pub regressed: Option<BBox>,
    pub regressed_iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub object: usize,
    pub image_id: u64,
    pub class_id: usize,
    pub proposal: BBox,
    pub gt: BBox,
    pub proposal_iou: f64,
    pub fc: HeadEval,
    pub conv: HeadEval,
}

impl ProposalRecord {
    pub fn head(&self, kind: HeadKind) -> &HeadEval {
        match kind {
            HeadKind::Fc => &self.fc,
            HeadKind::Conv => &self.conv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    ClsScore,
    RegIou,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::ClsScore => "cls_score",
            Quantity::RegIou => "reg_iou",
        }
    }
}

/// A per-record value: one quantity of one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Metric {
    pub head: HeadKind,
    pub quantity: Quantity,
}

impl Metric {
    pub fn value(&self, r: &ProposalRecord) -> Option<f64> {
        let h = r.head(self.head);
        match self.quantity {
            Quantity::ClsScore => h.score,
            Quantity::RegIou => h.regressed_iou,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean: Option<f64>,
    /// Population standard deviation; `None` for empty bins.
    pub std: Option<f64>,
}

/// Bin of an IoU: `floor(iou * 20)`, with 1.0 in the top bin.
pub fn iou_bin(iou: f64) -> usize {
    ((iou * NUM_BINS as f64).floor() as usize).min(NUM_BINS - 1)
}

/// Groups `(proposal_iou, value)` pairs by bin and returns 20 bins of mean and population std.
pub fn bin_values(pairs: impl IntoIterator<Item = (f64, f64)>) -> Vec<BinStats> {
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); NUM_BINS];
    for (iou, v) in pairs {
        groups[iou_bin(iou)].push(v);
    }
    groups
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let n = g.len();
            let (mean, std) = if n == 0 {
                (None, None)
            } else {
                let m = g.iter().sum::<f64>() / n as f64;
                let var = g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                (Some(m), Some(var.sqrt()))
            };
            BinStats {
                bin: b,
                lo: b as f64 / NUM_BINS as f64,
                hi: (b + 1) as f64 / NUM_BINS as f64,
                count: n,
                mean,
                std,
            }
        })
        .collect()
}

pub fn bin_by_iou(records: &[ProposalRecord], metric: Metric) -> Result<Vec<BinStats>> {
    if records.is_empty() {
        return Err(Error::contract("binning needs at least one record"));
    }
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .map(|r| metric.value(r).map(|v| (r.proposal_iou, v)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Unavailable(format!("{} of the {:?} head", metric.quantity.name(), metric.head)))?;
    Ok(bin_values(pairs))
}

/// Pearson correlation from a single pass of running centred moments.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} samples", x.len())));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
