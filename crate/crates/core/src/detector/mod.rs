//! Backbone, RoI pooling, head routing per variant, losses and gradients.

pub mod backbone;
pub mod checkpoint;
pub mod infer;
pub mod roi_align;
pub mod sampler;
pub mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_delta, BBox, BoxDelta};
use crate::heads::{classifier, regressor, ConvHead, ConvHeadCache, FcCache, FcHead, HeadConfig, HeadDims};
use crate::nn::{join, FeatureMap, Init, Linear, Mode, Module, Param, Real};
use crate::objectives::{batch_cls_loss, batch_reg_loss, ClassScores, FusionMethod, LossBreakdown, LossWeights};

pub use backbone::{Backbone, BackboneConfig};
pub use roi_align::{roi_align, roi_align_backward, Roi, RoiAlignParams};
pub use sampler::{sample_proposals, Proposal, ProposalBatch, SamplerConfig};

/// Scale applied to regression targets before the loss (centre, centre,
/// width, height); predictions are divided by it when decoding.
pub const DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Which head performs which task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorVariant {
    SingleFc,
    SingleConv,
    DoubleFc,
    DoubleConv,
    DoubleHead,
    DoubleHeadReverse,
    DoubleHeadExt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Fc,
    Conv,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Fc => "fc",
            HeadKind::Conv => "conv",
        }
    }
}

/// One head-task pairing; a variant trains a subset of the four.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FcCls,
    FcReg,
    ConvCls,
    ConvReg,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::FcCls, Task::FcReg, Task::ConvCls, Task::ConvReg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_cls(self) -> bool {
        matches!(self, Task::FcCls | Task::ConvCls)
    }

    pub fn kind(self) -> HeadKind {
        match self {
            Task::FcCls | Task::FcReg => HeadKind::Fc,
            Task::ConvCls | Task::ConvReg => HeadKind::Conv,
        }
    }

    pub fn cls_of(kind: HeadKind) -> Task {
        match kind {
            HeadKind::Fc => Task::FcCls,
            HeadKind::Conv => Task::ConvCls,
        }
    }

    pub fn reg_of(kind: HeadKind) -> Task {
        match kind {
            HeadKind::Fc => Task::FcReg,
            HeadKind::Conv => Task::ConvReg,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::FcCls => "fc_cls",
            Task::FcReg => "fc_reg",
            Task::ConvCls => "conv_cls",
            Task::ConvReg => "conv_reg",
        })
    }
}

/// A named head instance and the tasks it is supervised on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotSpec {
    pub name: &'static str,
    pub kind: HeadKind,
    pub tasks: &'static [Task],
}

const fn slot(name: &'static str, kind: HeadKind, tasks: &'static [Task]) -> SlotSpec {
    SlotSpec { name, kind, tasks }
}

const SINGLE_FC: [SlotSpec; 1] = [slot("fc_head", HeadKind::Fc, &[Task::FcCls, Task::FcReg])];
const SINGLE_CONV: [SlotSpec; 1] = [slot("conv_head", HeadKind::Conv, &[Task::ConvCls, Task::ConvReg])];
const DOUBLE_FC: [SlotSpec; 2] = [
    slot("fc_cls_head", HeadKind::Fc, &[Task::FcCls]),
    slot("fc_reg_head", HeadKind::Fc, &[Task::FcReg]),
];
const DOUBLE_CONV: [SlotSpec; 2] = [
    slot("conv_cls_head", HeadKind::Conv, &[Task::ConvCls]),
    slot("conv_reg_head", HeadKind::Conv, &[Task::ConvReg]),
];
const DOUBLE_HEAD: [SlotSpec; 2] = [
    slot("fc_head", HeadKind::Fc, &[Task::FcCls]),
    slot("conv_head", HeadKind::Conv, &[Task::ConvReg]),
];
const DOUBLE_HEAD_REVERSE: [SlotSpec; 2] = [
    slot("fc_head", HeadKind::Fc, &[Task::FcReg]),
    slot("conv_head", HeadKind::Conv, &[Task::ConvCls]),
];
const DOUBLE_HEAD_EXT: [SlotSpec; 2] = [
    slot("fc_head", HeadKind::Fc, &[Task::FcCls, Task::FcReg]),
    slot("conv_head", HeadKind::Conv, &[Task::ConvCls, Task::ConvReg]),
];

impl DetectorVariant {
    pub const ALL: [DetectorVariant; 7] = [
        DetectorVariant::SingleFc,
        DetectorVariant::SingleConv,
        DetectorVariant::DoubleFc,
        DetectorVariant::DoubleConv,
        DetectorVariant::DoubleHead,
        DetectorVariant::DoubleHeadReverse,
        DetectorVariant::DoubleHeadExt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorVariant::SingleFc => "single_fc",
            DetectorVariant::SingleConv => "single_conv",
            DetectorVariant::DoubleFc => "double_fc",
            DetectorVariant::DoubleConv => "double_conv",
            DetectorVariant::DoubleHead => "double_head",
            DetectorVariant::DoubleHeadReverse => "double_head_reverse",
            DetectorVariant::DoubleHeadExt => "double_head_ext",
        }
    }

    pub fn routing(self) -> &'static [SlotSpec] {
        match self {
            DetectorVariant::SingleFc => &SINGLE_FC,
            DetectorVariant::SingleConv => &SINGLE_CONV,
            DetectorVariant::DoubleFc => &DOUBLE_FC,
            DetectorVariant::DoubleConv => &DOUBLE_CONV,
            DetectorVariant::DoubleHead => &DOUBLE_HEAD,
            DetectorVariant::DoubleHeadReverse => &DOUBLE_HEAD_REVERSE,
            DetectorVariant::DoubleHeadExt => &DOUBLE_HEAD_EXT,
        }
    }

    /// Slot and head kind that carry `task`, if the variant has it.
    pub fn slot_of(self, task: Task) -> Option<&'static SlotSpec> {
        self.routing().iter().find(|s| s.tasks.contains(&task))
    }

    /// Whether the two head losses are weighted by `omega_fc`/`omega_conv`.
    /// Variants built from one head kind use unit weights.
    pub fn uses_head_weights(self) -> bool {
        matches!(
            self,
            DetectorVariant::DoubleHead | DetectorVariant::DoubleHeadReverse | DetectorVariant::DoubleHeadExt
        )
    }
}

impl fmt::Display for DetectorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown detector variant `{s}`")))
    }
}

/// Everything needed to rebuild a detector's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub variant: DetectorVariant,
    pub num_classes: usize,
    pub dims: HeadDims,
    pub head: HeadConfig,
    pub backbone: BackboneConfig,
    /// Bilinear samples per RoI cell along each axis.
    pub roi_sampling: usize,
    pub weights: LossWeights,
    /// Score combination at inference when both classifiers are trained.
    pub fusion: FusionMethod,
}

impl DetectorSpec {
    pub fn new(variant: DetectorVariant, num_classes: usize) -> Self {
        DetectorSpec {
            variant,
            num_classes,
            dims: HeadDims::default(),
            head: HeadConfig::default(),
            backbone: BackboneConfig::default(),
            roi_sampling: 2,
            weights: LossWeights::default(),
            fusion: FusionMethod::Complementary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.roi_sampling == 0 {
            return Err(Error::Config("roi_sampling must be positive".into()));
        }
        if self.dims.roi_channels == 0 || self.dims.pool == 0 || self.dims.hidden == 0 || self.dims.bottleneck == 0 {
            return Err(Error::Config("head dims must all be positive".into()));
        }
        self.weights.validate()?;
        if self.variant.routing().iter().any(|s| s.kind == HeadKind::Conv) {
            self.head.validate()?;
        }
        Ok(())
    }

    pub fn roi_params(&self) -> RoiAlignParams {
        RoiAlignParams {
            output_size: self.dims.pool,
            sampling: self.roi_sampling,
            stride: self.backbone.stride() as f64,
        }
    }

    /// Share of `task` inside its head loss, `None` when the variant lacks it.
    pub fn task_share(&self, task: Task) -> Option<f64> {
        self.variant.slot_of(task)?;
        let w = &self.weights;
        Some(match (self.variant, task) {
            (DetectorVariant::DoubleHeadExt, Task::FcCls) => w.lambda_fc,
            (DetectorVariant::DoubleHeadExt, Task::FcReg) => 1.0 - w.lambda_fc,
            (DetectorVariant::DoubleHeadExt, Task::ConvCls) => 1.0 - w.lambda_conv,
            (DetectorVariant::DoubleHeadExt, Task::ConvReg) => w.lambda_conv,
            _ => 1.0,
        })
    }

    pub fn head_weight(&self, kind: HeadKind) -> f64 {
        match (self.variant.uses_head_weights(), kind) {
            (false, _) => 1.0,
            (true, HeadKind::Fc) => self.weights.omega_fc,
            (true, HeadKind::Conv) => self.weights.omega_conv,
        }
    }

    /// d(total)/d(task loss).
    pub fn coefficient(&self, task: Task) -> Option<f64> {
        Some(self.task_share(task)? * self.head_weight(task.kind()))
    }

    /// A task output is usable only if the variant trains it with a
    /// non-zero share.
    pub fn available(&self, task: Task) -> bool {
        self.task_share(task).is_some_and(|s| s > 0.0)
    }

    pub fn check_available(&self, task: Task) -> Result<()> {
        if self.available(task) {
            Ok(())
        } else {
            Err(Error::Unavailable(format!(
                "{task} is not trained by {} (lambda_fc={}, lambda_conv={})",
                self.variant, self.weights.lambda_fc, self.weights.lambda_conv
            )))
        }
    }

    /// Classification source used at inference.
    pub fn score_source(&self) -> ScoreSource {
        let fc = self.available(Task::FcCls);
        let conv = self.available(Task::ConvCls);
        match (fc, conv) {
            (true, true) if self.fusion != FusionMethod::None && self.weights.fusion_applicable() => {
                ScoreSource::Fused(self.fusion)
            }
            (true, _) => ScoreSource::Task(Task::FcCls),
            _ => ScoreSource::Task(Task::ConvCls),
        }
    }

    /// Regression source used at inference; conv regression wins when both
    /// heads regress.
    pub fn regression_source(&self) -> Task {
        if self.available(Task::ConvReg) {
            Task::ConvReg
        } else {
            Task::FcReg
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    Task(Task),
    Fused(FusionMethod),
}

#[derive(Debug, Clone)]
pub enum HeadBody<T> {
    Fc(FcHead<T>),
    Conv(ConvHead<T>),
}

#[derive(Debug, Clone)]
enum BodyCache<T> {
    Fc(FcCache<T>),
    Conv(ConvHeadCache<T>),
}

/// One head instance with the output layers its tasks need.
#[derive(Debug, Clone)]
pub struct HeadSlot<T> {
    pub spec: SlotSpec,
    pub body: HeadBody<T>,
    pub cls: Option<Linear<T>>,
    pub reg: Option<Linear<T>>,
}

impl<T: Real> HeadSlot<T> {
    fn new(init: &Init, spec: SlotSpec, dims: HeadDims, head: HeadConfig, num_classes: usize) -> Result<Self> {
        let init = init.child(spec.name);
        let body = match spec.kind {
            HeadKind::Fc => HeadBody::Fc(FcHead::new(&init, dims)),
            HeadKind::Conv => HeadBody::Conv(ConvHead::new(&init, dims, head)?),
        };
        let cls = spec
            .tasks
            .iter()
            .any(|t| t.is_cls())
            .then(|| classifier(&init.child("cls"), dims.hidden, num_classes));
        let reg = spec
            .tasks
            .iter()
            .any(|t| !t.is_cls())
            .then(|| regressor(&init.child("reg"), dims.hidden, num_classes));
        Ok(HeadSlot { spec, body, cls, reg })
    }
}

impl<T: Real> Module<T> for HeadSlot<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        let prefix = join(prefix, self.spec.name);
        match &self.body {
            HeadBody::Fc(h) => h.visit(&prefix, f),
            HeadBody::Conv(h) => h.visit(&prefix, f),
        }
        if let Some(l) = &self.cls {
            l.visit(&join(&prefix, "cls"), f);
        }
        if let Some(l) = &self.reg {
            l.visit(&join(&prefix, "reg"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let prefix = join(prefix, self.spec.name);
        match &mut self.body {
            HeadBody::Fc(h) => h.visit_mut(&prefix, f),
            HeadBody::Conv(h) => h.visit_mut(&prefix, f),
        }
        if let Some(l) = &mut self.cls {
            l.visit_mut(&join(&prefix, "cls"), f);
        }
        if let Some(l) = &mut self.reg {
            l.visit_mut(&join(&prefix, "reg"), f);
        }
    }
}

/// Forward results of one slot over a batch of RoIs.
#[derive(Debug, Clone)]
pub struct SlotOutput<T> {
    /// `(R, hidden)` head vector.
    pub feature: Array2<T>,
    /// `(R, C+1)` logits.
    pub cls: Option<Array2<T>>,
    /// `(R, 4C)` deltas in target scale.
    pub reg: Option<Array2<T>>,
    /// Pre-pooling map of a conv head.
    pub map: Option<FeatureMap<T>>,
    cache: BodyCache<T>,
}

/// Head outputs of every slot, addressed by task.
#[derive(Debug, Clone)]
pub struct HeadOutputs<T> {
    pub variant: DetectorVariant,
    pub slots: Vec<SlotOutput<T>>,
}

impl<T: Real> HeadOutputs<T> {
    fn slot_index(&self, task: Task) -> Option<usize> {
        self.variant.routing().iter().position(|s| s.tasks.contains(&task))
    }

    /// Raw output of `task`: logits for classification, scaled deltas for
    /// regression.
    pub fn output(&self, task: Task) -> Option<&Array2<T>> {
        let s = &self.slots[self.slot_index(task)?];
        if task.is_cls() {
            s.cls.as_ref()
        } else {
            s.reg.as_ref()
        }
    }

    pub fn num_rois(&self) -> usize {
        self.slots.first().map(|s| s.feature.nrows()).unwrap_or(0)
    }
}

/// Images and per-image training proposals of one step.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `(3, N, H, W)`.
    pub images: FeatureMap<T>,
    pub proposals: Vec<ProposalBatch>,
}

impl<T: Real> Batch<T> {
    fn rois(&self) -> Vec<Roi> {
        self.proposals
            .iter()
            .enumerate()
            .flat_map(|(item, b)| b.proposals.iter().map(move |p| Roi { item, bbox: p.bbox }))
            .collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.proposals.iter().flat_map(|b| b.proposals.iter().map(|p| p.label)).collect()
    }

    fn targets(&self) -> Vec<Option<[f64; 4]>> {
        self.proposals
            .iter()
            .flat_map(|b| b.proposals.iter().map(|p| p.target.map(scale_delta)))
            .collect()
    }
}

/// Regression target in loss scale.
pub fn scale_delta(d: BoxDelta) -> [f64; 4] {
    let a = d.to_array();
    [0, 1, 2, 3].map(|k| a[k] * DELTA_WEIGHTS[k])
}

/// Inverse of [`scale_delta`].
pub fn unscale_delta(v: [f64; 4]) -> BoxDelta {
    BoxDelta::from_array([0, 1, 2, 3].map(|k| v[k] / DELTA_WEIGHTS[k]))
}

/// Backbone plus the head slots of one variant.
#[derive(Debug, Clone)]
pub struct Detector<T> {
    pub spec: DetectorSpec,
    pub backbone: Backbone<T>,
    pub slots: Vec<HeadSlot<T>>,
}

impl<T: Real> Detector<T> {
    pub fn new(spec: DetectorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let init = Init::new(seed);
        let backbone = Backbone::new(&init.child("backbone"), &spec.backbone, spec.dims.roi_channels);
        let slots = spec
            .variant
            .routing()
            .iter()
            .map(|s| HeadSlot::new(&init, *s, spec.dims, spec.head, spec.num_classes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Detector { spec, backbone, slots })
    }

    pub fn slot(&self, name: &str) -> Option<&HeadSlot<T>> {
        self.slots.iter().find(|s| s.spec.name == name)
    }

    /// First fc layer weight `(roi_channels * pool^2, hidden)` of the head
    /// that classifies, falling back to any fc head.
    pub fn fc_first_weight(&self) -> Option<ndarray::ArrayView2<'_, T>> {
        let pick = |s: &&HeadSlot<T>| matches!(s.body, HeadBody::Fc(_));
        let slot = self
            .slots
            .iter()
            .filter(pick)
            .find(|s| s.spec.tasks.contains(&Task::FcCls))
            .or_else(|| self.slots.iter().find(pick))?;
        match &slot.body {
            HeadBody::Fc(h) => Some(h.fc1.weight.mat()),
            HeadBody::Conv(_) => None,
        }
    }

    pub fn features(&self, images: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        Ok(self.backbone.forward(images, mode)?.0)
    }

    /// Routes pooled RoI features through every slot.
    pub fn forward_variant(&self, roi: &FeatureMap<T>, mode: Mode) -> Result<HeadOutputs<T>> {
        let mut slots = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            let (feature, map, cache) = match &s.body {
                HeadBody::Fc(h) => {
                    let (f, c) = h.forward(roi)?;
                    (f, None, BodyCache::Fc(c))
                }
                HeadBody::Conv(h) => {
                    let (o, c) = h.forward(roi, mode)?;
                    (o.pooled, Some(o.map), BodyCache::Conv(c))
                }
            };
            slots.push(SlotOutput {
                cls: s.cls.as_ref().map(|l| l.forward(&feature)),
                reg: s.reg.as_ref().map(|l| l.forward(&feature)),
                feature,
                map,
                cache,
            });
        }
        Ok(HeadOutputs {
            variant: self.spec.variant,
            slots,
        })
    }

    /// Head outputs for boxes on an already computed feature map.
    pub fn roi_outputs(&self, fmap: &FeatureMap<T>, rois: &[Roi], mode: Mode) -> Result<HeadOutputs<T>> {
        let pooled = roi_align(fmap, rois, &self.spec.roi_params())?;
        self.forward_variant(&pooled, mode)
    }

    /// Per-RoI class probabilities of a classification task.
    pub fn class_scores(&self, out: &HeadOutputs<T>, task: Task) -> Result<Vec<ClassScores>> {
        if !task.is_cls() {
            return Err(Error::contract(format!("{task} is not a classification output")));
        }
        self.spec.check_available(task)?;
        let logits = out
            .output(task)
            .ok_or_else(|| Error::Unavailable(format!("{task} missing from outputs")))?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| ClassScores::from_logits(&r.iter().map(|v| v.f64()).collect::<Vec<_>>()))
            .collect())
    }

    /// Per-RoI decoded boxes of a regression task, `[roi][class - 1]`.
    pub fn regressed_boxes(&self, out: &HeadOutputs<T>, task: Task, proposals: &[BBox]) -> Result<Vec<Vec<BBox>>> {
        if task.is_cls() {
            return Err(Error::contract(format!("{task} is not a regression output")));
        }
        self.spec.check_available(task)?;
        let deltas = out
            .output(task)
            .ok_or_else(|| Error::Unavailable(format!("{task} missing from outputs")))?;
        if deltas.nrows() != proposals.len() {
            return Err(Error::contract("one proposal per output row"));
        }
        Ok(proposals
            .iter()
            .zip(deltas.rows())
            .map(|(p, row)| {
                (0..self.spec.num_classes)
                    .map(|k| {
                        let v = [0, 1, 2, 3].map(|j| row[4 * k + j].f64());
                        decode_delta(p, &unscale_delta(v))
                    })
                    .collect()
            })
            .collect())
    }

    /// Inference scores over the foreground classes, per RoI.
    pub fn inference_scores(&self, out: &HeadOutputs<T>) -> Result<Vec<Vec<f64>>> {
        match self.spec.score_source() {
            ScoreSource::Task(t) => Ok(self
                .class_scores(out, t)?
                .into_iter()
                .map(|s| s.foreground().to_vec())
                .collect()),
            ScoreSource::Fused(m) => {
                let fc = self.class_scores(out, Task::FcCls)?;
                let conv = self.class_scores(out, Task::ConvCls)?;
                fc.iter().zip(&conv).map(|(a, b)| m.apply(a, b)).collect()
            }
        }
    }

    /// Loss of one batch; with `backward` the gradients of every trained
    /// parameter are accumulated (callers reset them first).
    pub fn loss(&mut self, batch: &Batch<T>, mode: Mode, backward: bool) -> Result<LossBreakdown> {
        if batch.images.n != batch.proposals.len() {
            return Err(Error::contract(format!(
                "{} images but {} proposal batches",
                batch.images.n,
                batch.proposals.len()
            )));
        }
        let rois = batch.rois();
        if rois.is_empty() {
            return Err(Error::contract("batch has no proposals"));
        }
        let labels = batch.labels();
        if let Some(bad) = labels.iter().find(|&&l| l > self.spec.num_classes) {
            return Err(Error::contract(format!("label {bad} exceeds class count")));
        }
        let targets = batch.targets();
        let (fmap, bb_cache) = self.backbone.forward(&batch.images, mode)?;
        let params = self.spec.roi_params();
        let pooled = roi_align(&fmap, &rois, &params)?;
        let out = self.forward_variant(&pooled, mode)?;

        let mut task_loss: [Option<f64>; 4] = [None; 4];
        let mut task_grad: [Option<Array2<T>>; 4] = [None, None, None, None];
        for task in Task::ALL {
            let Some(pred) = out.output(task) else { continue };
            let coeff = self.spec.coefficient(task).expect("routed task has a coefficient");
            let (loss, grad) = if task.is_cls() {
                batch_cls_loss(pred, &labels)
            } else {
                let r = batch_reg_loss(pred, &labels, &targets);
                if r.foreground == 0 {
                    log::debug!("batch without foreground; {task} is 0");
                }
                (r.loss, r.grad)
            };
            task_loss[task.index()] = Some(loss);
            if backward && coeff != 0.0 {
                let c = T::of(coeff);
                task_grad[task.index()] = Some(grad.mapv(|g| g * c));
            }
        }
        let breakdown = self.assemble(&task_loss);

        if backward {
            let mut d_roi: Option<FeatureMap<T>> = None;
            for (slot, so) in self.slots.iter_mut().zip(&out.slots) {
                let mut d_feat: Option<Array2<T>> = None;
                for &task in slot.spec.tasks {
                    let Some(g) = &task_grad[task.index()] else { continue };
                    let layer = if task.is_cls() { slot.cls.as_mut() } else { slot.reg.as_mut() };
                    let d = layer.expect("output layer for routed task").backward(&so.feature, g);
                    d_feat = Some(match d_feat {
                        Some(acc) => acc + &d,
                        None => d,
                    });
                }
                let Some(d_feat) = d_feat else { continue };
                let d = match (&mut slot.body, &so.cache) {
                    (HeadBody::Fc(h), BodyCache::Fc(c)) => h.backward(c, &d_feat),
                    (HeadBody::Conv(h), BodyCache::Conv(c)) => h.backward(c, &d_feat),
                    _ => unreachable!("cache does not match head"),
                };
                d_roi = Some(match d_roi {
                    Some(mut acc) => {
                        acc.data += &d.data;
                        acc
                    }
                    None => d,
                });
            }
            if let Some(d_roi) = d_roi {
                let d_fmap = roi_align_backward(&d_roi, &rois, &params, (fmap.channels(), fmap.n, fmap.h, fmap.w))?;
                self.backbone.backward(&bb_cache, &d_fmap);
            }
        }
        Ok(breakdown)
    }

    /// Combines task losses into the per-head and total losses.
    pub fn assemble(&self, task_loss: &[Option<f64>; 4]) -> LossBreakdown {
        let head = |kind: HeadKind| {
            let cls = Task::cls_of(kind);
            let reg = Task::reg_of(kind);
            let terms: Vec<f64> = [cls, reg]
                .iter()
                .filter_map(|&t| Some(self.spec.task_share(t)? * task_loss[t.index()]?))
                .collect();
            (!terms.is_empty()).then(|| terms.iter().sum::<f64>())
        };
        let l_fc = head(HeadKind::Fc);
        let l_conv = head(HeadKind::Conv);
        let l_rpn = 0.0;
        let total = l_fc.map_or(0.0, |l| self.spec.head_weight(HeadKind::Fc) * l)
            + l_conv.map_or(0.0, |l| self.spec.head_weight(HeadKind::Conv) * l)
            + l_rpn;
        LossBreakdown {
            total,
            l_fc,
            l_conv,
            l_rpn,
            fc_cls: task_loss[Task::FcCls.index()],
            fc_reg: task_loss[Task::FcReg.index()],
            conv_cls: task_loss[Task::ConvCls.index()],
            conv_reg: task_loss[Task::ConvReg.index()],
        }
    }

    /// `(name, shape)` of every parameter and buffer, in visiting order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.value.shape().to_vec())));
        out
    }
}

impl<T: Real> Module<T> for Detector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        for s in &self.slots {
            s.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        for s in &mut self.slots {
            s.visit_mut(prefix, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadDims;
    use crate::nn::NormKind;

    pub(crate) fn tiny_spec(variant: DetectorVariant) -> DetectorSpec {
        DetectorSpec {
            dims: HeadDims {
                roi_channels: 4,
                pool: 3,
                hidden: 8,
                bottleneck: 4,
            },
            head: HeadConfig {
                blocks: 3,
                use_nonlocal: true,
                nonlocal_embed_dim: 4,
                norm: NormKind::Batch,
            },
            backbone: BackboneConfig {
                widths: vec![4, 4, 4],
                extra_convs: 0,
                norm: NormKind::Batch,
            },
            ..DetectorSpec::new(variant, 3)
        }
    }

    #[test]
    fn routing_matches_variant_table() {
        use DetectorVariant::*;
        let tasks = |v: DetectorVariant| -> Vec<(HeadKind, Task)> {
            v.routing().iter().flat_map(|s| s.tasks.iter().map(move |t| (s.kind, *t))).collect()
        };
        assert_eq!(tasks(DoubleHead), vec![(HeadKind::Fc, Task::FcCls), (HeadKind::Conv, Task::ConvReg)]);
        assert_eq!(tasks(DoubleHeadReverse), vec![(HeadKind::Fc, Task::FcReg), (HeadKind::Conv, Task::ConvCls)]);
        assert_eq!(tasks(DoubleHeadExt).len(), 4);
        assert_eq!(SingleFc.routing().len(), 1);
        assert_eq!(DoubleConv.routing().len(), 2);
        for v in DetectorVariant::ALL {
            assert_eq!(v.name().parse::<DetectorVariant>().unwrap(), v);
            // every variant classifies and regresses
            assert!(v.routing().iter().any(|s| s.tasks.iter().any(|t| t.is_cls())));
            assert!(v.routing().iter().any(|s| s.tasks.iter().any(|t| !t.is_cls())));
        }
        assert!("triple_head".parse::<DetectorVariant>().is_err());
    }

    #[test]
    fn reverse_differs_from_double_head_only_in_output_layers() {
        let a: Detector<f32> = Detector::new(tiny_spec(DetectorVariant::DoubleHead), 3).unwrap();
        let b: Detector<f32> = Detector::new(tiny_spec(DetectorVariant::DoubleHeadReverse), 3).unwrap();
        let sa = a.param_shapes();
        let sb = b.param_shapes();
        let body = |v: &[(String, Vec<usize>)]| -> Vec<(String, Vec<usize>)> {
            v.iter().filter(|(n, _)| !n.contains(".cls.") && !n.contains(".reg.")).cloned().collect()
        };
        assert_eq!(body(&sa), body(&sb));
        let find = |v: &[(String, Vec<usize>)], n: &str| v.iter().find(|(k, _)| k == n).map(|(_, s)| s.clone());
        assert_eq!(find(&sa, "fc_head.cls.weight"), Some(vec![8, 4]));
        assert_eq!(find(&sa, "conv_head.reg.weight"), Some(vec![8, 12]));
        assert_eq!(find(&sb, "fc_head.reg.weight"), Some(vec![8, 12]));
        assert_eq!(find(&sb, "conv_head.cls.weight"), Some(vec![8, 4]));
        assert_eq!(find(&sb, "fc_head.cls.weight"), None);
    }

    #[test]
    fn availability_follows_lambdas() {
        let mut spec = tiny_spec(DetectorVariant::DoubleHeadExt);
        assert!(Task::ALL.iter().all(|&t| spec.available(t)));
        assert_eq!(spec.score_source(), ScoreSource::Fused(FusionMethod::Complementary));
        spec.weights.lambda_conv = 1.0;
        assert!(!spec.available(Task::ConvCls));
        assert!(matches!(spec.check_available(Task::ConvCls), Err(Error::Unavailable(_))));
        assert_eq!(spec.score_source(), ScoreSource::Task(Task::FcCls));
        spec.weights.lambda_fc = 1.0;
        assert!(!spec.available(Task::FcReg));
        assert_eq!(spec.regression_source(), Task::ConvReg);

        let dh = tiny_spec(DetectorVariant::DoubleHead);
        assert!(!dh.available(Task::ConvCls));
        assert_eq!(dh.score_source(), ScoreSource::Task(Task::FcCls));
        let rev = tiny_spec(DetectorVariant::DoubleHeadReverse);
        assert_eq!(rev.score_source(), ScoreSource::Task(Task::ConvCls));
        assert_eq!(rev.regression_source(), Task::FcReg);
    }

    #[test]
    fn coefficients_follow_loss_weights() {
        let ext = tiny_spec(DetectorVariant::DoubleHeadExt);
        assert!((ext.coefficient(Task::FcCls).unwrap() - 2.0 * 0.7).abs() < 1e-15);
        assert!((ext.coefficient(Task::FcReg).unwrap() - 2.0 * 0.3).abs() < 1e-15);
        assert!((ext.coefficient(Task::ConvCls).unwrap() - 2.5 * 0.2).abs() < 1e-12);
        assert!((ext.coefficient(Task::ConvReg).unwrap() - 2.5 * 0.8).abs() < 1e-15);
        let single = tiny_spec(DetectorVariant::SingleConv);
        assert_eq!(single.coefficient(Task::ConvCls), Some(1.0));
        assert_eq!(single.coefficient(Task::FcCls), None);
    }

    #[test]
    fn scaled_deltas_roundtrip() {
        let d = BoxDelta::new(0.1, -0.2, 0.3, -0.4);
        let back = unscale_delta(scale_delta(d));
        assert!((back.dx - d.dx).abs() < 1e-15 && (back.dh - d.dh).abs() < 1e-15);
    }
}
