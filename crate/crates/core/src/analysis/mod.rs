//! Head diagnostics: dense proposals around each object, per-head scores and
//! regressed boxes, IoU-binned statistics, correlations and spatial grids.

pub mod correlation;
pub mod groups;
pub mod sliding;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlation::{spatial_correlation, weight_spatial_correlation, CorrelationGrid};
pub use groups::{difficulty_grouping, size_grouping, Difficulty, SizeGroup, SizeThresholds};
pub use sliding::{generate_sliding_proposals, SlidingConfig};
pub use stats::{bin_by_iou, bin_values, iou_bin, pearson, BinStats, HeadEval, Metric, ProposalRecord, Quantity};

use crate::data::{stack_images, ImageSample};
use crate::detector::{roi_align, Detector, HeadKind, Roi, Task};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::heads::reconstruct_fc_feature_map;
use crate::nn::{FeatureMap, Mode, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub sliding: SlidingConfig,
    pub sizes: SizeThresholds,
    /// Analyse at most this many objects, in dataset order.
    pub max_objects: Option<usize>,
    /// RoIs per forward pass.
    pub chunk: usize,
    /// Regression comparison averages bins whose lower edge is at least this.
    pub reg_min_iou: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sliding: SlidingConfig::default(),
            sizes: SizeThresholds::default(),
            max_objects: None,
            chunk: 512,
            reg_min_iou: 0.4,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        self.sliding.validate()?;
        self.sizes.validate()?;
        if self.chunk == 0 {
            return Err(Error::Config("analysis.chunk must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.reg_min_iou) {
            return Err(Error::Config("analysis.reg_min_iou must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Where one head's classification and regression outputs come from.
pub struct HeadSource<'a, T> {
    pub det: &'a Detector<T>,
    pub cls: Option<Task>,
    pub reg: Option<Task>,
}

impl<'a, T: Real> HeadSource<'a, T> {
    /// The outputs a detector provides for head `kind`.
    pub fn of(det: &'a Detector<T>, kind: HeadKind) -> Self {
        let pick = |t: Task| det.spec.available(t).then_some(t);
        HeadSource {
            det,
            cls: pick(Task::cls_of(kind)),
            reg: pick(Task::reg_of(kind)),
        }
    }
}

/// The fc side and the conv side of a comparison; both may point at the
/// same detector.
pub struct HeadPair<'a, T> {
    pub fc: HeadSource<'a, T>,
    pub conv: HeadSource<'a, T>,
}

impl<'a, T: Real> HeadPair<'a, T> {
    /// Two single-head models: the fc-head one and the conv-head one.
    pub fn from_pair(fc: &'a Detector<T>, conv: &'a Detector<T>) -> Self {
        HeadPair {
            fc: HeadSource::of(fc, HeadKind::Fc),
            conv: HeadSource::of(conv, HeadKind::Conv),
        }
    }

    /// One model holding both heads.
    pub fn from_double(det: &'a Detector<T>) -> Self {
        Self::from_pair(det, det)
    }
}

/// Object-level facts attached to each analysed ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub object: usize,
    pub image_id: u64,
    pub class_id: usize,
    pub gt: BBox,
    pub size: SizeGroup,
    pub difficulty: Option<Difficulty>,
    pub proposals: usize,
    /// The box touches the image border, so high-IoU bins may be thin.
    pub at_border: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub group: String,
    pub quantity: Quantity,
    pub head: HeadKind,
    pub bins: Vec<BinStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PccRow {
    pub group: String,
    pub quantity: Quantity,
    pub head: HeadKind,
    pub n: usize,
    /// `None` when the correlation is undefined.
    pub pcc: Option<f64>,
}

/// Object-averaged spatial grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSet {
    /// Pre-pooling map of the conv head.
    pub conv: Option<CorrelationGrid>,
    /// Per-cell first-layer outputs of the fc head.
    pub fc: Option<CorrelationGrid>,
    /// Per-cell sub-matrices of the first fc weight.
    pub fc_weight: Option<CorrelationGrid>,
}

impl CorrelationSet {
    pub fn mean_off_cell(&self) -> BTreeMap<String, Option<f64>> {
        [("conv", &self.conv), ("fc", &self.fc), ("fc_weight", &self.fc_weight)]
            .into_iter()
            .map(|(k, g)| (k.to_string(), g.as_ref().and_then(|g| g.mean_off_cell())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub objects: usize,
    pub records: usize,
    /// PCC of each head's ground-truth class score with the proposal IoU.
    pub pcc_fc_cls: Option<f64>,
    pub pcc_conv_cls: Option<f64>,
    /// Mean of the per-bin mean regressed IoU over the high-IoU bins.
    pub reg_iou_fc: Option<f64>,
    pub reg_iou_conv: Option<f64>,
    pub mean_off_cell: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBundle {
    pub objects: Vec<ObjectInfo>,
    pub records: Vec<ProposalRecord>,
    pub bins: Vec<BinRow>,
    pub pcc: Vec<PccRow>,
    pub correlation: CorrelationSet,
    pub summary: Summary,
}

fn head_eval<T: Real>(
    src: &HeadSource<'_, T>,
    fmap: &FeatureMap<T>,
    proposals: &[BBox],
    gt: &BBox,
    class_id: usize,
    chunk: usize,
) -> Result<Vec<HeadEval>> {
    let mut out = Vec::with_capacity(proposals.len());
    for part in proposals.chunks(chunk) {
        let rois: Vec<Roi> = part.iter().map(|b| Roi { item: 0, bbox: *b }).collect();
        let o = src.det.roi_outputs(fmap, &rois, Mode::Eval)?;
        let scores = src.cls.map(|t| src.det.class_scores(&o, t)).transpose()?;
        let boxes = src.reg.map(|t| src.det.regressed_boxes(&o, t, part)).transpose()?;
        for i in 0..part.len() {
            let regressed = boxes.as_ref().map(|b| b[i][class_id - 1]);
            out.push(HeadEval {
                score: scores.as_ref().map(|s| s[i].0[class_id]),
                regressed,
                regressed_iou: regressed.map(|r| iou(&r, gt)),
            });
        }
    }
    Ok(out)
}

/// `(D, k, k)` pre-pooling conv map of `gt`.
fn conv_map<T: Real>(src: &HeadSource<'_, T>, fmap: &FeatureMap<T>, gt: &BBox) -> Result<Option<Array3<f64>>> {
    let Some(task) = src.cls.or(src.reg) else { return Ok(None) };
    let o = src.det.roi_outputs(fmap, &[Roi { item: 0, bbox: *gt }], Mode::Eval)?;
    let slot = src
        .det
        .spec
        .variant
        .routing()
        .iter()
        .position(|s| s.tasks.contains(&task))
        .ok_or_else(|| Error::Unavailable(format!("{task} has no slot")))?;
    let Some(map) = &o.slots[slot].map else { return Ok(None) };
    let (c, h, w) = (map.channels(), map.h, map.w);
    let data = map.data.mapv(|v| v.f64());
    Ok(Some(data.into_shape_with_order((c, h, w)).expect("one RoI")))
}

/// `(D, k, k)` per-cell first fc layer outputs of `gt`.
fn fc_map<T: Real>(src: &HeadSource<'_, T>, fmap: &FeatureMap<T>, gt: &BBox) -> Result<Option<Array3<f64>>> {
    let Some(weight) = src.det.fc_first_weight() else { return Ok(None) };
    let pooled = roi_align(fmap, &[Roi { item: 0, bbox: *gt }], &src.det.spec.roi_params())?;
    let cells = reconstruct_fc_feature_map(weight, &pooled)?;
    Ok(Some(cells.mapv(|v| v.f64()).permuted_axes([2, 0, 1]).as_standard_layout().to_owned()))
}

struct ObjectResult {
    info: ObjectInfo,
    records: Vec<ProposalRecord>,
    conv_grid: Option<CorrelationGrid>,
    fc_grid: Option<CorrelationGrid>,
}

/// Every ground-truth object with its image index, in dataset order.
fn objects(data: &[ImageSample], max: Option<usize>) -> Vec<(usize, usize)> {
    let all = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.annotations.len()).map(move |a| (i, a)));
    all.take(max.unwrap_or(usize::MAX)).collect()
}

/// Runs the diagnostic on every object of `data`. `class_ap` enables the
/// difficulty grouping.
pub fn run_head_comparison<T: Real>(
    heads: &HeadPair<'_, T>,
    data: &[ImageSample],
    class_ap: Option<&BTreeMap<usize, f64>>,
    cfg: &AnalysisConfig,
) -> Result<AnalysisBundle> {
    cfg.validate()?;
    let difficulty: BTreeMap<usize, Difficulty> = match class_ap {
        Some(ap) => difficulty_grouping(ap)?
            .into_iter()
            .zip(Difficulty::ALL)
            .flat_map(|(classes, d)| classes.into_iter().map(move |c| (c, d)))
            .collect(),
        None => BTreeMap::new(),
    };
    let same = std::ptr::eq(heads.fc.det, heads.conv.det);
    let list = objects(data, cfg.max_objects);
    let mut images: Vec<usize> = list.iter().map(|o| o.0).collect();
    images.dedup();
    let feats: BTreeMap<usize, (FeatureMap<T>, Option<FeatureMap<T>>)> = images
        .par_iter()
        .map(|&i| -> Result<_> {
            let x = stack_images::<T>(&[&data[i]])?;
            let f = heads.fc.det.features(&x, Mode::Eval)?;
            let c = if same { None } else { Some(heads.conv.det.features(&x, Mode::Eval)?) };
            Ok((i, (f, c)))
        })
        .collect::<Result<_>>()?;

    let results: Vec<ObjectResult> = list
        .par_iter()
        .enumerate()
        .map(|(object, &(i, a))| -> Result<ObjectResult> {
            let sample = &data[i];
            let ann = &sample.annotations[a];
            let (w, h) = (sample.width() as f64, sample.height() as f64);
            let gt = ann.bbox;
            let proposals = generate_sliding_proposals(&gt, (w, h), &cfg.sliding)?;
            let (f_fc, f_conv) = &feats[&i];
            let f_conv = f_conv.as_ref().unwrap_or(f_fc);
            let fc = head_eval(&heads.fc, f_fc, &proposals, &gt, ann.class_id, cfg.chunk)?;
            let conv = head_eval(&heads.conv, f_conv, &proposals, &gt, ann.class_id, cfg.chunk)?;
            let conv_grid = conv_map(&heads.conv, f_conv, &gt)?
                .map(|m| spatial_correlation(m.view()))
                .transpose()?;
            let fc_grid = fc_map(&heads.fc, f_fc, &gt)?
                .map(|m| spatial_correlation(m.view()))
                .transpose()?;
            let records = proposals
                .iter()
                .zip(fc.into_iter().zip(conv))
                .map(|(p, (fc, conv))| ProposalRecord {
                    object,
                    image_id: sample.id,
                    class_id: ann.class_id,
                    proposal: *p,
                    gt,
                    proposal_iou: iou(p, &gt),
                    fc,
                    conv,
                })
                .collect();
            let at_border = gt.x1 <= 0.0 || gt.y1 <= 0.0 || gt.x2 >= w || gt.y2 >= h;
            if at_border {
                log::warn!("object {object} (image {}) touches the border; high-IoU bins may be thin", sample.id);
            }
            Ok(ObjectResult {
                info: ObjectInfo {
                    object,
                    image_id: sample.id,
                    class_id: ann.class_id,
                    gt,
                    size: size_grouping(&gt, cfg.sizes.resolved(w * h)),
                    difficulty: difficulty.get(&ann.class_id).copied(),
                    proposals: proposals.len(),
                    at_border,
                },
                records,
                conv_grid,
                fc_grid,
            })
        })
        .collect::<Result<_>>()?;

    if results.is_empty() {
        return Err(Error::contract("no ground-truth objects to analyse"));
    }
    let mean_grid = |pick: fn(&ObjectResult) -> &Option<CorrelationGrid>| -> Result<Option<CorrelationGrid>> {
        let grids: Vec<CorrelationGrid> = results.iter().filter_map(|r| pick(r).clone()).collect();
        if grids.is_empty() {
            Ok(None)
        } else {
            CorrelationGrid::mean(&grids).map(Some)
        }
    };
    let fc_weight = match heads.fc.det.fc_first_weight() {
        Some(w) => {
            let cells = heads.fc.det.spec.dims.pool * heads.fc.det.spec.dims.pool;
            Some(weight_spatial_correlation(w.mapv(|v| v.f64()).view(), cells)?)
        }
        None => None,
    };
    let correlation = CorrelationSet {
        conv: mean_grid(|r| &r.conv_grid)?,
        fc: mean_grid(|r| &r.fc_grid)?,
        fc_weight,
    };
    let objects: Vec<ObjectInfo> = results.iter().map(|r| r.info.clone()).collect();
    let records: Vec<ProposalRecord> = results.into_iter().flat_map(|r| r.records).collect();
    assemble(objects, records, correlation, cfg)
}

/// Named subsets of the objects: all, each size group, each difficulty.
fn group_members(objects: &[ObjectInfo]) -> Vec<(String, Vec<bool>)> {
    let mut out = vec![("all".to_string(), vec![true; objects.len()])];
    for s in SizeGroup::ALL {
        out.push((format!("size_{s}"), objects.iter().map(|o| o.size == s).collect()));
    }
    if objects.iter().any(|o| o.difficulty.is_some()) {
        for d in Difficulty::ALL {
            out.push((format!("difficulty_{d}"), objects.iter().map(|o| o.difficulty == Some(d)).collect()));
        }
    }
    out
}

fn assemble(
    objects: Vec<ObjectInfo>,
    records: Vec<ProposalRecord>,
    correlation: CorrelationSet,
    cfg: &AnalysisConfig,
) -> Result<AnalysisBundle> {
    let mut bins = Vec::new();
    let mut pcc = Vec::new();
    for (group, member) in group_members(&objects) {
        let subset: Vec<&ProposalRecord> = records.iter().filter(|r| member[r.object]).collect();
        if subset.is_empty() {
            continue;
        }
        for head in [HeadKind::Fc, HeadKind::Conv] {
            for quantity in [Quantity::ClsScore, Quantity::RegIou] {
                let metric = Metric { head, quantity };
                let pairs: Vec<(f64, f64)> = subset
                    .iter()
                    .filter_map(|r| metric.value(r).map(|v| (r.proposal_iou, v)))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                bins.push(BinRow {
                    group: group.clone(),
                    quantity,
                    head,
                    bins: bin_values(pairs.iter().copied()),
                });
                let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let value = match pearson(&x, &y) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedCorrelation(_)) => None,
                    Err(e) => return Err(e),
                };
                pcc.push(PccRow {
                    group: group.clone(),
                    quantity,
                    head,
                    n: x.len(),
                    pcc: value,
                });
            }
        }
    }
    let find_pcc = |head| {
        pcc.iter()
            .find(|r| r.group == "all" && r.head == head && r.quantity == Quantity::ClsScore)
            .and_then(|r| r.pcc)
    };
    let reg_iou = |head| {
        let row = bins
            .iter()
            .find(|r| r.group == "all" && r.head == head && r.quantity == Quantity::RegIou)?;
        let means: Vec<f64> = row
            .bins
            .iter()
            .filter(|b| b.lo >= cfg.reg_min_iou - 1e-12)
            .filter_map(|b| b.mean)
            .collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    };
    let summary = Summary {
        objects: objects.len(),
        records: records.len(),
        pcc_fc_cls: find_pcc(HeadKind::Fc),
        pcc_conv_cls: find_pcc(HeadKind::Conv),
        reg_iou_fc: reg_iou(HeadKind::Fc),
        reg_iou_conv: reg_iou(HeadKind::Conv),
        mean_off_cell: correlation.mean_off_cell(),
    };
    Ok(AnalysisBundle {
        objects,
        records,
        bins,
        pcc,
        correlation,
        summary,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl AnalysisBundle {
    pub fn records_csv(&self) -> String {
        let mut s = String::from(
            "object,image_id,class_id,proposal_x1,proposal_y1,proposal_x2,proposal_y2,proposal_iou,\
             fc_score,fc_reg_iou,conv_score,conv_reg_iou\n",
        );
        for r in &self.records {
            let p = r.proposal;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.object,
                r.image_id,
                r.class_id,
                p.x1,
                p.y1,
                p.x2,
                p.y2,
                r.proposal_iou,
                opt(r.fc.score),
                opt(r.fc.regressed_iou),
                opt(r.conv.score),
                opt(r.conv.regressed_iou)
            );
        }
        s
    }

    pub fn bins_csv(&self) -> String {
        let mut s = String::from("group,metric,head,bin,lo,hi,count,mean,std\n");
        for row in &self.bins {
            for b in &row.bins {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    row.group,
                    row.quantity.name(),
                    row.head.name(),
                    b.bin,
                    b.lo,
                    b.hi,
                    b.count,
                    opt(b.mean),
                    opt(b.std)
                );
            }
        }
        s
    }

    pub fn pcc_csv(&self) -> String {
        let mut s = String::from("group,metric,head,n,pcc\n");
        for r in &self.pcc {
            let _ = writeln!(s, "{},{},{},{},{}", r.group, r.quantity.name(), r.head.name(), r.n, opt(r.pcc));
        }
        s
    }

    /// Writes records, bins, PCC, grids, objects and the summary to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("records.csv", self.records_csv())?;
        put("bins.csv", self.bins_csv())?;
        put("pcc.csv", self.pcc_csv())?;
        put("correlation.json", serde_json::to_string(&self.correlation)?)?;
        put("objects.json", serde_json::to_string_pretty(&self.objects)?)?;
        put("summary.json", serde_json::to_string_pretty(&self.summary)?)
    }
}

/// Spatial grids of one detector: conv map and fc reconstruction averaged
/// over the objects of `data`, plus the fc weight grid.
pub fn correlate<T: Real>(det: &Detector<T>, data: &[ImageSample], max_objects: Option<usize>) -> Result<CorrelationSet> {
    let pair = HeadPair::from_double(det);
    let list = objects(data, max_objects);
    let per: Vec<(Option<CorrelationGrid>, Option<CorrelationGrid>)> = list
        .par_iter()
        .map(|&(i, a)| -> Result<_> {
            let x = stack_images::<T>(&[&data[i]])?;
            let f = det.features(&x, Mode::Eval)?;
            let gt = data[i].annotations[a].bbox;
            let conv = if det.spec.variant.routing().iter().any(|s| s.kind == HeadKind::Conv) {
                conv_map(&HeadSource { det, cls: None, reg: conv_task(det) }, &f, &gt)?
            } else {
                None
            };
            let fc = fc_map(&pair.fc, &f, &gt)?;
            Ok((
                conv.map(|m| spatial_correlation(m.view())).transpose()?,
                fc.map(|m| spatial_correlation(m.view())).transpose()?,
            ))
        })
        .collect::<Result<_>>()?;
    let mean = |g: Vec<CorrelationGrid>| if g.is_empty() { Ok(None) } else { CorrelationGrid::mean(&g).map(Some) };
    let (conv, fc): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let cells = det.spec.dims.pool * det.spec.dims.pool;
    Ok(CorrelationSet {
        conv: mean(conv.into_iter().flatten().collect())?,
        fc: mean(fc.into_iter().flatten().collect())?,
        fc_weight: det
            .fc_first_weight()
            .map(|w| weight_spatial_correlation(w.mapv(|v| v.f64()).view(), cells))
            .transpose()?,
    })
}

/// Any task routed to a conv slot, used to locate its pre-pooling map.
fn conv_task<T: Real>(det: &Detector<T>) -> Option<Task> {
    det.spec
        .variant
        .routing()
        .iter()
        .find(|s| s.kind == HeadKind::Conv)
        .and_then(|s| s.tasks.first().copied())
}
