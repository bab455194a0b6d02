//! COCO-style average precision with 101-point interpolation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{iou, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApConfig {
    pub iou_thresholds: Vec<f64>,
    /// Highest-scoring detections kept per image and class.
    pub max_detections: usize,
    /// Areas splitting small / medium / large (medium is `[lo, hi)`).
    pub area_thresholds: [f64; 2],
}

impl Default for ApConfig {
    fn default() -> Self {
        ApConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_detections: 100,
            area_thresholds: [32.0 * 32.0, 96.0 * 96.0],
        }
    }
}

/// Area interval `[lo, hi)` used to ignore ground truth and detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    fn contains(&self, a: f64) -> bool {
        a >= self.lo && a < self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// One entry per IoU threshold.
    pub per_threshold: Vec<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApTable {
    pub per_class: Vec<ClassAp>,
    /// Classes without ground truth, left out of every mean.
    pub excluded: Vec<usize>,
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

impl ApTable {
    pub const CSV_HEADER: &'static str = "class,AP,AP50,AP75,APs,APm,APl";

    fn at(&self, per: &[f64], thr: f64, cfg: &ApConfig) -> Option<f64> {
        cfg.iou_thresholds.iter().position(|t| (t - thr).abs() < 1e-9).map(|i| per[i])
    }

    /// AP table with one row per evaluated class and a final `all` row.
    pub fn to_csv(&self, class_names: &[String], cfg: &ApConfig) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for c in &self.per_class {
            let name = class_names.get(c.class_id - 1).cloned().unwrap_or_else(|| c.class_id.to_string());
            out += &format!(
                "{name},{:.6},{},{},,,\n",
                c.ap,
                opt(self.at(&c.per_threshold, 0.5, cfg)),
                opt(self.at(&c.per_threshold, 0.75, cfg))
            );
        }
        out += &format!(
            "all,{:.6},{},{},{},{},{}\n",
            self.ap,
            opt(self.ap50),
            opt(self.ap75),
            opt(self.ap_small),
            opt(self.ap_medium),
            opt(self.ap_large)
        );
        out
    }
}

/// Per-image matching outcome of one class at one threshold.
struct Matched {
    scores: Vec<f64>,
    tp: Vec<bool>,
    ignored: Vec<bool>,
    gt_count: usize,
}

fn match_image(dets: &[&Detection], gts: &[&Annotation], thr: f64, range: AreaRange, max_det: usize) -> Matched {
    // non-ignored ground truth first, so a match to it is preferred
    let mut gts: Vec<(&Annotation, bool)> = gts.iter().map(|g| (*g, !range.contains(g.bbox.area()))).collect();
    gts.sort_by_key(|(_, ig)| *ig);
    let mut dets: Vec<&Detection> = dets.to_vec();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(max_det);

    let mut taken = vec![false; gts.len()];
    let mut out = Matched {
        scores: Vec::with_capacity(dets.len()),
        tp: Vec::with_capacity(dets.len()),
        ignored: Vec::with_capacity(dets.len()),
        gt_count: gts.iter().filter(|(_, ig)| !ig).count(),
    };
    for d in dets {
        let mut best = thr.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for (gi, (g, ig)) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            if let Some(prev) = m {
                if !gts[prev].1 && *ig {
                    break;
                }
            }
            let v = iou(&d.bbox, &g.bbox);
            if v < best {
                continue;
            }
            best = v;
            m = Some(gi);
        }
        let (tp, ignored) = match m {
            Some(gi) => {
                taken[gi] = true;
                (true, gts[gi].1)
            }
            None => (false, !range.contains(d.bbox.area())),
        };
        out.scores.push(d.score);
        out.tp.push(tp);
        out.ignored.push(ignored);
    }
    out
}

/// 101-point interpolated precision from score-sorted match flags.
pub fn interpolated_ap(tp_sorted: &[bool], gt_count: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(tp_sorted.len());
    let mut precision = Vec::with_capacity(tp_sorted.len());
    for &t in tp_sorted {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        sum += precision.get(idx).copied().unwrap_or(0.0);
    }
    sum / 101.0
}

/// AP of one class at one threshold; `None` without ground truth.
fn class_ap(
    dets: &BTreeMap<u64, Vec<&Detection>>,
    gts: &BTreeMap<u64, Vec<&Annotation>>,
    thr: f64,
    range: AreaRange,
    max_det: usize,
) -> Option<f64> {
    let mut scores = Vec::new();
    let mut tp = Vec::new();
    let mut gt_count = 0;
    let empty_d: Vec<&Detection> = Vec::new();
    let empty_g: Vec<&Annotation> = Vec::new();
    let ids: std::collections::BTreeSet<u64> = dets.keys().chain(gts.keys()).copied().collect();
    for id in ids {
        let m = match_image(
            dets.get(&id).unwrap_or(&empty_d),
            gts.get(&id).unwrap_or(&empty_g),
            thr,
            range,
            max_det,
        );
        gt_count += m.gt_count;
        for i in 0..m.scores.len() {
            if !m.ignored[i] {
                scores.push(m.scores[i]);
                tp.push(m.tp[i]);
            }
        }
    }
    if gt_count == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let sorted: Vec<bool> = order.iter().map(|&i| tp[i]).collect();
    Some(interpolated_ap(&sorted, gt_count))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class and summary AP of `dets` (tagged with image ids) against the
/// ground truth of every image.
pub fn evaluate_ap(
    dets: &[(u64, Detection)],
    gt: &HashMap<u64, Vec<Annotation>>,
    num_classes: usize,
    cfg: &ApConfig,
) -> Result<ApTable> {
    if let Some((id, _)) = dets.iter().find(|(id, _)| !gt.contains_key(id)) {
        return Err(Error::contract(format!("detection for unknown image {id}")));
    }
    if cfg.iou_thresholds.is_empty() {
        return Err(Error::Config("iou_thresholds must not be empty".into()));
    }
    let [lo, hi] = cfg.area_thresholds;
    let ranges = [
        AreaRange::ALL,
        AreaRange { lo: 0.0, hi: lo },
        AreaRange { lo, hi },
        AreaRange { lo: hi, hi: f64::INFINITY },
    ];
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    let mut by_range: [Vec<f64>; 4] = Default::default();
    let mut ap50 = Vec::new();
    let mut ap75 = Vec::new();
    for class in 1..=num_classes {
        let mut d: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
        for (id, det) in dets.iter().filter(|(_, x)| x.class_id == class) {
            d.entry(*id).or_default().push(det);
        }
        let mut g: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for (id, anns) in gt {
            let v: Vec<&Annotation> = anns.iter().filter(|a| a.class_id == class).collect();
            if !v.is_empty() {
                g.insert(*id, v);
            }
        }
        for (ri, range) in ranges.iter().enumerate() {
            let per: Option<Vec<f64>> = cfg
                .iou_thresholds
                .iter()
                .map(|&t| class_ap(&d, &g, t, *range, cfg.max_detections))
                .collect();
            let Some(per) = per else {
                if ri == 0 {
                    excluded.push(class);
                }
                continue;
            };
            let ap = mean(&per).expect("thresholds non-empty");
            by_range[ri].push(ap);
            if ri == 0 {
                for (thr, acc) in [(0.5, &mut ap50), (0.75, &mut ap75)] {
                    if let Some(i) = cfg.iou_thresholds.iter().position(|t| (t - thr).abs() < 1e-9) {
                        acc.push(per[i]);
                    }
                }
                per_class.push(ClassAp {
                    class_id: class,
                    per_threshold: per,
                    ap,
                });
            }
        }
    }
    if !excluded.is_empty() {
        log::warn!("classes {excluded:?} have no ground truth and are left out of the mean");
    }
    Ok(ApTable {
        ap: mean(&by_range[0]).unwrap_or(0.0),
        ap50: mean(&ap50),
        ap75: mean(&ap75),
        ap_small: mean(&by_range[1]),
        ap_medium: mean(&by_range[2]),
        ap_large: mean(&by_range[3]),
        per_class,
        excluded,
    })
}
