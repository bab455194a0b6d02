//! Independent reference implementations and random instance generators.
//! Each `check_*` draws one instance from `seed` and returns the largest
//! deviation between the library and its reference.

use std::collections::{BTreeMap, HashMap};

use doublehead::analysis::{
    bin_by_iou, difficulty_grouping, pearson, spatial_correlation, weight_spatial_correlation, HeadEval, Metric,
    ProposalRecord, Quantity,
};
use doublehead::data::eval::{evaluate_ap, ApConfig};
use doublehead::data::Annotation;
use doublehead::detector::{roi_align, HeadKind, Roi, RoiAlignParams};
use doublehead::geometry::{nms, BBox, Detection};
use doublehead::heads::{reconstruct_fc_feature_map, FcHead, HeadDims};
use doublehead::nn::{FeatureMap, Init};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = r.random_range(0.0..extent * 0.8);
    let y1 = r.random_range(0.0..extent * 0.8);
    let w = r.random_range(extent * 0.05..extent * 0.5);
    let h = r.random_range(extent * 0.05..extent * 0.5);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1) * (b.y2 - b.y1)
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        0.0
    } else {
        inter / (area(a) + area(b) - inter)
    }
}

// ---- pearson ----

pub fn pearson_two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn check_pearson(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..400);
    let slope = r.random_range(-2.0..2.0);
    let offset = r.random_range(-50.0..50.0);
    let x: Vec<f64> = (0..n).map(|_| offset + r.random_range(-3.0..3.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| slope * v + r.random_range(-1.0..1.0)).collect();
    (pearson(&x, &y).unwrap() - pearson_two_pass(&x, &y)).abs()
}

// ---- bin_by_iou ----

pub fn random_records(r: &mut ChaCha8Rng, n: usize) -> Vec<ProposalRecord> {
    let gt = BBox::new(10.0, 10.0, 50.0, 60.0).unwrap();
    (0..n)
        .map(|i| {
            let head = |r: &mut ChaCha8Rng| HeadEval {
                score: Some(r.random::<f64>()),
                regressed: Some(gt),
                regressed_iou: Some(r.random::<f64>()),
            };
            ProposalRecord {
                object: i % 3,
                image_id: 0,
                class_id: 1,
                proposal: gt,
                gt,
                // a few exact bin edges and perfect overlaps
                proposal_iou: match r.random_range(0..10) {
                    0 => r.random_range(0..=20) as f64 / 20.0,
                    _ => r.random::<f64>(),
                },
                fc: head(r),
                conv: head(r),
            }
        })
        .collect()
}

/// Returns `bin -> (count, mean, population std)` for non-empty bins.
pub fn group_by_bin(pairs: &[(f64, f64)]) -> BTreeMap<usize, (usize, f64, f64)> {
    let mut groups: HashMap<usize, Vec<f64>> = HashMap::new();
    for &(iou, v) in pairs {
        let b = if iou >= 1.0 { 19 } else { (iou * 20.0).floor() as usize };
        groups.entry(b).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(b, vs)| {
            let n = vs.len() as f64;
            let m = vs.iter().sum::<f64>() / n;
            let var = vs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            (b, (vs.len(), m, var.sqrt()))
        })
        .collect()
}

pub fn check_bins(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..300);
    let records = random_records(&mut r, n);
    let mut worst: f64 = 0.0;
    for head in [HeadKind::Fc, HeadKind::Conv] {
        for quantity in [Quantity::ClsScore, Quantity::RegIou] {
            let metric = Metric { head, quantity };
            let got = bin_by_iou(&records, metric).unwrap();
            let pairs: Vec<(f64, f64)> = records
                .iter()
                .map(|rec| {
                    let h = if head == HeadKind::Fc { &rec.fc } else { &rec.conv };
                    let v = if quantity == Quantity::ClsScore { h.score } else { h.regressed_iou };
                    (rec.proposal_iou, v.unwrap())
                })
                .collect();
            let want = group_by_bin(&pairs);
            assert_eq!(got.len(), 20);
            for b in &got {
                match want.get(&b.bin) {
                    None => {
                        if b.count != 0 || b.mean.is_some() || b.std.is_some() {
                            return f64::INFINITY;
                        }
                    }
                    Some(&(count, mean, std)) => {
                        if b.count != count {
                            return f64::INFINITY;
                        }
                        worst = worst.max((b.mean.unwrap() - mean).abs()).max((b.std.unwrap() - std).abs());
                    }
                }
            }
        }
    }
    worst
}

// ---- nms ----

/// Repeatedly takes the best remaining detection (earliest on ties) and
/// drops everything of its class overlapping it above the threshold.
pub fn nms_greedy(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && dets[i].class_id == dets[b].class_id && iou_ref(&dets[i].bbox, &dets[b].bbox) > thr {
                alive[i] = false;
            }
        }
    }
    out
}

pub fn random_detections(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    let anchors: Vec<BBox> = (0..4).map(|_| random_box(r, 100.0)).collect();
    (0..n)
        .map(|_| {
            let a = anchors[r.random_range(0..anchors.len())];
            let j = |r: &mut ChaCha8Rng| r.random_range(-6.0..6.0);
            let b = BBox::new(a.x1 + j(r), a.y1 + j(r), a.x2 + j(r) + 12.0, a.y2 + j(r) + 12.0).unwrap();
            // coarse scores so ties occur
            let score = r.random_range(0..50) as f64 / 50.0;
            Detection::new(b, r.random_range(1..=classes), score).unwrap()
        })
        .collect()
}

/// 1.0 on any mismatch, 0.0 when identical.
pub fn check_nms(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(0..=100);
    let dets = random_detections(&mut r, n, 3);
    let thr = r.random_range(0.1..0.9);
    if nms(&dets, thr).unwrap() == nms_greedy(&dets, thr) {
        0.0
    } else {
        1.0
    }
}

// ---- roi_align ----

/// Bilinear value at a continuous feature-map position, as a weighted sum
/// over every pixel.
fn bilinear_dense(map: &Array3<f64>, ch: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = map.dim();
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let wy = (1.0 - (y - i as f64).abs()).max(0.0);
            let wx = (1.0 - (x - j as f64).abs()).max(0.0);
            acc += wy * wx * map[[ch, i, j]];
        }
    }
    acc
}

/// Average of `sampling^2` bilinear samples inside each output cell.
pub fn roi_align_dense(map: &Array3<f64>, b: &BBox, p: &RoiAlignParams) -> Array3<f64> {
    let (c, _, _) = map.dim();
    let k = p.output_size;
    let s = p.sampling;
    let (x0, y0) = (b.x1 / p.stride - 0.5, b.y1 / p.stride - 0.5);
    let cw = (b.x2 - b.x1) / p.stride / k as f64;
    let chh = (b.y2 - b.y1) / p.stride / k as f64;
    Array3::from_shape_fn((c, k, k), |(ch, py, px)| {
        let mut acc = 0.0;
        for iy in 0..s {
            for ix in 0..s {
                let y = y0 + chh * (py as f64 + (iy as f64 + 0.5) / s as f64);
                let x = x0 + cw * (px as f64 + (ix as f64 + 0.5) / s as f64);
                acc += bilinear_dense(map, ch, y, x);
            }
        }
        acc / (s * s) as f64
    })
}

pub fn check_roi_align(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, n) = (r.random_range(1..4), r.random_range(1..3));
    let (h, w) = (r.random_range(2..9), r.random_range(2..9));
    let stride = [1.0, 2.0, 4.0, 8.0][r.random_range(0..4)];
    let p = RoiAlignParams {
        output_size: r.random_range(1..5),
        sampling: r.random_range(1..4),
        stride,
    };
    let maps: Vec<Array3<f64>> = (0..n)
        .map(|_| Array3::from_shape_fn((c, h, w), |_| r.random_range(-1.0..1.0)))
        .collect();
    let mut data = Array2::zeros((c, n * h * w));
    for (item, m) in maps.iter().enumerate() {
        for ((ch, y, x), &v) in m.indexed_iter() {
            data[[ch, item * h * w + y * w + x]] = v;
        }
    }
    let fmap = FeatureMap::new(data, n, h, w);
    // boxes may hang over every border
    let (iw, ih) = (w as f64 * stride, h as f64 * stride);
    let rois: Vec<Roi> = (0..r.random_range(1..5))
        .map(|_| {
            let x1 = r.random_range(-0.3 * iw..iw);
            let y1 = r.random_range(-0.3 * ih..ih);
            let bbox = BBox::new(x1, y1, x1 + r.random_range(0.2..iw), y1 + r.random_range(0.2..ih)).unwrap();
            Roi {
                item: r.random_range(0..n),
                bbox,
            }
        })
        .collect();
    let out = roi_align(&fmap, &rois, &p).unwrap();
    let k = p.output_size;
    let mut worst: f64 = 0.0;
    for (ri, roi) in rois.iter().enumerate() {
        let want = roi_align_dense(&maps[roi.item], &roi.bbox, &p);
        for ((ch, py, px), &v) in want.indexed_iter() {
            worst = worst.max((out.data[[ch, ri * k * k + py * k + px]] - v).abs());
        }
    }
    worst
}

// ---- spatial correlations ----

/// Cosine similarity of every pair of vectors by explicit loops; pairs
/// involving a zero vector are NaN.
pub fn cosine_pairs(vectors: &[Vec<f64>]) -> Array2<f64> {
    let n = vectors.len();
    Array2::from_shape_fn((n, n), |(a, b)| {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for z in 0..vectors[a].len() {
            dot += vectors[a][z] * vectors[b][z];
            na += vectors[a][z] * vectors[a][z];
            nb += vectors[b][z] * vectors[b][z];
        }
        if na == 0.0 || nb == 0.0 {
            f64::NAN
        } else {
            dot / (na.sqrt() * nb.sqrt())
        }
    })
}

fn grid_gap(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, b) in got.iter().zip(want) {
        if a.is_nan() != b.is_nan() {
            return f64::INFINITY;
        }
        if !a.is_nan() {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

pub fn check_spatial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, k) = if seed % 2 == 0 { (8, 7) } else { (r.random_range(1..10), r.random_range(1..6)) };
    let mut m = Array3::from_shape_fn((d, k, k), |_| r.random_range(-1.0..1.0));
    if r.random_range(0..4) == 0 {
        let (y, x) = (r.random_range(0..k), r.random_range(0..k));
        m.slice_mut(ndarray::s![.., y, x]).fill(0.0);
    }
    let vectors: Vec<Vec<f64>> = (0..k * k).map(|c| (0..d).map(|z| m[[z, c / k, c % k]]).collect()).collect();
    let got = spatial_correlation(m.view()).unwrap();
    grid_gap(&got.values, &cosine_pairs(&vectors))
}

pub fn check_weight_spatial(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = r.random_range(1..5);
    let cells = k * k;
    let (c, d) = (r.random_range(1..5), r.random_range(1..6));
    let wt = Array2::from_shape_fn((c * cells, d), |_| r.random_range(-1.0..1.0));
    let vectors: Vec<Vec<f64>> = (0..cells)
        .map(|cell| {
            let mut v = Vec::new();
            for ch in 0..c {
                for j in 0..d {
                    v.push(wt[[ch * cells + cell, j]]);
                }
            }
            v
        })
        .collect();
    let got = weight_spatial_correlation(wt.view(), cells).unwrap();
    grid_gap(&got.values, &cosine_pairs(&vectors))
}

// ---- evaluate_ap ----

pub struct ApInstance {
    pub dets: Vec<(u64, Detection)>,
    pub gt: HashMap<u64, Vec<Annotation>>,
    pub classes: usize,
    pub cfg: ApConfig,
}

pub fn random_ap_instance(r: &mut ChaCha8Rng) -> ApInstance {
    let classes = 3;
    let mut gt = HashMap::new();
    let mut dets = Vec::new();
    for id in 0..r.random_range(1..4u64) {
        let anns: Vec<Annotation> = (0..r.random_range(0..5))
            .map(|_| Annotation {
                bbox: random_box(r, 100.0),
                class_id: r.random_range(1..=classes),
            })
            .collect();
        for a in &anns {
            for _ in 0..r.random_range(0..3) {
                let j = |r: &mut ChaCha8Rng| r.random_range(-4.0..4.0);
                let b = &a.bbox;
                if let Ok(bb) = BBox::new(b.x1 + j(r), b.y1 + j(r), b.x2 + j(r) + 5.0, b.y2 + j(r) + 5.0) {
                    let class = if r.random_range(0..6) == 0 { r.random_range(1..=classes) } else { a.class_id };
                    dets.push((id, Detection::new(bb, class, r.random::<f64>()).unwrap()));
                }
            }
        }
        for _ in 0..r.random_range(0..4) {
            let d = Detection::new(random_box(r, 100.0), r.random_range(1..=classes), r.random::<f64>()).unwrap();
            dets.push((id, d));
        }
        gt.insert(id, anns);
    }
    let cfg = ApConfig {
        max_detections: r.random_range(1..6),
        ..ApConfig::default()
    };
    ApInstance { dets, gt, classes, cfg }
}

/// Per-class AP over all areas: global score order, each detection takes
/// the unmatched same-image box it overlaps most, precision is the best
/// value at or beyond each of 101 recall levels.
pub fn ap_reference(inst: &ApInstance) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for class in 1..=inst.classes {
        let total_gt: usize = inst.gt.values().map(|v| v.iter().filter(|a| a.class_id == class).count()).sum();
        if total_gt == 0 {
            continue;
        }
        // per-image cap on detections
        let mut kept: Vec<(u64, Detection)> = Vec::new();
        for id in inst.gt.keys() {
            let mut own: Vec<Detection> =
                inst.dets.iter().filter(|(i, d)| i == id && d.class_id == class).map(|(_, d)| *d).collect();
            own.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            own.truncate(inst.cfg.max_detections);
            kept.extend(own.into_iter().map(|d| (*id, d)));
        }
        kept.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
        let mut sum = 0.0;
        for &thr in &inst.cfg.iou_thresholds {
            let mut used: HashMap<(u64, usize), bool> = HashMap::new();
            let mut flags = Vec::new();
            for (id, d) in &kept {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in inst.gt[id].iter().enumerate() {
                    if g.class_id != class || used.contains_key(&(*id, gi)) {
                        continue;
                    }
                    let v = iou_ref(&d.bbox, &g.bbox);
                    if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((gi, v));
                    }
                }
                if let Some((gi, _)) = best {
                    used.insert((*id, gi), true);
                }
                flags.push(best.is_some());
            }
            let mut pr = Vec::new();
            let mut tp = 0;
            for (i, &f) in flags.iter().enumerate() {
                tp += usize::from(f);
                pr.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
            }
            let mut ap = 0.0;
            for k in 0..=100 {
                let level = k as f64 / 100.0;
                ap += pr.iter().filter(|(rc, _)| *rc >= level).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            sum += ap / 101.0;
        }
        out.insert(class, sum / inst.cfg.iou_thresholds.len() as f64);
    }
    out
}

pub fn check_ap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inst = random_ap_instance(&mut r);
    let table = evaluate_ap(&inst.dets, &inst.gt, inst.classes, &inst.cfg).unwrap();
    let want = ap_reference(&inst);
    let got: BTreeMap<usize, f64> = table.per_class.iter().map(|c| (c.class_id, c.ap)).collect();
    if got.keys().ne(want.keys()) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (c, v) in &want {
        worst = worst.max((got[c] - v).abs());
    }
    let mean = if want.is_empty() { 0.0 } else { want.values().sum::<f64>() / want.len() as f64 };
    worst.max((table.ap - mean).abs())
}

// ---- difficulty grouping ----

/// Sort by AP (best first, lower id on ties), then slice into thirds with
/// the remainder going to the first groups.
pub fn difficulty_reference(aps: &BTreeMap<usize, f64>) -> [Vec<usize>; 3] {
    let mut ids: Vec<usize> = aps.keys().copied().collect();
    ids.sort_by(|a, b| aps[b].partial_cmp(&aps[a]).unwrap().then(a.cmp(b)));
    let n = ids.len();
    let first = n.div_ceil(3);
    let second = (n - first).div_ceil(2);
    [ids[..first].to_vec(), ids[first..first + second].to_vec(), ids[first + second..].to_vec()]
}

pub fn check_difficulty(seed: u64) -> f64 {
    let mut r = rng(seed);
    let aps: BTreeMap<usize, f64> = (1..=r.random_range(3..40))
        .map(|c| (c, r.random_range(0..8) as f64 / 8.0))
        .collect();
    if difficulty_grouping(&aps).unwrap() == difficulty_reference(&aps) {
        0.0
    } else {
        1.0
    }
}

// ---- first fc layer reconstruction ----

/// `|sum of per-cell outputs - (fc1(x) - bias)|` for a random single
/// precision head and RoI.
pub fn check_reconstruction(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = HeadDims {
        roi_channels: 32,
        pool: 7,
        hidden: 64,
        bottleneck: 16,
    };
    let mut head: FcHead<f32> = FcHead::new(&Init::new(seed), dims);
    head.fc1.bias.value.mapv_inplace(|_| r.random_range(-1.0f32..1.0));
    let roi = FeatureMap::new(Array2::from_shape_fn((32, 49), |_| r.random_range(0.0f32..2.0)), 1, 7, 7);
    let per_cell = reconstruct_fc_feature_map(head.fc1.weight.mat(), &roi).unwrap();
    let full = head.fc1.forward(&roi.to_rows());
    let bias = head.fc1.bias.vec();
    let mut worst: f64 = 0.0;
    for j in 0..dims.hidden {
        let sum: f32 = per_cell.slice(ndarray::s![.., .., j]).sum();
        worst = worst.max(f64::from((sum - (full[[0, j]] - bias[j])).abs()));
    }
    worst
}
