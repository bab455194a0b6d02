use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{join, FeatureMap, Mode, Module, Param, Real};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Normalization applied after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NormKind {
    /// Per-channel statistics over the whole batch; running averages at eval.
    Batch,
    /// Per-item statistics over channel groups; identical in train and eval.
    Group { groups: usize },
    None,
}

/// Batch or group normalization with affine scale/shift.
///
/// Running statistics of [`NormKind::Batch`] advance inside
/// [`Norm::backward`], i.e. once per optimization step that actually trains
/// this layer.
#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub kind: NormKind,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Array2<T>,
    /// One entry per normalization segment.
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    train: bool,
}

impl<T: Real> Norm<T> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        if let NormKind::Group { groups } = kind {
            assert!(groups > 0 && channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        }
        let ones = ArrayD::from_elem(IxDyn(&[channels]), T::one());
        let zeros = ArrayD::zeros(IxDyn(&[channels]));
        Norm {
            kind,
            gamma: Param::new(ones.clone()),
            beta: Param::new(zeros.clone()),
            running_mean: Param::buffer(zeros),
            running_var: Param::buffer(ones),
        }
    }

    fn segments(&self, x: &FeatureMap<T>) -> Vec<(Range<usize>, Range<usize>)> {
        let c = x.channels();
        let p = x.positions();
        match self.kind {
            NormKind::Batch => (0..c).map(|ch| (ch..ch + 1, 0..x.n * p)).collect(),
            NormKind::Group { groups } => {
                let cg = c / groups;
                let mut out = Vec::with_capacity(groups * x.n);
                for g in 0..groups {
                    for i in 0..x.n {
                        out.push((g * cg..(g + 1) * cg, i * p..(i + 1) * p));
                    }
                }
                out
            }
            NormKind::None => Vec::new(),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> (FeatureMap<T>, NormCache<T>) {
        if self.kind == NormKind::None {
            let cache = NormCache {
                xhat: Array2::zeros((0, 0)),
                inv_std: Vec::new(),
                batch_mean: Vec::new(),
                batch_var: Vec::new(),
                train: false,
            };
            return (x.clone(), cache);
        }
        let eps = T::of(EPS);
        let mut xhat = x.data.clone();
        let segments = self.segments(x);
        let use_batch = !(self.kind == NormKind::Batch && mode == Mode::Eval);
        let mut inv_std = Vec::with_capacity(segments.len());
        let mut means = Vec::with_capacity(segments.len());
        let mut vars = Vec::with_capacity(segments.len());
        for (si, (rows, cols)) in segments.iter().enumerate() {
            let mut seg = xhat.slice_mut(s![rows.clone(), cols.clone()]);
            let (mean, var) = if use_batch {
                let m = T::of(seg.len() as f64);
                let mean = seg.iter().copied().sum::<T>() / m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                (mean, var)
            } else {
                (self.running_mean.vec()[si], self.running_var.vec()[si])
            };
            let is = T::one() / (var + eps).sqrt();
            seg.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
            means.push(mean);
            vars.push(var);
        }
        let gamma = self.gamma.vec();
        let beta = self.beta.vec();
        let mut y = xhat.clone();
        for (ch, mut row) in y.outer_iter_mut().enumerate() {
            let (g, b) = (gamma[ch], beta[ch]);
            row.mapv_inplace(|v| v * g + b);
        }
        let cache = NormCache {
            xhat,
            inv_std,
            batch_mean: means,
            batch_var: vars,
            train: use_batch,
        };
        (x.with_data(y), cache)
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        if self.kind == NormKind::None {
            return dy.clone();
        }
        let c = dy.channels();
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut dxhat = dy.data.clone();
        {
            let gamma = self.gamma.vec();
            for ch in 0..c {
                let dyr = dy.data.row(ch);
                let xr = cache.xhat.row(ch);
                dgamma[ch] = dyr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum();
                dbeta[ch] = dyr.iter().copied().sum();
                let g = gamma[ch];
                dxhat.row_mut(ch).mapv_inplace(|v| v * g);
            }
        }
        self.gamma.accumulate(dgamma.into_dyn().view());
        self.beta.accumulate(dbeta.into_dyn().view());

        let mut dx = dxhat;
        let segments = self.segments(dy);
        for (si, (rows, cols)) in segments.iter().enumerate() {
            let is = cache.inv_std[si];
            let mut seg = dx.slice_mut(s![rows.clone(), cols.clone()]);
            if !cache.train {
                seg.mapv_inplace(|v| v * is);
                continue;
            }
            let xh = cache.xhat.slice(s![rows.clone(), cols.clone()]);
            let m = T::of(seg.len() as f64);
            let sum_d: T = seg.iter().copied().sum();
            let sum_dx: T = seg.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            ndarray::Zip::from(&mut seg).and(&xh).for_each(|d, &xv| {
                *d = is / m * (m * *d - sum_d - xv * sum_dx);
            });
        }

        if self.kind == NormKind::Batch && cache.train {
            let mom = T::of(MOMENTUM);
            let m = T::of(dy.n as f64 * dy.positions() as f64);
            let unbias = if m > T::one() { m / (m - T::one()) } else { T::one() };
            let rm = self.running_mean.value.as_slice_mut().expect("contiguous");
            for (r, &b) in rm.iter_mut().zip(&cache.batch_mean) {
                *r = (T::one() - mom) * *r + mom * b;
            }
            let rv = self.running_var.value.as_slice_mut().expect("contiguous");
            for (r, &b) in rv.iter_mut().zip(&cache.batch_var) {
                *r = (T::one() - mom) * *r + mom * b * unbias;
            }
        }
        dy.with_data(dx)
    }
}

impl<T: Real> Module<T> for Norm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if self.kind == NormKind::None {
            return;
        }
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &self.running_mean);
            f(&join(prefix, "running_var"), &self.running_var);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if self.kind == NormKind::None {
            return;
        }
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &mut self.running_mean);
            f(&join(prefix, "running_var"), &mut self.running_var);
        }
    }
}
