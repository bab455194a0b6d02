use ndarray::{s, Array2, Axis};

use crate::nn::{
    join, relu, relu_backward, Conv2d, ConvCache, FeatureMap, Init, Mode, Module, Norm, NormCache,
    NormKind, Param, Real,
};

/// Convolution followed by normalization and an optional rectifier.
#[derive(Debug, Clone)]
pub struct ConvNormAct<T> {
    pub conv: Conv2d<T>,
    pub norm: Norm<T>,
    pub act: bool,
}

#[derive(Debug, Clone)]
pub struct ConvNormActCache<T> {
    conv: ConvCache<T>,
    norm: NormCache<T>,
    out: Option<Array2<T>>,
}

impl<T: Real> ConvNormAct<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &Init,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        norm: NormKind,
        act: bool,
    ) -> Self {
        ConvNormAct {
            conv: Conv2d::new(&init.child("conv"), c_in, c_out, kernel, stride, kernel / 2),
            norm: Norm::new(norm, c_out),
            act,
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> (FeatureMap<T>, ConvNormActCache<T>) {
        let (y, conv) = self.conv.forward(x);
        let (mut y, norm) = self.norm.forward(&y, mode);
        let out = if self.act {
            relu(&mut y.data);
            Some(y.data.clone())
        } else {
            None
        };
        (y, ConvNormActCache { conv, norm, out })
    }

    pub fn backward(&mut self, cache: &ConvNormActCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let mut d = dy.clone();
        if let Some(out) = &cache.out {
            relu_backward(out, &mut d.data);
        }
        let d = self.norm.backward(&cache.norm, &d);
        self.conv.backward(&cache.conv, &d)
    }
}

impl<T: Real> Module<T> for ConvNormAct<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Residual block that widens the channel count: main path
/// 1x1 -> 3x3 -> 1x1 (widening), shortcut is a 1x1 projection.
#[derive(Debug, Clone)]
pub struct ResidualUpBlock<T> {
    pub reduce: ConvNormAct<T>,
    pub spatial: ConvNormAct<T>,
    pub expand: ConvNormAct<T>,
    pub project: ConvNormAct<T>,
}

#[derive(Debug, Clone)]
pub struct ResidualUpCache<T> {
    reduce: ConvNormActCache<T>,
    spatial: ConvNormActCache<T>,
    expand: ConvNormActCache<T>,
    project: ConvNormActCache<T>,
    out: Array2<T>,
}

impl<T: Real> ResidualUpBlock<T> {
    pub fn new(init: &Init, c_in: usize, c_out: usize, norm: NormKind) -> Self {
        ResidualUpBlock {
            reduce: ConvNormAct::new(&init.child("reduce"), c_in, c_in, 1, 1, norm, true),
            spatial: ConvNormAct::new(&init.child("spatial"), c_in, c_in, 3, 1, norm, true),
            expand: ConvNormAct::new(&init.child("expand"), c_in, c_out, 1, 1, norm, false),
            project: ConvNormAct::new(&init.child("project"), c_in, c_out, 1, 1, norm, false),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> (FeatureMap<T>, ResidualUpCache<T>) {
        let (a, reduce) = self.reduce.forward(x, mode);
        let (b, spatial) = self.spatial.forward(&a, mode);
        let (mut c, expand) = self.expand.forward(&b, mode);
        let (p, project) = self.project.forward(x, mode);
        c.data += &p.data;
        relu(&mut c.data);
        let cache = ResidualUpCache {
            reduce,
            spatial,
            expand,
            project,
            out: c.data.clone(),
        };
        (c, cache)
    }

    pub fn backward(&mut self, cache: &ResidualUpCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let mut d = dy.clone();
        relu_backward(&cache.out, &mut d.data);
        let db = self.expand.backward(&cache.expand, &d);
        let da = self.spatial.backward(&cache.spatial, &db);
        let mut dx = self.reduce.backward(&cache.reduce, &da);
        let dp = self.project.backward(&cache.project, &d);
        dx.data += &dp.data;
        dx
    }
}

impl<T: Real> Module<T> for ResidualUpBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

/// Residual bottleneck: 1x1 reduce -> 3x3 -> 1x1 expand, identity shortcut.
#[derive(Debug, Clone)]
pub struct BottleneckBlock<T> {
    pub reduce: ConvNormAct<T>,
    pub spatial: ConvNormAct<T>,
    pub expand: ConvNormAct<T>,
}

#[derive(Debug, Clone)]
pub struct BottleneckCache<T> {
    reduce: ConvNormActCache<T>,
    spatial: ConvNormActCache<T>,
    expand: ConvNormActCache<T>,
    out: Array2<T>,
}

impl<T: Real> BottleneckBlock<T> {
    pub fn new(init: &Init, channels: usize, width: usize, norm: NormKind) -> Self {
        BottleneckBlock {
            reduce: ConvNormAct::new(&init.child("reduce"), channels, width, 1, 1, norm, true),
            spatial: ConvNormAct::new(&init.child("spatial"), width, width, 3, 1, norm, true),
            expand: ConvNormAct::new(&init.child("expand"), width, channels, 1, 1, norm, false),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>, mode: Mode) -> (FeatureMap<T>, BottleneckCache<T>) {
        let (a, reduce) = self.reduce.forward(x, mode);
        let (b, spatial) = self.spatial.forward(&a, mode);
        let (mut c, expand) = self.expand.forward(&b, mode);
        c.data += &x.data;
        relu(&mut c.data);
        let cache = BottleneckCache {
            reduce,
            spatial,
            expand,
            out: c.data.clone(),
        };
        (c, cache)
    }

    pub fn backward(&mut self, cache: &BottleneckCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let mut d = dy.clone();
        relu_backward(&cache.out, &mut d.data);
        let db = self.expand.backward(&cache.expand, &d);
        let da = self.spatial.backward(&cache.spatial, &db);
        let mut dx = self.reduce.backward(&cache.reduce, &da);
        dx.data += &d.data;
        dx
    }
}

impl<T: Real> Module<T> for BottleneckBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }
}

/// Embedded-Gaussian non-local block over the positions of each item:
/// `z_i = x_i + W_out * sum_j softmax_j(theta_i . phi_j) g_j`.
#[derive(Debug, Clone)]
pub struct NonLocalBlock<T> {
    pub theta: Conv2d<T>,
    pub phi: Conv2d<T>,
    pub g: Conv2d<T>,
    pub out: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct NonLocalCache<T> {
    theta_c: ConvCache<T>,
    phi_c: ConvCache<T>,
    g_c: ConvCache<T>,
    out_c: ConvCache<T>,
    theta: Array2<T>,
    phi: Array2<T>,
    g: Array2<T>,
    /// Row-stochastic `(P, P)` attention per item.
    attn: Vec<Array2<T>>,
}

impl<T> NonLocalCache<T> {
    pub fn attention(&self, item: usize) -> &Array2<T> {
        &self.attn[item]
    }
}

impl<T: Real> NonLocalBlock<T> {
    pub fn new(init: &Init, channels: usize, embed: usize) -> Self {
        // Small embedding weights keep the initial attention close to uniform.
        let emb_std = (1.0 / channels as f64).sqrt();
        let mut theta = Conv2d::new(&init.child("theta"), channels, embed, 1, 1, 0);
        let mut phi = Conv2d::new(&init.child("phi"), channels, embed, 1, 1, 0);
        theta.weight = init.child("theta").normal("weight", &[embed, channels], emb_std);
        phi.weight = init.child("phi").normal("weight", &[embed, channels], emb_std);
        NonLocalBlock {
            theta,
            phi,
            g: Conv2d::new(&init.child("g"), channels, embed, 1, 1, 0),
            out: Conv2d::new(&init.child("out"), embed, channels, 1, 1, 0),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, NonLocalCache<T>) {
        let p = x.positions();
        let (theta, theta_c) = self.theta.forward(x);
        let (phi, phi_c) = self.phi.forward(x);
        let (g, g_c) = self.g.forward(x);
        let e = g.channels();
        let mut y = Array2::zeros((e, x.n * p));
        let mut attn = Vec::with_capacity(x.n);
        for i in 0..x.n {
            let cols = s![.., i * p..(i + 1) * p];
            let mut scores = theta.data.slice(cols).t().dot(&phi.data.slice(cols));
            softmax_rows(&mut scores);
            let yi = g.data.slice(cols).dot(&scores.t());
            y.slice_mut(cols).assign(&yi);
            attn.push(scores);
        }
        let y = x.with_data(y);
        let (mut z, out_c) = self.out.forward(&y);
        z.data += &x.data;
        let cache = NonLocalCache {
            theta_c,
            phi_c,
            g_c,
            out_c,
            theta: theta.data,
            phi: phi.data,
            g: g.data,
            attn,
        };
        (z, cache)
    }

    pub fn backward(&mut self, cache: &NonLocalCache<T>, dz: &FeatureMap<T>) -> FeatureMap<T> {
        let p = dz.positions();
        let dy = self.out.backward(&cache.out_c, dz);
        let e = dy.channels();
        let mut dtheta = Array2::zeros((e, dz.n * p));
        let mut dphi = Array2::zeros((e, dz.n * p));
        let mut dg = Array2::zeros((e, dz.n * p));
        for i in 0..dz.n {
            let cols = s![.., i * p..(i + 1) * p];
            let a = &cache.attn[i];
            let dyi = dy.data.slice(cols);
            dg.slice_mut(cols).assign(&dyi.dot(a));
            let da = dyi.t().dot(&cache.g.slice(cols));
            // softmax backward, row-wise
            let mut ds = a * &da;
            let row_dot = ds.sum_axis(Axis(1));
            for (mut row, (&r, arow)) in ds.outer_iter_mut().zip(row_dot.iter().zip(a.outer_iter())) {
                ndarray::Zip::from(&mut row).and(&arow).for_each(|v, &av| *v -= av * r);
            }
            dtheta.slice_mut(cols).assign(&cache.phi.slice(cols).dot(&ds.t()));
            dphi.slice_mut(cols).assign(&cache.theta.slice(cols).dot(&ds));
        }
        let mut dx = dz.clone();
        dx.data += &self.theta.backward(&cache.theta_c, &dz.with_data(dtheta)).data;
        dx.data += &self.phi.backward(&cache.phi_c, &dz.with_data(dphi)).data;
        dx.data += &self.g.backward(&cache.g_c, &dz.with_data(dg)).data;
        dx
    }
}

pub(crate) fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Real> Module<T> for NonLocalBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.theta.visit(&join(prefix, "theta"), f);
        self.phi.visit(&join(prefix, "phi"), f);
        self.g.visit(&join(prefix, "g"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.theta.visit_mut(&join(prefix, "theta"), f);
        self.phi.visit_mut(&join(prefix, "phi"), f);
        self.g.visit_mut(&join(prefix, "g"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
