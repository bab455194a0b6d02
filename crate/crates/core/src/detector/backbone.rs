use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ConvNormAct;
use crate::nn::{join, FeatureMap, Init, Mode, Module, NormKind, Param, Real};


/// Stride-2 3x3 stages followed by stride-1 refinement convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output widths of the inner stride-2 stages; one more stride-2 stage
    /// emits the RoI channel count.
    pub widths: Vec<usize>,
    /// Extra stride-1 convolutions at the output resolution.
    pub extra_convs: usize,
    pub norm: NormKind,
}

impl BackboneConfig {
    /// Input pixels per feature cell.
    pub fn stride(&self) -> usize {
        1 << (self.widths.len() + 1)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![32, 64, 128],
            extra_convs: 1,
            norm: NormKind::Batch,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub stages: Vec<ConvNormAct<T>>,
    pub stride: usize,
}

pub type BackboneCache<T> = Vec<crate::heads::ConvNormActCache<T>>;

impl<T: Real> Backbone<T> {
    pub fn new(init: &Init, cfg: &BackboneConfig, out_channels: usize) -> Self {
        let mut stages = Vec::new();
        let mut c_in = 3;
        let widths = cfg.widths.iter().copied().chain(std::iter::once(out_channels));
        for (i, c_out) in widths.enumerate() {
            stages.push(ConvNormAct::new(&init.child(&format!("stage{i}")), c_in, c_out, 3, 2, cfg.norm, true));
            c_in = c_out;
        }
        for i in 0..cfg.extra_convs {
            stages.push(ConvNormAct::new(
                &init.child(&format!("extra{i}")),
                out_channels,
                out_channels,
                3,
                1,
                cfg.norm,
                true,
            ));
        }
        Backbone {
            stages,
            stride: cfg.stride(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.conv.out_channels()).unwrap_or(3)
    }

    /// `(3, H, W)` images to `(C, H/s, W/s)` features at the backbone stride.
    pub fn forward(&self, images: &FeatureMap<T>, mode: Mode) -> Result<(FeatureMap<T>, BackboneCache<T>)> {
        if images.channels() != 3 {
            return Err(Error::contract(format!("backbone expects 3 channels, got {}", images.channels())));
        }
        let s = self.stride;
        if images.h % s != 0 || images.w % s != 0 || images.h == 0 || images.w == 0 {
            return Err(Error::contract(format!(
                "image size {}x{} is not a positive multiple of {s}",
                images.w, images.h
            )));
        }
        let mut x = images.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (y, c) = stage.forward(&x, mode);
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(&mut self, caches: &BackboneCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let mut d = dy.clone();
        for (stage, c) in self.stages.iter_mut().zip(caches).rev() {
            d = stage.backward(c, &d);
        }
        d
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}
