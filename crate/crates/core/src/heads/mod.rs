//! The fully connected head, the convolution head, and their output layers.

mod blocks;

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

pub use blocks::{
    BottleneckBlock, ConvNormAct, ConvNormActCache, NonLocalBlock, NonLocalCache, ResidualUpBlock,
};
pub(crate) use blocks::softmax_rows;
use blocks::{BottleneckCache, ResidualUpCache};

use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, FeatureMap, Init, Linear, Mode, Module, NormKind, Param, Real};

/// Widths of the RoI feature and of both heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadDims {
    /// Channels of the pooled RoI feature.
    pub roi_channels: usize,
    /// Side of the pooled RoI grid.
    pub pool: usize,
    /// Width of the head output vector.
    pub hidden: usize,
    /// Inner width of bottleneck blocks.
    pub bottleneck: usize,
}

impl Default for HeadDims {
    fn default() -> Self {
        HeadDims {
            roi_channels: 256,
            pool: 7,
            hidden: 1024,
            bottleneck: 256,
        }
    }
}

impl HeadDims {
    pub fn fc_input(&self) -> usize {
        self.roi_channels * self.pool * self.pool
    }
}

/// Depth and composition of the convolution head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Number of blocks including the channel-widening block.
    pub blocks: usize,
    pub use_nonlocal: bool,
    pub nonlocal_embed_dim: usize,
    pub norm: NormKind,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            blocks: 5,
            use_nonlocal: true,
            nonlocal_embed_dim: 512,
            norm: NormKind::Batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    ResidualUp,
    Bottleneck,
    NonLocal,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("conv-head needs at least one block".into()));
        }
        if self.use_nonlocal && self.blocks % 2 == 0 {
            return Err(Error::Config(format!(
                "conv-head with non-local blocks needs an odd block count, got {}",
                self.blocks
            )));
        }
        if self.use_nonlocal && self.nonlocal_embed_dim == 0 {
            return Err(Error::Config("nonlocal_embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Block sequence: the widening block, then bottlenecks, each preceded by
    /// a non-local block when enabled (`(K+1)/2` residual, `(K-1)/2` non-local).
    pub fn arrangement(&self) -> Vec<BlockKind> {
        let mut out = vec![BlockKind::ResidualUp];
        if self.use_nonlocal {
            for _ in 0..(self.blocks - 1) / 2 {
                out.push(BlockKind::NonLocal);
                out.push(BlockKind::Bottleneck);
            }
        } else {
            out.extend(std::iter::repeat_n(BlockKind::Bottleneck, self.blocks.saturating_sub(1)));
        }
        out
    }
}

pub fn check_roi<T: Real>(roi: &FeatureMap<T>, dims: &HeadDims) -> Result<()> {
    if roi.channels() != dims.roi_channels || roi.h != dims.pool || roi.w != dims.pool {
        return Err(Error::contract(format!(
            "RoI feature must be ({}, {}, {}), got ({}, {}, {})",
            dims.roi_channels,
            dims.pool,
            dims.pool,
            roi.channels(),
            roi.h,
            roi.w
        )));
    }
    if roi.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("RoI feature has non-finite entries"));
    }
    Ok(())
}

/// Two fully connected layers with rectifiers on the flattened RoI feature.
#[derive(Debug, Clone)]
pub struct FcHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub dims: HeadDims,
}

#[derive(Debug, Clone)]
pub struct FcCache<T> {
    x: Array2<T>,
    h1: Array2<T>,
    h2: Array2<T>,
}

impl<T: Real> FcHead<T> {
    pub fn new(init: &Init, dims: HeadDims) -> Self {
        FcHead {
            fc1: Linear::new(&init.child("fc1"), dims.fc_input(), dims.hidden),
            fc2: Linear::new(&init.child("fc2"), dims.hidden, dims.hidden),
            dims,
        }
    }

    /// `(N RoIs) -> (N, hidden)`.
    pub fn forward(&self, roi: &FeatureMap<T>) -> Result<(Array2<T>, FcCache<T>)> {
        check_roi(roi, &self.dims)?;
        let x = roi.to_rows();
        let mut h1 = self.fc1.forward(&x);
        relu(&mut h1);
        let mut h2 = self.fc2.forward(&h1);
        relu(&mut h2);
        Ok((h2.clone(), FcCache { x, h1, h2 }))
    }

    pub fn backward(&mut self, cache: &FcCache<T>, dy: &Array2<T>) -> FeatureMap<T> {
        let mut d = dy.clone();
        relu_backward(&cache.h2, &mut d);
        let mut d = self.fc2.backward(&cache.h1, &d);
        relu_backward(&cache.h1, &mut d);
        let dx = self.fc1.backward(&cache.x, &d);
        FeatureMap::from_rows(&dx, self.dims.roi_channels, self.dims.pool, self.dims.pool)
    }
}

impl<T: Real> Module<T> for FcHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub enum ConvBlock<T> {
    Bottleneck(BottleneckBlock<T>),
    NonLocal(NonLocalBlock<T>),
}

#[derive(Debug, Clone)]
enum BlockCache<T> {
    Bottleneck(BottleneckCache<T>),
    NonLocal(NonLocalCache<T>),
}

/// Widening residual block, a configurable block stack, then average pooling.
#[derive(Debug, Clone)]
pub struct ConvHead<T> {
    pub up: ResidualUpBlock<T>,
    pub blocks: Vec<ConvBlock<T>>,
    pub dims: HeadDims,
    pub config: HeadConfig,
}

#[derive(Debug, Clone)]
pub struct ConvHeadCache<T> {
    up: ResidualUpCache<T>,
    blocks: Vec<BlockCache<T>>,
    h: usize,
    w: usize,
}

impl<T> ConvHeadCache<T> {
    /// Attention matrices of the first non-local block, if any.
    pub fn first_attention(&self) -> Option<&NonLocalCache<T>> {
        self.blocks.iter().find_map(|b| match b {
            BlockCache::NonLocal(c) => Some(c),
            BlockCache::Bottleneck(_) => None,
        })
    }
}

/// Pooled vector and the pre-pooling map it came from.
#[derive(Debug, Clone)]
pub struct ConvHeadOutput<T> {
    pub pooled: Array2<T>,
    pub map: FeatureMap<T>,
}

impl<T: Real> ConvHead<T> {
    pub fn new(init: &Init, dims: HeadDims, config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let up = ResidualUpBlock::new(&init.child("up"), dims.roi_channels, dims.hidden, config.norm);
        let blocks = config
            .arrangement()
            .into_iter()
            .skip(1)
            .enumerate()
            .map(|(i, kind)| {
                let name = format!("block{}", i + 1);
                match kind {
                    BlockKind::NonLocal => ConvBlock::NonLocal(NonLocalBlock::new(
                        &init.child(&name),
                        dims.hidden,
                        config.nonlocal_embed_dim,
                    )),
                    _ => ConvBlock::Bottleneck(BottleneckBlock::new(
                        &init.child(&name),
                        dims.hidden,
                        dims.bottleneck,
                        config.norm,
                    )),
                }
            })
            .collect();
        Ok(ConvHead {
            up,
            blocks,
            dims,
            config,
        })
    }

    pub fn arrangement(&self) -> Vec<BlockKind> {
        std::iter::once(BlockKind::ResidualUp)
            .chain(self.blocks.iter().map(|b| match b {
                ConvBlock::Bottleneck(_) => BlockKind::Bottleneck,
                ConvBlock::NonLocal(_) => BlockKind::NonLocal,
            }))
            .collect()
    }

    pub fn forward(&self, roi: &FeatureMap<T>, mode: Mode) -> Result<(ConvHeadOutput<T>, ConvHeadCache<T>)> {
        check_roi(roi, &self.dims)?;
        let (mut x, up) = self.up.forward(roi, mode);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = match block {
                ConvBlock::Bottleneck(b) => {
                    let (y, c) = b.forward(&x, mode);
                    caches.push(BlockCache::Bottleneck(c));
                    y
                }
                ConvBlock::NonLocal(b) => {
                    let (y, c) = b.forward(&x);
                    caches.push(BlockCache::NonLocal(c));
                    y
                }
            };
        }
        let pooled = x.average_pool();
        let cache = ConvHeadCache {
            up,
            blocks: caches,
            h: x.h,
            w: x.w,
        };
        Ok((ConvHeadOutput { pooled, map: x }, cache))
    }

    pub fn backward(&mut self, cache: &ConvHeadCache<T>, dy: &Array2<T>) -> FeatureMap<T> {
        let mut d = FeatureMap::average_pool_backward(dy, cache.h, cache.w);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = match (block, c) {
                (ConvBlock::Bottleneck(b), BlockCache::Bottleneck(c)) => b.backward(c, &d),
                (ConvBlock::NonLocal(b), BlockCache::NonLocal(c)) => b.backward(c, &d),
                _ => unreachable!("cache does not match block"),
            };
        }
        self.up.backward(&cache.up, &d)
    }
}

impl<T: Real> Module<T> for ConvHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let name = join(prefix, &format!("block{}", i + 1));
            match b {
                ConvBlock::Bottleneck(b) => b.visit(&name, f),
                ConvBlock::NonLocal(b) => b.visit(&name, f),
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let name = join(prefix, &format!("block{}", i + 1));
            match b {
                ConvBlock::Bottleneck(b) => b.visit_mut(&name, f),
                ConvBlock::NonLocal(b) => b.visit_mut(&name, f),
            }
        }
    }
}

/// Affine classifier producing `C+1` logits (background at index 0).
pub fn classifier<T: Real>(init: &Init, hidden: usize, num_classes: usize) -> Linear<T> {
    Linear::with_std(init, hidden, num_classes + 1, 0.01)
}

/// Class-specific box regressor producing `4C` deltas, class `k` (1-based)
/// at columns `4(k-1)..4k`.
pub fn regressor<T: Real>(init: &Init, hidden: usize, num_classes: usize) -> Linear<T> {
    Linear::with_std(init, hidden, 4 * num_classes, 0.001)
}

/// Per-cell outputs of the first fc layer: cell `c` of the pooled grid
/// contributes `x_c^T W_c`, where `W_c` stacks the weight rows that multiply
/// the channels at `c`. Summing all cells gives the full pre-activation
/// `W^T x` (bias excluded). Returns `(pool, pool, out)`.
pub fn reconstruct_fc_feature_map<T: Real>(
    weight: ArrayView2<'_, T>,
    roi: &FeatureMap<T>,
) -> Result<Array3<T>> {
    if roi.n != 1 {
        return Err(Error::contract(format!("expected a single RoI, got {}", roi.n)));
    }
    let (c, h, w) = (roi.channels(), roi.h, roi.w);
    let p = h * w;
    if weight.nrows() != c * p {
        return Err(Error::contract(format!(
            "fc weight has {} rows, RoI flattens to {}",
            weight.nrows(),
            c * p
        )));
    }
    let d = weight.ncols();
    let mut out = Array3::zeros((h, w, d));
    for cell in 0..p {
        let w_cell = weight.slice(s![cell..;p, ..]);
        let x_cell = roi.data.column(cell);
        let y = x_cell.dot(&w_cell);
        out.slice_mut(s![cell / w, cell % w, ..]).assign(&y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;

    fn tiny_dims() -> HeadDims {
        HeadDims {
            roi_channels: 4,
            pool: 3,
            hidden: 8,
            bottleneck: 4,
        }
    }

    fn roi(n: usize, dims: &HeadDims, seed: u64) -> FeatureMap<f64> {
        let p: Param<f64> = Init::new(seed).normal("roi", &[dims.roi_channels, n * dims.pool * dims.pool], 1.0);
        FeatureMap::new(p.mat().to_owned(), n, dims.pool, dims.pool)
    }

    #[test]
    fn arrangement_follows_block_count() {
        let cfg = HeadConfig::default();
        use BlockKind::*;
        assert_eq!(
            cfg.arrangement(),
            vec![ResidualUp, NonLocal, Bottleneck, NonLocal, Bottleneck]
        );
        let plain = HeadConfig {
            blocks: 3,
            use_nonlocal: false,
            ..cfg
        };
        assert_eq!(plain.arrangement(), vec![ResidualUp, Bottleneck, Bottleneck]);
        assert!(HeadConfig { blocks: 0, ..cfg }.validate().is_err());
        assert!(HeadConfig { blocks: 4, ..cfg }.validate().is_err());
    }

    #[test]
    fn full_width_parameter_counts() {
        let dims = HeadDims::default();
        let init = Init::new(0);
        let fc: FcHead<f32> = FcHead::new(&init, dims);
        // 12544*1024 + 1024 + 1024*1024 + 1024
        assert_eq!(fc.num_trainable(), 13_895_680);
        let nl: NonLocalBlock<f32> = NonLocalBlock::new(&init, 1024, 512);
        let weights = 4 * 1024 * 512;
        assert_eq!(nl.num_trainable(), weights + 3 * 512 + 1024);
        assert!((nl.num_trainable() as f64 / 1e6 - 2.10).abs() < 0.01);
    }

    #[test]
    fn fc_head_zero_input_zero_output() {
        let dims = tiny_dims();
        let head: FcHead<f64> = FcHead::new(&Init::new(1), dims);
        let x = FeatureMap::zeros(4, 2, 3, 3);
        let (y, _) = head.forward(&x).unwrap();
        assert_eq!(y.dim(), (2, 8));
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(head.forward(&FeatureMap::<f64>::zeros(3, 1, 3, 3)).is_err());
    }

    #[test]
    fn up_block_zero_weights_zero_output() {
        let mut up: ResidualUpBlock<f64> = ResidualUpBlock::new(&Init::new(2), 4, 8, NormKind::None);
        up.visit_mut("", &mut |_, p| p.value.fill(0.0));
        let (y, _) = up.forward(&roi(2, &tiny_dims(), 3), Mode::Train);
        assert_eq!(y.channels(), 8);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_zero_main_path_is_identity() {
        let mut b: BottleneckBlock<f64> = BottleneckBlock::new(&Init::new(4), 8, 4, NormKind::Batch);
        b.expand.conv.weight.value.fill(0.0);
        let mut x = roi(2, &HeadDims { roi_channels: 8, ..tiny_dims() }, 5);
        // block inputs are rectified activations
        relu(&mut x.data);
        let (y, _) = b.forward(&x, Mode::Train);
        assert_eq!(y, x);
    }

    #[test]
    fn nonlocal_zero_output_projection_is_identity() {
        let mut nl: NonLocalBlock<f64> = NonLocalBlock::new(&Init::new(6), 8, 4);
        nl.out.weight.value.fill(0.0);
        let x = roi(3, &HeadDims { roi_channels: 8, ..tiny_dims() }, 7);
        let (y, cache) = nl.forward(&x);
        assert_eq!(y, x);
        for i in 0..3 {
            for row in cache.attention(i).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_head_shapes_and_exposed_map() {
        let dims = tiny_dims();
        let cfg = HeadConfig {
            blocks: 3,
            use_nonlocal: true,
            nonlocal_embed_dim: 4,
            norm: NormKind::Batch,
        };
        let head: ConvHead<f64> = ConvHead::new(&Init::new(8), dims, cfg).unwrap();
        let (out, _) = head.forward(&roi(5, &dims, 9), Mode::Train).unwrap();
        assert_eq!(out.pooled.dim(), (5, 8));
        assert_eq!((out.map.channels(), out.map.n, out.map.h, out.map.w), (8, 5, 3, 3));
        let pooled = out.map.average_pool();
        assert_eq!(pooled, out.pooled);
    }

    #[test]
    fn zero_output_layers() {
        let init = Init::new(0);
        let mut cls: Linear<f64> = classifier(&init.child("cls"), 8, 3);
        let mut reg: Linear<f64> = regressor(&init.child("reg"), 8, 3);
        cls.weight.value.fill(0.0);
        reg.weight.value.fill(0.0);
        let f = Array2::from_elem((2, 8), 1.5);
        let mut logits = cls.forward(&f);
        assert_eq!(logits.ncols(), 4);
        softmax_rows(&mut logits);
        assert!(logits.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let deltas = reg.forward(&f);
        assert_eq!(deltas.ncols(), 12);
        assert!(deltas.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_sums_to_first_layer() {
        let dims = tiny_dims();
        let head: FcHead<f64> = FcHead::new(&Init::new(10), dims);
        let x = roi(1, &dims, 11);
        let map = reconstruct_fc_feature_map(head.fc1.weight.mat(), &x).unwrap();
        assert_eq!(map.dim(), (3, 3, 8));
        let total = map.sum_axis(ndarray::Axis(0)).sum_axis(ndarray::Axis(0));
        let direct = x.to_rows().dot(&head.fc1.weight.mat());
        for (a, b) in total.iter().zip(direct.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = reconstruct_fc_feature_map(head.fc1.weight.mat(), &FeatureMap::zeros(4, 1, 3, 3)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(reconstruct_fc_feature_map(head.fc1.weight.mat(), &FeatureMap::zeros(4, 1, 2, 2)).is_err());
    }
}
