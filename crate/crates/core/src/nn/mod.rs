//! Minimal layer library with explicit backward passes.
//!
//! Activations are stored channel-major: a [`FeatureMap`] holds a
//! `(C, N*H*W)` matrix so that 1x1 convolutions are a single matrix product
//! and per-channel statistics are row reductions.

mod conv;
mod linear;
mod norm;
mod optim;

use std::fmt::{Debug, Display};
use std::hash::Hasher;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use fnv::FnvHasher;
use ndarray::{Array2, ArrayD, Axis, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use norm::{Norm, NormCache, NormKind};
pub use optim::{LrSchedule, Sgd};

/// Floating point element type of every tensor in the lab.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + Default
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `N` images (or RoIs) of `C` channels on an `h x w` grid, stored as a
/// `(C, N*h*w)` matrix. Column `n*h*w + y*w + x` is position `(y, x)` of item `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array2<T>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Array2<T>, n: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.ncols(), n * h * w, "feature map column count");
        FeatureMap { data, n, h, w }
    }

    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        FeatureMap::new(Array2::zeros((c, n * h * w)), n, h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn with_data(&self, data: Array2<T>) -> Self {
        FeatureMap::new(data, self.n, self.h, self.w)
    }

    /// Flattens every item to a row `(c, y, x)`, returning `(N, C*h*w)`.
    pub fn to_rows(&self) -> Array2<T> {
        let (c, p) = (self.channels(), self.positions());
        let mut out = Array2::zeros((self.n, c * p));
        for ch in 0..c {
            let row = self.data.row(ch);
            for n in 0..self.n {
                for pos in 0..p {
                    out[[n, ch * p + pos]] = row[n * p + pos];
                }
            }
        }
        out
    }

    /// Inverse of [`FeatureMap::to_rows`].
    pub fn from_rows(rows: &Array2<T>, c: usize, h: usize, w: usize) -> Self {
        let p = h * w;
        assert_eq!(rows.ncols(), c * p, "row length");
        let n = rows.nrows();
        let mut data = Array2::zeros((c, n * p));
        for ch in 0..c {
            for i in 0..n {
                for pos in 0..p {
                    data[[ch, i * p + pos]] = rows[[i, ch * p + pos]];
                }
            }
        }
        FeatureMap::new(data, n, h, w)
    }

    /// Spatial mean per item and channel, `(N, C)`.
    pub fn average_pool(&self) -> Array2<T> {
        let p = self.positions();
        let scale = T::of(1.0 / p as f64);
        let mut out = Array2::zeros((self.n, self.channels()));
        for (ch, row) in self.data.axis_iter(Axis(0)).enumerate() {
            for n in 0..self.n {
                let s: T = row.iter().skip(n * p).take(p).copied().sum();
                out[[n, ch]] = s * scale;
            }
        }
        out
    }

    /// Gradient of [`FeatureMap::average_pool`].
    pub fn average_pool_backward(dy: &Array2<T>, h: usize, w: usize) -> Self {
        let p = h * w;
        let (n, c) = dy.dim();
        let scale = T::of(1.0 / p as f64);
        let mut data = Array2::zeros((c, n * p));
        for ch in 0..c {
            for i in 0..n {
                let g = dy[[i, ch]] * scale;
                for pos in 0..p {
                    data[[ch, i * p + pos]] = g;
                }
            }
        }
        FeatureMap::new(data, n, h, w)
    }
}

pub fn relu<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Masks `dy` where the rectifier output `y` was zero.
pub fn relu_backward<T: Real>(y: &Array2<T>, dy: &mut Array2<T>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
}

/// A learnable tensor (or a non-trainable buffer such as running statistics).
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
    /// Set when a backward pass wrote into `grad` since the last reset.
    pub touched: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
            touched: false,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
        self.touched = false;
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn mat(&self) -> ndarray::ArrayView2<'_, T> {
        self.value.view().into_dimensionality().expect("2-d parameter")
    }

    pub fn vec(&self) -> ndarray::ArrayView1<'_, T> {
        self.value.view().into_dimensionality().expect("1-d parameter")
    }

    pub fn accumulate(&mut self, g: ndarray::ArrayViewD<'_, T>) {
        self.grad += &g;
        self.touched = true;
    }
}

/// Anything holding named parameters.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic initializer: every tensor draws from its own stream seeded
/// by `(seed, full parameter name)`, so adding or removing a branch never
/// changes the initial values of the others.
#[derive(Debug, Clone)]
pub struct Init {
    seed: u64,
    prefix: String,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            seed,
            prefix: String::new(),
        }
    }

    pub fn child(&self, name: &str) -> Init {
        Init {
            seed: self.seed,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut h = FnvHasher::default();
        h.write_u64(self.seed);
        h.write(join(&self.prefix, name).as_bytes());
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    pub fn normal<T: Real>(&self, name: &str, shape: &[usize], std: f64) -> Param<T> {
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    }

    pub fn constant<T: Real>(&self, shape: &[usize], v: f64) -> Param<T> {
        Param::new(ArrayD::from_elem(IxDyn(shape), T::of(v)))
    }
}
