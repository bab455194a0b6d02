use ndarray::{Array2, Axis};

use super::{join, FeatureMap, Init, Module, Param, Real};

/// Square-kernel 2-D convolution with zero padding, lowered to a matrix
/// product over an im2col buffer. Weight layout is `(C_out, C_in*k*k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// im2col matrix, or the input itself for pointwise convolutions.
    cols: Array2<T>,
    in_h: usize,
    in_w: usize,
    n: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(init: &Init, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            weight: init.normal("weight", &[c_out, fan_in], (2.0 / fan_in as f64).sqrt()),
            bias: init.constant(&[c_out], 0.0),
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1] / (self.kernel * self.kernel)
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = 2 * self.padding;
        ((h + p - k) / self.stride + 1, (w + p - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        assert_eq!(x.channels(), self.in_channels(), "conv input channels");
        let (oh, ow) = self.output_size(x.h, x.w);
        let cols = if self.pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        let mut y = self.weight.mat().dot(&cols);
        let b = self.bias.vec();
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        let cache = ConvCache {
            cols,
            in_h: x.h,
            in_w: x.w,
            n: x.n,
        };
        (FeatureMap::new(y, x.n, oh, ow), cache)
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let dw = dy.data.dot(&cache.cols.t());
        self.weight.accumulate(dw.into_dyn().view());
        let db = dy.data.sum_axis(Axis(1));
        self.bias.accumulate(db.into_dyn().view());
        let dcols = self.weight.mat().t().dot(&dy.data);
        if self.pointwise() {
            FeatureMap::new(dcols, cache.n, cache.in_h, cache.in_w)
        } else {
            self.col2im(&dcols, cache.n, cache.in_h, cache.in_w, dy.h, dy.w)
        }
    }

    fn im2col(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Array2<T> {
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let c_in = x.channels();
        let (h, w, n) = (x.h, x.w, x.n);
        let mut cols = Array2::zeros((c_in * k * k, n * oh * ow));
        let src = x.data.as_standard_layout();
        let src = src.as_slice().expect("contiguous");
        let dst = cols.as_slice_mut().expect("contiguous");
        let ncols = n * oh * ow;
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let out = &mut dst[row * ncols..(row + 1) * ncols];
                    for i in 0..n {
                        let base = c * n * h * w + i * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = base + iy as usize * w;
                            let out_row = i * oh * ow + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    out[out_row + ox] = src[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, n: usize, h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap<T> {
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let c_in = self.in_channels();
        let mut dx = Array2::zeros((c_in, n * h * w));
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("contiguous");
        let dst = dx.as_slice_mut().expect("contiguous");
        let ncols = n * oh * ow;
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let g = &src[row * ncols..(row + 1) * ncols];
                    for i in 0..n {
                        let base = c * n * h * w + i * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = base + iy as usize * w;
                            let g_row = i * oh * ow + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_row + ix as usize] += g[g_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        FeatureMap::new(dx, n, h, w)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
