use ndarray::{Array2, Axis};

use super::{join, Init, Module, Param, Real};

/// Affine map `y = x W + b` on row batches; `W` is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    /// He-normal weights, zero bias.
    pub fn new(init: &Init, fan_in: usize, fan_out: usize) -> Self {
        Self::with_std(init, fan_in, fan_out, (2.0 / fan_in as f64).sqrt())
    }

    pub fn with_std(init: &Init, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Linear {
            weight: init.normal("weight", &[fan_in, fan_out], std),
            bias: init.constant(&[fan_out], 0.0),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        assert_eq!(x.ncols(), self.in_features(), "linear input width");
        let mut y = x.dot(&self.weight.mat());
        y += &self.bias.vec();
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        let dw = x.t().dot(dy);
        self.weight.accumulate(dw.into_dyn().view());
        let db = dy.sum_axis(Axis(0));
        self.bias.accumulate(db.into_dyn().view());
        dy.dot(&self.weight.mat().t())
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
