//! Central finite differences of the total loss in double precision.

use doublehead::detector::{Batch, Detector, DetectorVariant};
use doublehead::nn::{Mode, Module, NormKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mini_batch, mini_spec};

const EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;
const ENTRIES_PER_PARAM: usize = 4;

fn loss(det: &mut Detector<f64>, batch: &Batch<f64>) -> f64 {
    det.loss(batch, Mode::Train, false).unwrap().total
}

fn set(det: &mut Detector<f64>, name: &str, idx: usize, v: f64) -> f64 {
    let mut old = 0.0;
    det.visit_mut("", &mut |n, p| {
        if n == name {
            let slot = p.value.iter_mut().nth(idx).unwrap();
            old = *slot;
            *slot = v;
        }
    });
    old
}

/// Worst relative error per parameter, for sampled entries of each.
pub fn gradient_errors(variant: DetectorVariant, norm: NormKind, seed: u64) -> Vec<(String, f64)> {
    let mut det: Detector<f64> = Detector::new(mini_spec(variant, norm), seed).unwrap();
    let batch = mini_batch::<f64>(2, 6, seed);
    det.zero_grad();
    det.loss(&batch, Mode::Train, true).unwrap();
    let mut params = Vec::new();
    det.visit("", &mut |n, p| {
        if p.trainable {
            params.push((n.to_string(), p.grad.iter().copied().collect::<Vec<f64>>()));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut out = Vec::new();
    for (name, grad) in params {
        let mut worst: f64 = 0.0;
        for _ in 0..ENTRIES_PER_PARAM.min(grad.len()) {
            let i = rng.random_range(0..grad.len());
            let x = set(&mut det, &name, i, 0.0);
            set(&mut det, &name, i, x + EPS);
            let up = loss(&mut det, &batch);
            set(&mut det, &name, i, x - EPS);
            let down = loss(&mut det, &batch);
            set(&mut det, &name, i, x);
            let numeric = (up - down) / (2.0 * EPS);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(err);
        }
        out.push((name, worst));
    }
    out
}

