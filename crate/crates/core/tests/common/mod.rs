#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use doublehead::detector::{
    Batch, BackboneConfig, DetectorSpec, DetectorVariant, Proposal, ProposalBatch,
};
use doublehead::geometry::{encode_delta, iou, BBox};
use doublehead::heads::{HeadConfig, HeadDims};
use doublehead::nn::{FeatureMap, NormKind, Real};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A detector small enough for finite differences.
pub fn mini_spec(variant: DetectorVariant, norm: NormKind) -> DetectorSpec {
    DetectorSpec {
        dims: HeadDims {
            roi_channels: 3,
            pool: 3,
            hidden: 6,
            bottleneck: 3,
        },
        head: HeadConfig {
            blocks: 3,
            use_nonlocal: true,
            nonlocal_embed_dim: 3,
            norm,
        },
        backbone: BackboneConfig {
            widths: vec![3, 3, 3],
            extra_convs: 1,
            norm,
        },
        roi_sampling: 2,
        ..DetectorSpec::new(variant, 2)
    }
}

/// Random 32x32 images with a few labelled boxes each.
pub fn mini_batch<T: Real>(images: usize, per_image: usize, seed: u64) -> Batch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 32usize;
    let data = Array2::from_shape_fn((3, images * side * side), |_| T::of(rng.random::<f64>()));
    let images_fm = FeatureMap::new(data, images, side, side);
    let gt = BBox::new(6.0, 5.0, 24.0, 27.0).unwrap();
    let proposals = (0..images)
        .map(|_| ProposalBatch {
            proposals: (0..per_image)
                .map(|k| {
                    let x1 = rng.random_range(0.0..14.0);
                    let y1 = rng.random_range(0.0..14.0);
                    let b = BBox::new(x1, y1, x1 + rng.random_range(8.0..18.0), y1 + rng.random_range(8.0..18.0)).unwrap();
                    let fg = k % 2 == 0;
                    Proposal {
                        bbox: b,
                        label: if fg { 1 + k % 4 / 2 } else { 0 },
                        target: fg.then(|| encode_delta(&b, &gt)),
                        iou: iou(&b, &gt),
                    }
                })
                .collect(),
        })
        .collect();
    Batch {
        images: images_fm,
        proposals,
    }
}
