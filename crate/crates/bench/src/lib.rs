//! Deterministic inputs for the kernel benchmarks.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_core::datamodel::Image;
use reid_core::evalmetrics::EvalMeta;
use reid_core::network::FeatureMap;
use reid_core::tensor::Tensor;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
}

/// Rows scaled to unit length, the form embeddings reach clustering and retrieval in.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut t = uniform(&[n, d], seed);
    for i in 0..n {
        let row = t.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

pub fn feature_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    FeatureMap::new(c, h, w, uniform(&[c * h * w], seed).into_data()).expect("c*h*w values")
}

pub fn image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).expect("h*w*3 values")
}

/// Identity/camera labels for a retrieval split with `ids` identities over 4 cameras.
pub fn eval_meta(n: usize, ids: usize, seed: u64) -> Vec<EvalMeta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| EvalMeta { identity: i % ids, camera: rng.random_range(0..4) })
        .collect()
}
