//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_core::datamodel::{Image, ImageRecord, Split};
use reid_core::network::{NetConfig, ParamStore};
use reid_core::pipeline::config::{EcabConfig, Stage, TrainConfig};
use reid_core::pipeline::toydata::ToyDataSpec;
use reid_core::tensor::Tensor;

/// A two-block network on 16x8 inputs (feature map 8x4x2), small enough for
/// finite differences over every parameter.
pub fn tiny_cfg(stage: Stage) -> TrainConfig {
    let mut cfg = TrainConfig::toy(stage);
    cfg.net = NetConfig {
        backbone: "toy".into(),
        widths: vec![4, 8],
        strides: vec![2, 2],
        input_size: (16, 8),
    };
    cfg.augmentation.target_size = (16, 8);
    cfg.augmentation.pad = 1;
    cfg.ecab = EcabConfig { reduction: 2, hidden: 3 };
    cfg
}

/// A toy set small enough for second-scale training runs.
pub fn small_spec(seed: u64) -> ToyDataSpec {
    ToyDataSpec {
        num_ids_source: 10,
        num_ids_target: 6,
        cams: 2,
        images_per_id_cam: 3,
        size: (64, 32),
        seed,
    }
}

pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect())
}

pub fn rand_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const FD_EPS: f64 = 1e-6;

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_EPS;
            let up = f(&p);
            p[i] = orig - FD_EPS;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Central differences of `f` with respect to every scalar parameter in `store`, in
/// the order of `store.params()`.
pub fn numeric_param_grad(store: &ParamStore, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<f64> {
    let mut work = store.clone();
    let names: Vec<String> = store.params().map(|(n, _)| n.clone()).collect();
    let mut out = Vec::new();
    for name in names {
        for i in 0..store.param(&name).len() {
            let orig = work.param(&name).data()[i];
            work.param_mut(&name).data_mut()[i] = orig + FD_EPS;
            let up = f(&work);
            work.param_mut(&name).data_mut()[i] = orig - FD_EPS;
            let down = f(&work);
            work.param_mut(&name).data_mut()[i] = orig;
            out.push((up - down) / (2.0 * FD_EPS));
        }
    }
    out
}

/// Flattens gradients in the order of `store.params()`, zero where a parameter has none.
pub fn flatten_grads(store: &ParamStore, grads: &reid_core::network::Gradients) -> Vec<f64> {
    store
        .params()
        .flat_map(|(name, p)| match grads.get(name) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.len()],
        })
        .collect()
}

/// Pair-counting adjusted Rand index over all `n (n - 1) / 2` pairs.
pub fn pair_counting_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let total = both + only_a + only_b + neither;
    let expected = (both + only_a) * (both + only_b) / total;
    let max = ((both + only_a) + (both + only_b)) / 2.0;
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

/// Four identities of flat, well-separated colours with pixel noise, two cameras, four
/// images per camera, all in the train split.
pub fn separable_target(seed: u64) -> Vec<ImageRecord> {
    let colors: [[f32; 3]; 4] = [[0.85, 0.15, 0.15], [0.15, 0.75, 0.2], [0.2, 0.25, 0.85], [0.9, 0.85, 0.2]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, c) in colors.iter().enumerate() {
        for cam in 0..2 {
            for k in 0..4 {
                let mut img = Image::filled(64, 32, *c);
                for v in img.data_mut() {
                    *v = (*v + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0);
                }
                out.push(ImageRecord::new(format!("e{id}_c{cam}_{k}"), img.quantized(), Some(id), cam, Split::Train));
            }
        }
    }
    out
}

/// True when assigning every row to the nearest true-label centroid reproduces the labels,
/// which makes the classes linearly separable.
pub fn nearest_centroid_separable(features: &Tensor, labels: &[usize]) -> bool {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.dim(1);
    let mut centroids = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1.0;
        for (c, v) in centroids[l].iter_mut().zip(features.row(i)) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    labels.iter().enumerate().all(|(i, &l)| {
        let best = (0..k)
            .min_by(|&a, &b| dist(features.row(i), &centroids[a]).total_cmp(&dist(features.row(i), &centroids[b])))
            .unwrap();
        best == l
    })
}
