//! Backbone contract and heads: feature map, pooled embedding, batch-norm neck and
//! bias-free identity classifier, plus the top/bottom split of the final feature map.

pub mod layers;
pub mod params;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use layers::{BnCache, ConvCache, ConvSpec};
pub use params::{accumulate, Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// A `C x H x W` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Sample `i` of a `[N, C, H, W]` batch.
    pub fn from_batch(batch: &Tensor, i: usize) -> Self {
        FeatureMap {
            channels: batch.dim(1),
            height: batch.dim(2),
            width: batch.dim(3),
            data: batch.row(i).to_vec(),
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.spatial()..(c + 1) * self.spatial()]
    }

    pub fn global_avg_pool(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum::<f64>() / self.spatial() as f64)
            .collect()
    }

    pub fn to_batch(maps: &[FeatureMap]) -> Tensor {
        let (c, h, w) = (maps[0].channels, maps[0].height, maps[0].width);
        let mut data = Vec::with_capacity(maps.len() * c * h * w);
        for m in maps {
            data.extend_from_slice(&m.data);
        }
        Tensor::from_vec(&[maps.len(), c, h, w], data)
    }
}

/// Splits a map along its height: rows `[0, H/2)` and `[H/2, H)`.
pub fn split_top_bottom(map: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    if !map.height.is_multiple_of(2) {
        return Err(Error::OddHeight(map.height));
    }
    let half = map.height / 2;
    let mut top = FeatureMap::zeros(map.channels, half, map.width);
    let mut bottom = FeatureMap::zeros(map.channels, half, map.width);
    let row = map.width;
    for c in 0..map.channels {
        let src = map.channel(c);
        top.data[c * half * row..(c + 1) * half * row].copy_from_slice(&src[..half * row]);
        bottom.data[c * half * row..(c + 1) * half * row].copy_from_slice(&src[half * row..]);
    }
    Ok((top, bottom))
}

/// Top and bottom halves of every map in a `[N, C, H, W]` batch.
pub fn split_batch(maps: &Tensor) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>)> {
    let mut tops = Vec::with_capacity(maps.dim(0));
    let mut bottoms = Vec::with_capacity(maps.dim(0));
    for i in 0..maps.dim(0) {
        let (t, b) = split_top_bottom(&FeatureMap::from_batch(maps, i))?;
        tops.push(t);
        bottoms.push(b);
    }
    Ok((tops, bottoms))
}

/// Pools the top and bottom halves of every map in a `[N, C, H, W]` batch: two `[N, C]`.
pub fn pool_halves(maps: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = (maps.dim(0), maps.dim(1), maps.dim(2), maps.dim(3));
    let half = h / 2 * w;
    let mut top = Tensor::zeros(&[n, c]);
    let mut bottom = Tensor::zeros(&[n, c]);
    for (k, seg) in maps.data().chunks(h * w).enumerate() {
        top.data_mut()[k] = seg[..half].iter().sum::<f64>() / half as f64;
        bottom.data_mut()[k] = seg[half..].iter().sum::<f64>() / half as f64;
    }
    (top, bottom)
}

/// Adds the gradient of `pool_halves` into `d_maps`.
pub fn pool_halves_backward(d_top: &Tensor, d_bottom: &Tensor, d_maps: &mut Tensor) {
    let (h, w) = (d_maps.dim(2), d_maps.dim(3));
    let half = h / 2 * w;
    for (k, seg) in d_maps.data_mut().chunks_mut(h * w).enumerate() {
        let (t, b) = (d_top.data()[k] / half as f64, d_bottom.data()[k] / half as f64);
        seg[..half].iter_mut().for_each(|v| *v += t);
        seg[half..].iter_mut().for_each(|v| *v += b);
    }
}

/// Architecture of the network. Parameter values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Backbone registry key; only `"toy"` is built in.
    pub backbone: String,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
}

impl NetConfig {
    /// Four conv-bn-relu blocks, widths 16/32/48/64. The last block keeps resolution so a
    /// 64x32 input yields an 8x4 map.
    pub fn toy() -> Self {
        NetConfig {
            backbone: "toy".into(),
            widths: vec![16, 32, 48, 64],
            strides: vec![2, 2, 2, 1],
            input_size: (64, 32),
        }
    }
}

/// Per-sample view of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub feature_map: FeatureMap,
    pub pooled: Vec<f64>,
    pub neck: Vec<f64>,
    pub logits: Option<Vec<f64>>,
}

/// Stacked conv(3x3) -> batch-norm -> rectifier blocks.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    blocks: Vec<ConvSpec>,
}

struct BlockCache {
    conv: ConvCache,
    bn: BnCache,
    out: Tensor,
}

impl ToyBackbone {
    fn new(cfg: &NetConfig) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.len() != cfg.strides.len() {
            return Err(Error::InvalidConfig(
                "backbone widths and strides must be non-empty and equally long".into(),
            ));
        }
        let mut cin = 3;
        let blocks = cfg
            .widths
            .iter()
            .zip(&cfg.strides)
            .map(|(&cout, &stride)| {
                let spec = ConvSpec {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    stride,
                    pad: 1,
                };
                cin = cout;
                spec
            })
            .collect();
        Ok(ToyBackbone { blocks })
    }

    fn prefix(i: usize) -> String {
        format!("backbone.block{}", i + 1)
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (i, spec) in self.blocks.iter().enumerate() {
            let p = Self::prefix(i);
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let shape = spec.weight_shape();
            let w = (0..shape.iter().product::<usize>())
                .map(|_| normal.sample(rng))
                .collect();
            store.set_param(format!("{p}.conv.weight"), Tensor::from_vec(&shape, w));
            let c = spec.out_channels;
            store.set_param(format!("{p}.bn.gamma"), Tensor::filled(&[c], 1.0));
            store.set_param(format!("{p}.bn.beta"), Tensor::zeros(&[c]));
            store.set_buffer(format!("{p}.bn.running_mean"), Tensor::zeros(&[c]));
            store.set_buffer(format!("{p}.bn.running_var"), Tensor::filled(&[c], 1.0));
        }
    }

    fn output_shape(&self, (h, w): (usize, usize)) -> (usize, usize, usize) {
        let (mut h, mut w) = (h, w);
        for s in &self.blocks {
            (h, w) = s.output_size(h, w);
        }
        (self.blocks.last().map_or(3, |b| b.out_channels), h, w)
    }

    fn forward(&self, store: &ParamStore, input: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BlockCache>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, spec) in self.blocks.iter().enumerate() {
            let p = Self::prefix(i);
            let (conv_out, conv) = layers::conv2d_forward(spec, &x, store.param(&format!("{p}.conv.weight")));
            let dims = (conv_out.dim(0), conv_out.dim(1), conv_out.dim(2) * conv_out.dim(3));
            let gamma = store.param(&format!("{p}.bn.gamma")).data();
            let beta = store.param(&format!("{p}.bn.beta")).data();
            let (mut y, bn) = match mode {
                Mode::Train => layers::batchnorm_train(conv_out.data(), dims, gamma, Some(beta)),
                Mode::Eval => layers::batchnorm_eval(
                    conv_out.data(),
                    dims,
                    gamma,
                    Some(beta),
                    store.buffer(&format!("{p}.bn.running_mean")).data(),
                    store.buffer(&format!("{p}.bn.running_var")).data(),
                ),
            };
            layers::relu_inplace(&mut y);
            let out = Tensor::from_vec(conv_out.shape(), y);
            if !out.all_finite() {
                return Err(Error::NonFiniteActivation(p));
            }
            x = out.clone();
            caches.push(BlockCache { conv, bn, out });
        }
        Ok((x, caches))
    }

    fn backward(&self, store: &ParamStore, caches: &[BlockCache], d_out: Tensor, grads: &mut Gradients) {
        let mut d = d_out;
        for (i, spec) in self.blocks.iter().enumerate().rev() {
            let p = Self::prefix(i);
            let cache = &caches[i];
            layers::relu_backward(cache.out.data(), d.data_mut());
            let gamma = store.param(&format!("{p}.bn.gamma"));
            let (dx, dgamma, dbeta) = layers::batchnorm_backward(&cache.bn, gamma.data(), d.data());
            accumulate(grads, &format!("{p}.bn.gamma"), Tensor::from_vec(gamma.shape(), dgamma));
            accumulate(grads, &format!("{p}.bn.beta"), Tensor::from_vec(gamma.shape(), dbeta));
            let d_conv = Tensor::from_vec(cache.out.shape(), dx);
            let weight = store.param(&format!("{p}.conv.weight"));
            let (d_in, d_w) = layers::conv2d_backward(spec, &cache.conv, weight, &d_conv, i > 0);
            accumulate(grads, &format!("{p}.conv.weight"), d_w);
            if let Some(d_in) = d_in {
                d = d_in;
            }
        }
    }

    fn commit_running_stats(&self, store: &mut ParamStore, caches: &[BlockCache]) {
        for (i, cache) in caches.iter().enumerate() {
            let p = Self::prefix(i);
            let mut rm = store.buffer(&format!("{p}.bn.running_mean")).clone();
            let mut rv = store.buffer(&format!("{p}.bn.running_var")).clone();
            layers::update_running_stats(rm.data_mut(), rv.data_mut(), &cache.bn);
            store.set_buffer(format!("{p}.bn.running_mean"), rm);
            store.set_buffer(format!("{p}.bn.running_var"), rv);
        }
    }
}

/// Registry of backbones addressable by name from configuration.
#[derive(Clone, Debug)]
pub enum Backbone {
    Toy(ToyBackbone),
}

impl Backbone {
    pub fn from_config(cfg: &NetConfig) -> Result<Self> {
        match cfg.backbone.as_str() {
            "toy" => Ok(Backbone::Toy(ToyBackbone::new(cfg)?)),
            other => Err(Error::InvalidConfig(format!("unknown backbone `{other}`"))),
        }
    }
}

pub const NECK_GAMMA: &str = "neck.bn.gamma";
pub const NECK_MEAN: &str = "neck.bn.running_mean";
pub const NECK_VAR: &str = "neck.bn.running_var";
pub const CLASSIFIER: &str = "classifier.weight";

/// Everything a batched forward pass produced, plus what backward needs.
pub struct ForwardPass {
    pub maps: Tensor,
    pub pooled: Tensor,
    pub neck: Tensor,
    pub logits: Option<Tensor>,
    blocks: Vec<BlockCache>,
    neck_cache: BnCache,
}

/// Upstream gradients into a [`ForwardPass`]; absent entries count as zero.
#[derive(Default)]
pub struct Upstream {
    pub d_maps: Option<Tensor>,
    pub d_pooled: Option<Tensor>,
    pub d_neck: Option<Tensor>,
    pub d_logits: Option<Tensor>,
}

/// Backbone + BN neck + classifier.
#[derive(Clone, Debug)]
pub struct ReidModel {
    cfg: NetConfig,
    backbone: Backbone,
}

impl ReidModel {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        let model = ReidModel {
            cfg: cfg.clone(),
            backbone: Backbone::from_config(cfg)?,
        };
        let (_, h, w) = model.feature_shape();
        if h == 0 || w == 0 || h % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "backbone yields a {h}x{w} feature map; height must be even and non-zero"
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// `(C, Hf, Wf)` of the final feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        match &self.backbone {
            Backbone::Toy(b) => b.output_shape(self.cfg.input_size),
        }
    }

    pub fn channels(&self) -> usize {
        self.feature_shape().0
    }

    /// Fresh backbone, neck and classifier parameters.
    pub fn init_params<R: Rng + ?Sized>(&self, num_classes: usize, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        match &self.backbone {
            Backbone::Toy(b) => b.init(&mut store, rng),
        }
        let c = self.channels();
        store.set_param(NECK_GAMMA, Tensor::filled(&[c], 1.0));
        store.set_buffer(NECK_MEAN, Tensor::zeros(&[c]));
        store.set_buffer(NECK_VAR, Tensor::filled(&[c], 1.0));
        self.reset_classifier(&mut store, num_classes, rng);
        store
    }

    /// Replaces the classifier with a freshly initialized `num_classes x C` matrix.
    pub fn reset_classifier<R: Rng + ?Sized>(&self, store: &mut ParamStore, num_classes: usize, rng: &mut R) {
        let c = self.channels();
        let normal = Normal::new(0.0, 0.001).expect("valid std");
        let w = (0..num_classes * c).map(|_| normal.sample(rng)).collect();
        store.set_param(CLASSIFIER, Tensor::from_vec(&[num_classes, c], w));
    }

    pub fn num_classes(&self, store: &ParamStore) -> Option<usize> {
        store.try_param(CLASSIFIER).map(|w| w.dim(0))
    }

    /// Batched forward of `input [N, 3, H, W]`. Train mode normalizes with batch
    /// statistics; call [`Self::commit_running_stats`] to fold them into the buffers.
    pub fn forward(&self, store: &ParamStore, input: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let (h, w) = self.cfg.input_size;
        if input.shape().len() != 4 || input.dim(1) != 3 || input.dim(2) != h || input.dim(3) != w {
            return Err(Error::ShapeMismatch(format!(
                "input {:?}, expected [N, 3, {h}, {w}]",
                input.shape()
            )));
        }
        if input.dim(0) == 0 {
            return Err(Error::EmptyBatch);
        }
        let (maps, blocks) = match &self.backbone {
            Backbone::Toy(b) => b.forward(store, input, mode)?,
        };
        let pooled = layers::global_avg_pool(&maps);
        let (n, c) = (pooled.dim(0), pooled.dim(1));
        let gamma = store.param(NECK_GAMMA).data();
        let (neck, neck_cache) = match mode {
            Mode::Train => layers::batchnorm_train(pooled.data(), (n, c, 1), gamma, None),
            Mode::Eval => layers::batchnorm_eval(
                pooled.data(),
                (n, c, 1),
                gamma,
                None,
                store.buffer(NECK_MEAN).data(),
                store.buffer(NECK_VAR).data(),
            ),
        };
        let neck = Tensor::from_vec(&[n, c], neck);
        if !neck.all_finite() {
            return Err(Error::NonFiniteActivation("neck.bn".into()));
        }
        let logits = store
            .try_param(CLASSIFIER)
            .map(|wt| layers::linear_forward(&neck, wt));
        if let Some(l) = &logits {
            if !l.all_finite() {
                return Err(Error::NonFiniteActivation("classifier".into()));
            }
        }
        Ok(ForwardPass {
            maps,
            pooled,
            neck,
            logits,
            blocks,
            neck_cache,
        })
    }

    pub fn backward(&self, store: &ParamStore, pass: &ForwardPass, up: Upstream) -> Gradients {
        let mut grads = Gradients::new();
        let mut d_neck = up.d_neck.unwrap_or_else(|| Tensor::zeros(pass.neck.shape()));
        if let (Some(d_logits), Some(w)) = (up.d_logits, store.try_param(CLASSIFIER)) {
            let (dx, dw) = layers::linear_backward(&pass.neck, w, &d_logits);
            d_neck.add_assign(&dx);
            accumulate(&mut grads, CLASSIFIER, dw);
        }
        let gamma = store.param(NECK_GAMMA);
        let (d_pooled_neck, d_gamma, _) = layers::batchnorm_backward(&pass.neck_cache, gamma.data(), d_neck.data());
        accumulate(&mut grads, NECK_GAMMA, Tensor::from_vec(gamma.shape(), d_gamma));
        let mut d_pooled = Tensor::from_vec(pass.pooled.shape(), d_pooled_neck);
        if let Some(extra) = up.d_pooled {
            d_pooled.add_assign(&extra);
        }
        let mut d_maps = up.d_maps.unwrap_or_else(|| Tensor::zeros(pass.maps.shape()));
        layers::global_avg_pool_backward(&d_pooled, &mut d_maps);
        match &self.backbone {
            Backbone::Toy(b) => b.backward(store, &pass.blocks, d_maps, &mut grads),
        }
        grads
    }

    pub fn commit_running_stats(&self, store: &mut ParamStore, pass: &ForwardPass) {
        match &self.backbone {
            Backbone::Toy(b) => b.commit_running_stats(store, &pass.blocks),
        }
        let mut rm = store.buffer(NECK_MEAN).clone();
        let mut rv = store.buffer(NECK_VAR).clone();
        layers::update_running_stats(rm.data_mut(), rv.data_mut(), &pass.neck_cache);
        store.set_buffer(NECK_MEAN, rm);
        store.set_buffer(NECK_VAR, rv);
    }

    /// Per-sample outputs of a forward pass.
    pub fn forward_features(&self, store: &ParamStore, input: &Tensor, mode: Mode) -> Result<Vec<BackboneOutput>> {
        let pass = self.forward(store, input, mode)?;
        Ok((0..input.dim(0))
            .map(|i| BackboneOutput {
                feature_map: FeatureMap::from_batch(&pass.maps, i),
                pooled: pass.pooled.row(i).to_vec(),
                neck: pass.neck.row(i).to_vec(),
                logits: pass.logits.as_ref().map(|l| l.row(i).to_vec()),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetConfig {
        NetConfig {
            backbone: "toy".into(),
            widths: vec![3, 4],
            strides: vec![2, 1],
            input_size: (8, 4),
        }
    }

    fn random_input(n: usize, (h, w): (usize, usize), seed: u64) -> Tensor {
        use rand::RngExt;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    #[test]
    fn toy_feature_shape() {
        let model = ReidModel::new(&NetConfig::toy()).unwrap();
        assert_eq!(model.feature_shape(), (64, 8, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = model.init_params(5, &mut rng);
        let out = model
            .forward_features(&store, &random_input(2, (64, 32), 1), Mode::Eval)
            .unwrap();
        let fm = &out[0].feature_map;
        assert_eq!((fm.channels, fm.height, fm.width), (64, 8, 4));
        assert_eq!(out[0].logits.as_ref().unwrap().len(), 5);
        assert!(fm.data.iter().all(|v| *v >= 0.0));
        let pooled = fm.global_avg_pool();
        for (a, b) in pooled.iter().zip(&out[0].pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_with_zeroed_last_block_gives_zero_map() {
        let model = ReidModel::new(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = model.init_params(2, &mut rng);
        store.set_param("backbone.block2.bn.gamma", Tensor::zeros(&[4]));
        store.set_param("backbone.block2.bn.beta", Tensor::zeros(&[4]));
        let out = model
            .forward_features(&store, &Tensor::zeros(&[1, 3, 8, 4]), Mode::Eval)
            .unwrap();
        assert!(out[0].feature_map.data.iter().all(|v| *v == 0.0));
        assert!(out[0].pooled.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = ReidModel::new(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = model.init_params(3, &mut rng);
        let x = random_input(3, (8, 4), 2);
        let a = model.forward_features(&store, &x, Mode::Eval).unwrap();
        let b = model.forward_features(&store, &x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_and_config_errors() {
        let model = ReidModel::new(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = model.init_params(2, &mut rng);
        assert!(matches!(
            model.forward(&store, &Tensor::zeros(&[1, 3, 9, 4]), Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
        let mut bad = tiny();
        bad.backbone = "resnet".into();
        assert!(matches!(ReidModel::new(&bad), Err(Error::InvalidConfig(_))));
        let mut odd = tiny();
        odd.input_size = (6, 4);
        assert!(ReidModel::new(&odd).is_err());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let model = ReidModel::new(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = model.init_params(2, &mut rng);
        store.param_mut("backbone.block1.conv.weight").data_mut()[0] = f64::NAN;
        match model.forward(&store, &random_input(2, (8, 4), 3), Mode::Train) {
            Err(Error::NonFiniteActivation(layer)) => assert_eq!(layer, "backbone.block1"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn split_partitions_rows() {
        let data: Vec<f64> = (0..8).flat_map(|r| vec![r as f64; 2]).collect();
        let map = FeatureMap::new(1, 8, 2, data).unwrap();
        let (top, bottom) = split_top_bottom(&map).unwrap();
        assert_eq!(top.height, 4);
        let rows = |m: &FeatureMap| (0..m.height).map(|y| m.get(0, y, 0)).collect::<Vec<_>>();
        assert_eq!(rows(&top), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(rows(&bottom), vec![4.0, 5.0, 6.0, 7.0]);
        let mut stacked = top.data.clone();
        stacked.extend(&bottom.data);
        assert_eq!(stacked, map.data);

        let two = FeatureMap::new(1, 2, 1, vec![5.0, 6.0]).unwrap();
        let (t, b) = split_top_bottom(&two).unwrap();
        assert_eq!((t.data, b.data), (vec![5.0], vec![6.0]));
        let odd = FeatureMap::zeros(1, 3, 1);
        assert!(matches!(split_top_bottom(&odd), Err(Error::OddHeight(3))));
    }

    #[test]
    fn global_pool_is_mean_of_half_pools() {
        let x = random_input(2, (8, 4), 9).reshape(&[2, 3, 8, 4]);
        let (top, bottom) = pool_halves(&x);
        let full = layers::global_avg_pool(&x);
        for k in 0..full.len() {
            let m = 0.5 * (top.data()[k] + bottom.data()[k]);
            assert!((m - full.data()[k]).abs() < 1e-12);
        }
        let fm = FeatureMap::from_batch(&x, 1);
        let (t, b) = split_top_bottom(&fm).unwrap();
        assert!((t.global_avg_pool()[2] - top.row(1)[2]).abs() < 1e-12);
        assert!((b.global_avg_pool()[0] - bottom.row(1)[0]).abs() < 1e-12);
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::RngExt;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    /// Scalar objective touching every head, for finite-difference checks.
    fn objective(model: &ReidModel, store: &ParamStore, x: &Tensor, w: &[Tensor; 4], mode: Mode) -> f64 {
        let pass = model.forward(store, x, mode).unwrap();
        let (top, _) = pool_halves(&pass.maps);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        dot(&pass.maps, &w[0]) + dot(&top, &w[1]) + dot(&pass.neck, &w[2]) + dot(pass.logits.as_ref().unwrap(), &w[3])
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let model = ReidModel::new(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = model.init_params(3, &mut rng);
        // A non-trivial classifier so the logits path carries real gradient.
        store.set_param(CLASSIFIER, rand_tensor(&[3, 4], 5));
        let x = rand_tensor(&[3, 3, 8, 4], 12);
        for mode in [Mode::Train, Mode::Eval] {
            let pass = model.forward(&store, &x, mode).unwrap();
            let ws = [
                rand_tensor(pass.maps.shape(), 21),
                rand_tensor(&[3, 4], 22),
                rand_tensor(&[3, 4], 23),
                rand_tensor(&[3, 3], 24),
            ];
            let mut d_maps = ws[0].clone();
            pool_halves_backward(&ws[1], &Tensor::zeros(&[3, 4]), &mut d_maps);
            let grads = model.backward(
                &store,
                &pass,
                Upstream {
                    d_maps: Some(d_maps),
                    d_pooled: None,
                    d_neck: Some(ws[2].clone()),
                    d_logits: Some(ws[3].clone()),
                },
            );
            assert_eq!(grads.len(), store.params().count());
            let h = 1e-6;
            for (name, g) in &grads {
                for idx in (0..g.len()).step_by(3) {
                    let mut p = store.clone();
                    p.param_mut(name).data_mut()[idx] += h;
                    let mut m = store.clone();
                    m.param_mut(name).data_mut()[idx] -= h;
                    let fd = (objective(&model, &p, &x, &ws, mode) - objective(&model, &m, &x, &ws, mode)) / (2.0 * h);
                    let an = g.data()[idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    assert!(rel < 1e-4, "{mode:?} {name}[{idx}]: fd {fd} vs analytic {an}");
                }
            }
        }
    }
}
