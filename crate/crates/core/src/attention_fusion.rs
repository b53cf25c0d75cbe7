//! Channel attention (ECAB), ensemble fusion of student halves with the teacher's global
//! map, and the flip-averaged normalization (BMFN).

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::network::layers::{self, BnCache};
use crate::network::{accumulate, FeatureMap, Gradients, Mode, ParamStore};
use crate::tensor::{l2_norm, Tensor};

/// Top or bottom half of the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Top,
    Bottom,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Top, Branch::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Top => "top",
            Branch::Bottom => "bottom",
        }
    }
}

/// Widths of the shared MLP: `h + 1` entries, reducing by `r` for `(h - 1) / 2` layers,
/// one width-preserving middle layer, then expanding back.
pub fn mlp_widths(channels: usize, reduction: usize, hidden: usize) -> Result<Vec<usize>> {
    if hidden.is_multiple_of(2) || reduction == 0 {
        return Err(Error::InvalidConfig(format!(
            "ECAB needs odd h and r >= 1, got h={hidden}, r={reduction}"
        )));
    }
    let half = (hidden - 1) / 2;
    let divisor = reduction.pow(half as u32);
    if channels == 0 || !channels.is_multiple_of(divisor) {
        return Err(Error::IndivisibleChannels { channels, divisor });
    }
    let down: Vec<usize> = (0..=half).map(|i| channels / reduction.pow(i as u32)).collect();
    let mut widths = down.clone();
    widths.push(*down.last().unwrap());
    widths.extend(down.iter().rev().skip(1));
    Ok(widths)
}

/// Weights of one ECAB shared MLP. Layer `k` maps `widths[k] -> widths[k + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EcabParams {
    pub channels: usize,
    pub reduction: usize,
    pub hidden: usize,
    /// `[out, in]` per layer.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
}

impl EcabParams {
    /// Uniform fan-in init, bound `1 / sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let widths = mlp_widths(channels, reduction, hidden)?;
        let mut weights = Vec::with_capacity(hidden);
        let mut biases = Vec::with_capacity(hidden);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            weights.push(Tensor::from_vec(&[fan_out, fan_in], w));
            biases.push((0..fan_out).map(|_| dist.sample(rng)).collect());
        }
        Ok(EcabParams {
            channels,
            reduction,
            hidden,
            weights,
            biases,
        })
    }

    /// Single-layer identity MLP (`h = 1`, unit weights, zero bias).
    pub fn identity(channels: usize) -> Self {
        let mut w = Tensor::zeros(&[channels, channels]);
        for c in 0..channels {
            w.data_mut()[c * channels + c] = 1.0;
        }
        EcabParams {
            channels,
            reduction: 1,
            hidden: 1,
            weights: vec![w],
            biases: vec![vec![0.0; channels]],
        }
    }

    pub fn weight_name(branch: Branch, k: usize) -> String {
        format!("ecab.{}.layer{}.weight", branch.name(), k + 1)
    }

    pub fn bias_name(branch: Branch, k: usize) -> String {
        format!("ecab.{}.layer{}.bias", branch.name(), k + 1)
    }

    pub fn write_to(&self, store: &mut ParamStore, branch: Branch) {
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            store.set_param(Self::weight_name(branch, k), w.clone());
            store.set_param(Self::bias_name(branch, k), Tensor::from_vec(&[b.len()], b.clone()));
        }
    }

    pub fn from_store(store: &ParamStore, branch: Branch, reduction: usize, hidden: usize) -> Result<Self> {
        let mut weights = Vec::with_capacity(hidden);
        let mut biases = Vec::with_capacity(hidden);
        for k in 0..hidden {
            let w = store
                .try_param(&Self::weight_name(branch, k))
                .ok_or_else(|| Error::ShapeMismatch(format!("missing {}", Self::weight_name(branch, k))))?;
            let b = store
                .try_param(&Self::bias_name(branch, k))
                .ok_or_else(|| Error::ShapeMismatch(format!("missing {}", Self::bias_name(branch, k))))?;
            weights.push(w.clone());
            biases.push(b.data().to_vec());
        }
        let channels = weights.first().map_or(0, |w| w.dim(1));
        let widths = mlp_widths(channels, reduction, hidden)?;
        for (k, w) in weights.iter().enumerate() {
            if w.shape() != [widths[k + 1], widths[k]] {
                return Err(Error::ShapeMismatch(format!(
                    "{} has shape {:?}, expected [{}, {}]",
                    Self::weight_name(branch, k),
                    w.shape(),
                    widths[k + 1],
                    widths[k]
                )));
            }
        }
        Ok(EcabParams {
            channels,
            reduction,
            hidden,
            weights,
            biases,
        })
    }

    fn mlp(&self, x: &[f64]) -> MlpTrace {
        let mut acts = vec![x.to_vec()];
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = acts.last().unwrap();
            let (rows, cols) = (w.dim(0), w.dim(1));
            let mut z = b.clone();
            for (i, zi) in z.iter_mut().enumerate() {
                *zi += w.data()[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(input)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            debug_assert_eq!(z.len(), rows);
            if k != last {
                layers::relu_inplace(&mut z);
            }
            acts.push(z);
        }
        MlpTrace { acts }
    }

    /// Backprop through one MLP pass; adds parameter gradients and returns `d input`.
    fn mlp_backward(&self, trace: &MlpTrace, d_out: &[f64], grads: &mut EcabGrads) -> Vec<f64> {
        let mut d = d_out.to_vec();
        let last = self.weights.len() - 1;
        for k in (0..self.weights.len()).rev() {
            if k != last {
                layers::relu_backward(&trace.acts[k + 1], &mut d);
            }
            let w = &self.weights[k];
            let cols = w.dim(1);
            let input = &trace.acts[k];
            let gw = grads.weights[k].data_mut();
            for (i, di) in d.iter().enumerate() {
                grads.biases[k][i] += di;
                for (j, xj) in input.iter().enumerate() {
                    gw[i * cols + j] += di * xj;
                }
            }
            let mut d_in = vec![0.0; cols];
            for (i, di) in d.iter().enumerate() {
                for (j, dj) in d_in.iter_mut().enumerate() {
                    *dj += w.data()[i * cols + j] * di;
                }
            }
            d = d_in;
        }
        d
    }
}

struct MlpTrace {
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// Parameter gradients of one [`EcabParams`], same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EcabGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
}

impl EcabGrads {
    pub fn zeros_like(p: &EcabParams) -> Self {
        EcabGrads {
            weights: p.weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            biases: p.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn into_gradients(self, branch: Branch, grads: &mut Gradients) {
        for (k, (w, b)) in self.weights.into_iter().zip(self.biases).enumerate() {
            let n = b.len();
            accumulate(grads, &EcabParams::weight_name(branch, k), w);
            accumulate(grads, &EcabParams::bias_name(branch, k), Tensor::from_vec(&[n], b));
        }
    }
}

/// ECAB output: `psi = (max + avg) * sigmoid(MLP(max) + MLP(avg))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub psi: Vec<f64>,
    pub zeta_max: Vec<f64>,
    pub zeta_avg: Vec<f64>,
    pub zeta_sigma: Vec<f64>,
}

/// Intermediate values kept for [`ecab_backward`].
pub struct EcabCache {
    argmax: Vec<usize>,
    spatial: usize,
    max_trace: MlpTrace,
    avg_trace: MlpTrace,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn ecab(zeta: &FeatureMap, params: &EcabParams) -> Result<AttentionMap> {
    ecab_traced(zeta, params).map(|(a, _)| a)
}

pub fn ecab_traced(zeta: &FeatureMap, params: &EcabParams) -> Result<(AttentionMap, EcabCache)> {
    if zeta.channels != params.channels {
        return Err(Error::ChannelMismatch {
            expected: params.channels,
            got: zeta.channels,
        });
    }
    mlp_widths(params.channels, params.reduction, params.hidden)?;
    let spatial = zeta.spatial();
    if spatial == 0 {
        return Err(Error::BadShape("ECAB input has no spatial extent".into()));
    }
    let mut zeta_max = Vec::with_capacity(zeta.channels);
    let mut zeta_avg = Vec::with_capacity(zeta.channels);
    let mut argmax = Vec::with_capacity(zeta.channels);
    for c in 0..zeta.channels {
        let ch = zeta.channel(c);
        // Strict comparison keeps the lowest index on ties.
        let (idx, max) = ch
            .iter()
            .enumerate()
            .fold((0, ch[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        argmax.push(idx);
        zeta_max.push(max);
        zeta_avg.push(ch.iter().sum::<f64>() / spatial as f64);
    }
    let max_trace = params.mlp(&zeta_max);
    let avg_trace = params.mlp(&zeta_avg);
    let zeta_sigma: Vec<f64> = max_trace
        .output()
        .iter()
        .zip(avg_trace.output())
        .map(|(a, b)| sigmoid(a + b))
        .collect();
    let psi = (0..zeta.channels)
        .map(|c| (zeta_max[c] + zeta_avg[c]) * zeta_sigma[c])
        .collect();
    Ok((
        AttentionMap {
            psi,
            zeta_max,
            zeta_avg,
            zeta_sigma,
        },
        EcabCache {
            argmax,
            spatial,
            max_trace,
            avg_trace,
        },
    ))
}

/// Gradients of ECAB given `d psi`: parameter gradients and `d zeta` (flattened `C x H x W`).
pub fn ecab_backward(params: &EcabParams, att: &AttentionMap, cache: &EcabCache, d_psi: &[f64]) -> (EcabGrads, Vec<f64>) {
    let c = params.channels;
    let mut grads = EcabGrads::zeros_like(params);
    let mut d_s = vec![0.0; c];
    let mut d_u = vec![0.0; c];
    for i in 0..c {
        let s = att.zeta_max[i] + att.zeta_avg[i];
        let sig = att.zeta_sigma[i];
        d_s[i] = d_psi[i] * sig;
        d_u[i] = d_psi[i] * s * sig * (1.0 - sig);
    }
    let d_max_mlp = params.mlp_backward(&cache.max_trace, &d_u, &mut grads);
    let d_avg_mlp = params.mlp_backward(&cache.avg_trace, &d_u, &mut grads);
    let mut d_zeta = vec![0.0; c * cache.spatial];
    for i in 0..c {
        let d_avg = (d_s[i] + d_avg_mlp[i]) / cache.spatial as f64;
        let seg = &mut d_zeta[i * cache.spatial..(i + 1) * cache.spatial];
        seg.iter_mut().for_each(|v| *v = d_avg);
        seg[cache.argmax[i]] += d_s[i] + d_max_mlp[i];
    }
    (grads, d_zeta)
}

/// Per-branch batch-norm applied to the pooled fused map.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BranchNorm {
    pub fn new(channels: usize) -> Self {
        BranchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn name(branch: Branch, field: &str) -> String {
        format!("fusion.{}.bn.{field}", branch.name())
    }

    pub fn write_to(&self, store: &mut ParamStore, branch: Branch) {
        let c = self.gamma.len();
        store.set_param(Self::name(branch, "gamma"), Tensor::from_vec(&[c], self.gamma.clone()));
        store.set_param(Self::name(branch, "beta"), Tensor::from_vec(&[c], self.beta.clone()));
        store.set_buffer(Self::name(branch, "running_mean"), Tensor::from_vec(&[c], self.running_mean.clone()));
        store.set_buffer(Self::name(branch, "running_var"), Tensor::from_vec(&[c], self.running_var.clone()));
    }

    pub fn from_store(store: &ParamStore, branch: Branch) -> Self {
        BranchNorm {
            gamma: store.param(&Self::name(branch, "gamma")).data().to_vec(),
            beta: store.param(&Self::name(branch, "beta")).data().to_vec(),
            running_mean: store.buffer(&Self::name(branch, "running_mean")).data().to_vec(),
            running_var: store.buffer(&Self::name(branch, "running_var")).data().to_vec(),
        }
    }

    pub fn write_running_stats(&self, store: &mut ParamStore, branch: Branch) {
        let c = self.gamma.len();
        store.set_buffer(Self::name(branch, "running_mean"), Tensor::from_vec(&[c], self.running_mean.clone()));
        store.set_buffer(Self::name(branch, "running_var"), Tensor::from_vec(&[c], self.running_var.clone()));
    }

    pub fn gradients(branch: Branch, d_gamma: Vec<f64>, d_beta: Vec<f64>, grads: &mut Gradients) {
        let c = d_gamma.len();
        accumulate(grads, &Self::name(branch, "gamma"), Tensor::from_vec(&[c], d_gamma));
        accumulate(grads, &Self::name(branch, "beta"), Tensor::from_vec(&[c], d_beta));
    }
}

/// Adds fresh ECAB and branch batch-norm parameters for both branches.
pub fn init_fusion_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    channels: usize,
    reduction: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    for branch in Branch::BOTH {
        EcabParams::init(channels, reduction, hidden, rng)?.write_to(store, branch);
        BranchNorm::new(channels).write_to(store, branch);
    }
    Ok(())
}

/// One fusion branch: attention-weighted teacher map, pooled and normalized feature,
/// and (once paired with the flipped image) the BMFN output.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBranchOutput {
    pub fused_map: FeatureMap,
    pub theta: Vec<f64>,
    pub phi: Option<Vec<f64>>,
}

fn check_channels(zeta: &FeatureMap, tau: &FeatureMap, params: &EcabParams) -> Result<()> {
    for got in [zeta.channels, tau.channels] {
        if got != params.channels {
            return Err(Error::ChannelMismatch {
                expected: params.channels,
                got,
            });
        }
    }
    Ok(())
}

/// Fuses a single sample. The branch norm runs on its running statistics.
pub fn ensemble_fuse(zeta_local: &FeatureMap, tau_global: &FeatureMap, ecab_params: &EcabParams, bn: &BranchNorm) -> Result<FusionBranchOutput> {
    check_channels(zeta_local, tau_global, ecab_params)?;
    let att = ecab(zeta_local, ecab_params)?;
    Ok(fuse_with_attention(&att.psi, tau_global, bn))
}

/// The fusion step for an already computed attention vector.
pub fn fuse_with_attention(psi: &[f64], tau_global: &FeatureMap, bn: &BranchNorm) -> FusionBranchOutput {
    let s = tau_global.spatial();
    let mut fused = tau_global.clone();
    for (c, seg) in fused.data.chunks_mut(s).enumerate() {
        seg.iter_mut().for_each(|v| *v *= psi[c]);
    }
    let pooled = fused.global_avg_pool();
    let c = pooled.len();
    let (theta, _) = layers::batchnorm_eval(&pooled, (1, c, 1), &bn.gamma, Some(&bn.beta), &bn.running_mean, &bn.running_var);
    FusionBranchOutput {
        fused_map: fused,
        theta,
        phi: None,
    }
}

/// Batched fusion for one branch, keeping what [`fuse_batch_backward`] needs.
pub struct FusionBatch {
    pub attention: Vec<AttentionMap>,
    /// `[N, C]` pooled teacher maps.
    pub tau_pooled: Tensor,
    /// `[N, C]` pooled fused maps.
    pub pooled: Tensor,
    /// `[N, C]` normalized features.
    pub theta: Tensor,
    ecab_caches: Vec<EcabCache>,
    bn_cache: BnCache,
}

impl FusionBatch {
    pub fn bn_cache(&self) -> &BnCache {
        &self.bn_cache
    }
}

/// Fuses `zetas[i]` with `taus[i]` for every sample. Train mode normalizes with batch
/// statistics; the caller decides whether to fold them into the running buffers.
pub fn fuse_batch(zetas: &[FeatureMap], taus: &[FeatureMap], ecab_params: &EcabParams, bn: &BranchNorm, mode: Mode) -> Result<FusionBatch> {
    if zetas.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if zetas.len() != taus.len() {
        return Err(Error::ShapeMismatch(format!("{} student halves vs {} teacher maps", zetas.len(), taus.len())));
    }
    let (n, c) = (zetas.len(), ecab_params.channels);
    let mut attention = Vec::with_capacity(n);
    let mut ecab_caches = Vec::with_capacity(n);
    let mut tau_pooled = Tensor::zeros(&[n, c]);
    let mut pooled = Tensor::zeros(&[n, c]);
    for (i, (z, t)) in zetas.iter().zip(taus).enumerate() {
        check_channels(z, t, ecab_params)?;
        let (att, cache) = ecab_traced(z, ecab_params)?;
        let tp = t.global_avg_pool();
        // psi is constant over space, so pooling the fused map is psi * pooled teacher map.
        for ((p, psi), t) in pooled.row_mut(i).iter_mut().zip(&att.psi).zip(&tp) {
            *p = psi * t;
        }
        tau_pooled.row_mut(i).copy_from_slice(&tp);
        attention.push(att);
        ecab_caches.push(cache);
    }
    let (theta, bn_cache) = match mode {
        Mode::Train => layers::batchnorm_train(pooled.data(), (n, c, 1), &bn.gamma, Some(&bn.beta)),
        Mode::Eval => layers::batchnorm_eval(pooled.data(), (n, c, 1), &bn.gamma, Some(&bn.beta), &bn.running_mean, &bn.running_var),
    };
    let theta = Tensor::from_vec(&[n, c], theta);
    if !theta.all_finite() {
        return Err(Error::NonFiniteActivation("fusion.bn".into()));
    }
    Ok(FusionBatch {
        attention,
        tau_pooled,
        pooled,
        theta,
        ecab_caches,
        bn_cache,
    })
}

/// Folds the batch statistics of a train-mode [`FusionBatch`] into `bn`'s running buffers.
pub fn commit_branch_stats(bn: &mut BranchNorm, batch: &FusionBatch) {
    layers::update_running_stats(&mut bn.running_mean, &mut bn.running_var, &batch.bn_cache);
}

/// Parameter gradients of one fusion branch given `d theta [N, C]`.
pub struct FusionGrads {
    pub ecab: EcabGrads,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
    /// Per-sample `d zeta`, flattened.
    pub d_zeta: Vec<Vec<f64>>,
    /// `[N, C]` gradient into the pooled teacher map.
    pub d_tau_pooled: Tensor,
}

pub fn fuse_batch_backward(ecab_params: &EcabParams, bn: &BranchNorm, batch: &FusionBatch, d_theta: &Tensor) -> FusionGrads {
    let (n, c) = (batch.theta.dim(0), batch.theta.dim(1));
    let (d_pooled, d_gamma, d_beta) = layers::batchnorm_backward(&batch.bn_cache, &bn.gamma, d_theta.data());
    let mut ecab = EcabGrads::zeros_like(ecab_params);
    let mut d_zeta = Vec::with_capacity(n);
    let mut d_tau_pooled = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let dp = &d_pooled[i * c..(i + 1) * c];
        let att = &batch.attention[i];
        let d_psi: Vec<f64> = (0..c).map(|k| dp[k] * batch.tau_pooled.row(i)[k]).collect();
        for ((d, g), psi) in d_tau_pooled.row_mut(i).iter_mut().zip(dp).zip(&att.psi) {
            *d = g * psi;
        }
        let (g, dz) = ecab_backward(ecab_params, att, &batch.ecab_caches[i], &d_psi);
        for (acc, w) in ecab.weights.iter_mut().zip(&g.weights) {
            acc.add_assign(w);
        }
        for (acc, b) in ecab.biases.iter_mut().zip(&g.biases) {
            acc.iter_mut().zip(b).for_each(|(a, v)| *a += v);
        }
        d_zeta.push(dz);
    }
    FusionGrads {
        ecab,
        d_gamma,
        d_beta,
        d_zeta,
        d_tau_pooled,
    }
}

/// Flip-averaged feature normalization: `m / ||m||` with `m = (feat + feat_flipped) / 2`.
pub fn bmfn(feat: &[f64], feat_flipped: &[f64]) -> Result<Vec<f64>> {
    if feat.len() != feat_flipped.len() {
        return Err(Error::DimensionMismatch(feat.len(), feat_flipped.len()));
    }
    let m: Vec<f64> = feat.iter().zip(feat_flipped).map(|(a, b)| (a + b) / 2.0).collect();
    let norm = l2_norm(&m);
    if norm < 1e-12 {
        return Err(Error::ZeroMeanFeature);
    }
    Ok(m.into_iter().map(|v| v / norm).collect())
}

/// Gradient of [`bmfn`] with respect to either argument (both receive the same value).
pub fn bmfn_backward(feat: &[f64], feat_flipped: &[f64], out: &[f64], d_out: &[f64]) -> Vec<f64> {
    let norm = l2_norm(
        &feat
            .iter()
            .zip(feat_flipped)
            .map(|(a, b)| (a + b) / 2.0)
            .collect::<Vec<_>>(),
    );
    let proj: f64 = out.iter().zip(d_out).map(|(o, d)| o * d).sum();
    out.iter()
        .zip(d_out)
        .map(|(o, d)| 0.5 * (d - o * proj) / norm)
        .collect()
}

/// Row-wise [`bmfn`] on two `[N, D]` tensors.
pub fn bmfn_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = Tensor::zeros(a.shape());
    for i in 0..a.dim(0) {
        out.row_mut(i).copy_from_slice(&bmfn(a.row(i), b.row(i))?);
    }
    Ok(out)
}

/// Row-wise [`bmfn_backward`]; the returned gradient applies to both inputs.
pub fn bmfn_rows_backward(a: &Tensor, b: &Tensor, out: &Tensor, d_out: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(a.shape());
    for i in 0..a.dim(0) {
        let g = bmfn_backward(a.row(i), b.row(i), out.row(i), d_out.row(i));
        d.row_mut(i).copy_from_slice(&g);
    }
    d
}
