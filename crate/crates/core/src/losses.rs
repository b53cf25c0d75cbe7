//! Identity cross-entropy, batch-hard triplet and softmax-triplet losses with analytic
//! gradients, the weighted totals, and the per-iteration loss log.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Triplet weight during pre-training.
    pub kappa: f64,
    pub margin: f64,
    /// Global identity loss.
    pub alpha: f64,
    /// Global triplet loss.
    pub beta: f64,
    /// Top-branch softmax triplet.
    pub gamma: f64,
    /// Bottom-branch softmax triplet.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kappa: 1.0,
            margin: 0.3,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            delta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.kappa, self.margin, self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Anchor with its farthest same-label and nearest other-label batch members.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// What to do with anchors that have no positive or no negative in the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningPolicy {
    /// Any such anchor is a [`Error::DegenerateBatch`].
    Strict,
    /// Such anchors are left out; only a batch without any valid anchor is degenerate.
    SkipUnmatched,
}

/// Row-major `N x N` Euclidean distances between rows of `features`.
pub fn pairwise_distances(features: &Tensor) -> Vec<f64> {
    let n = features.dim(0);
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = crate::tensor::squared_distance(features.row(i), features.row(j)).sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Hardest positive (max distance) and hardest negative (min distance) per anchor.
/// Ties go to the lowest index.
pub fn mine_hardest(dist: &[f64], labels: &[usize], policy: MiningPolicy) -> Result<Vec<MinedTriplet>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if j != a && pos.is_none_or(|p| d > dist[a * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[a * n + q]) {
                neg = Some(j);
            }
        }
        match (pos, neg) {
            (Some(positive), Some(negative)) => out.push(MinedTriplet {
                anchor: a,
                positive,
                negative,
            }),
            _ if policy == MiningPolicy::Strict => {
                let what = if pos.is_none() { "positive" } else { "negative" };
                return Err(Error::DegenerateBatch(format!(
                    "anchor {a} (label {}) has no {what}",
                    labels[a]
                )));
            }
            _ => {}
        }
    }
    if out.is_empty() {
        return Err(Error::DegenerateBatch("no anchor has both a positive and a negative".into()));
    }
    Ok(out)
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

fn check_rows(features: &Tensor, labels: &[usize]) -> Result<()> {
    if features.shape().len() != 2 || features.dim(0) != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} with {} labels",
            features.shape(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean cross-entropy of `logits [N, M]` against integer labels.
pub fn id_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    id_loss_grad(logits, labels).map(|l| l.loss)
}

pub fn id_loss_grad(logits: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    check_rows(logits, labels)?;
    let (n, m) = (logits.dim(0), logits.dim(1));
    if let Some(&label) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::LabelOutOfRange { label, classes: m });
    }
    let mut grad = Tensor::zeros(&[n, m]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        let g = grad.row_mut(i);
        for (k, v) in row.iter().enumerate() {
            g[k] = (v - log_z).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok(LossGrad {
        loss: loss / n as f64,
        grad,
    })
}

/// Adds `scale * d||f_i - f_j|| / d f` into `grad`. Coincident points get zero.
fn add_distance_grad(features: &Tensor, dist: &[f64], i: usize, j: usize, scale: f64, grad: &mut Tensor) {
    let n = features.dim(0);
    let d = dist[i * n + j];
    if d <= 0.0 || scale == 0.0 {
        return;
    }
    let diff: Vec<f64> = features.row(i).iter().zip(features.row(j)).map(|(a, b)| (a - b) / d).collect();
    for (g, v) in grad.row_mut(i).iter_mut().zip(&diff) {
        *g += scale * v;
    }
    for (g, v) in grad.row_mut(j).iter_mut().zip(&diff) {
        *g -= scale * v;
    }
}

/// Batch-hard triplet loss with margin, averaged over anchors. Every anchor must have a
/// positive and a negative.
pub fn hard_triplet_loss(features: &Tensor, labels: &[usize], margin: f64) -> Result<f64> {
    hard_triplet_loss_grad(features, labels, margin).map(|l| l.loss)
}

pub fn hard_triplet_loss_grad(features: &Tensor, labels: &[usize], margin: f64) -> Result<LossGrad> {
    check_rows(features, labels)?;
    let n = features.dim(0);
    let dist = pairwise_distances(features);
    let triplets = mine_hardest(&dist, labels, MiningPolicy::Strict)?;
    let mut grad = Tensor::zeros(features.shape());
    let mut loss = 0.0;
    let scale = 1.0 / triplets.len() as f64;
    for t in &triplets {
        let v = dist[t.anchor * n + t.positive] - dist[t.anchor * n + t.negative] + margin;
        if v > 0.0 {
            loss += v;
            add_distance_grad(features, &dist, t.anchor, t.positive, scale, &mut grad);
            add_distance_grad(features, &dist, t.anchor, t.negative, -scale, &mut grad);
        }
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax triplet loss `mean log(1 + exp(d+ - d-))` on hardest-mined distances.
pub fn softmax_triplet_loss(features: &Tensor, labels: &[usize]) -> Result<f64> {
    softmax_triplet_loss_grad(features, labels, MiningPolicy::Strict).map(|l| l.loss)
}

pub fn softmax_triplet_loss_grad(features: &Tensor, labels: &[usize], policy: MiningPolicy) -> Result<LossGrad> {
    check_rows(features, labels)?;
    let n = features.dim(0);
    let dist = pairwise_distances(features);
    let triplets = mine_hardest(&dist, labels, policy)?;
    let mut grad = Tensor::zeros(features.shape());
    let mut loss = 0.0;
    let scale = 1.0 / triplets.len() as f64;
    for t in &triplets {
        let x = dist[t.anchor * n + t.positive] - dist[t.anchor * n + t.negative];
        loss += softplus(x);
        let s = scale / (1.0 + (-x).exp());
        add_distance_grad(features, &dist, t.anchor, t.positive, s, &mut grad);
        add_distance_grad(features, &dist, t.anchor, t.negative, -s, &mut grad);
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

pub fn pretrain_total(id: f64, triplet: f64, w: &LossWeights) -> f64 {
    id + w.kappa * triplet
}

pub fn finetune_total(id_g: f64, trip_g: f64, trip_top: f64, trip_bottom: f64, w: &LossWeights) -> f64 {
    w.alpha * id_g + w.beta * trip_g + w.gamma * trip_top + w.delta * trip_bottom
}

/// One row of the loss log. Pre-training rows leave the branch terms at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iter: usize,
    pub id_g: f64,
    pub trip_g: f64,
    pub trip_top: f64,
    pub trip_bottom: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,iter,id_g,trip_g,trip_top,trip_bottom,total";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.iter, r.id_g, r.trip_g, r.trip_top, r.trip_bottom, r.total
        );
    }
    s
}
