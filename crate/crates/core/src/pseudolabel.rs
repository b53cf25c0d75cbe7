//! Mini-batch k-means and the three-view pseudo-label generation for target images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_fusion::{bmfn_rows, fuse_batch, Branch, BranchNorm};
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::meanteacher::{eval_inputs, CoreModel, NetworkPair, EMBED_CHUNK};
use crate::network::{split_batch, FeatureMap, Mode, ParamStore};
use crate::preprocess::AugmentationPolicy;
use crate::tensor::{squared_distance, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub minibatch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Independent k-means++ restarts; the lowest within-cluster error wins.
    pub n_init: usize,
}

impl ClusterConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        ClusterConfig {
            k,
            minibatch_size: 256,
            max_iters: 100,
            seed,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Contiguous labels in `0..K'` with `K' <= K`.
    pub assignments: Vec<usize>,
    /// `[K', D]`.
    pub centroids: Tensor,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

impl KMeansResult {
    pub fn num_clusters(&self) -> usize {
        self.centroids.dim(0)
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = squared_distance(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.dim(0);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // Every remaining point duplicates a chosen centre.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    chosen.iter().map(|&i| points.row(i).to_vec()).collect()
}

fn run_once(points: &Tensor, cfg: &ClusterConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>) {
    let n = points.dim(0);
    let mut centroids = kmeans_pp(points, cfg.k, rng);
    let mut counts = vec![0usize; cfg.k];
    let batch = cfg.minibatch_size.min(n);
    for _ in 0..cfg.max_iters {
        let idx = index::sample(rng, n, batch).into_vec();
        let assigned: Vec<usize> = idx.iter().map(|&i| nearest(points.row(i), &centroids).0).collect();
        for (&i, &c) in idx.iter().zip(&assigned) {
            counts[c] += 1;
            let lr = 1.0 / counts[c] as f64;
            for (cv, pv) in centroids[c].iter_mut().zip(points.row(i)) {
                *cv += lr * (pv - *cv);
            }
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids).0).collect();
    // Re-seed empty clusters from the point farthest from its centroid, taken from a
    // cluster that keeps at least one member.
    for c in 0..cfg.k {
        let mut sizes = vec![0usize; cfg.k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        if sizes[c] > 0 {
            continue;
        }
        let far = (0..n)
            .filter(|&i| sizes[labels[i]] > 1)
            .map(|i| (i, squared_distance(points.row(i), &centroids[labels[i]])))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        if let Some((i, d)) = far {
            if d > 0.0 {
                centroids[c] = points.row(i).to_vec();
                labels[i] = c;
            }
        }
    }
    (labels, centroids)
}

/// Within-cluster sum of squares of a partition, measured to the cluster means.
pub fn partition_error(points: &Tensor, labels: &[usize]) -> f64 {
    let d = points.dim(1);
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(points.row(i)).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (s, cnt) = &sums[l];
            let mean: Vec<f64> = s.iter().map(|v| v / *cnt as f64).collect();
            squared_distance(points.row(i), &mean)
        })
        .sum()
}

pub fn minibatch_kmeans(points: &Tensor, cfg: &ClusterConfig) -> Result<KMeansResult> {
    let n = points.dim(0);
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::TooFewPoints { points: n, clusters: cfg.k });
    }
    if !points.all_finite() {
        return Err(Error::NonFiniteInput);
    }
    let mut best: Option<(f64, Vec<usize>, Vec<Vec<f64>>)> = None;
    for restart in 0..cfg.n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (labels, centroids) = run_once(points, cfg, &mut rng);
        let err = partition_error(points, &labels);
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, labels, centroids));
        }
    }
    let (_, labels, centroids) = best.expect("at least one restart");
    // Compact to 0..K' in ascending order of the original cluster index.
    let mut remap = BTreeMap::new();
    let mut used: Vec<usize> = labels.clone();
    used.sort_unstable();
    used.dedup();
    for (new, old) in used.iter().enumerate() {
        remap.insert(*old, new);
    }
    let assignments: Vec<usize> = labels.iter().map(|l| remap[l]).collect();
    let d = points.dim(1);
    let mut cen = Tensor::zeros(&[used.len(), d]);
    for (new, old) in used.iter().enumerate() {
        cen.row_mut(new).copy_from_slice(&centroids[*old]);
    }
    let inertia = assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| squared_distance(points.row(i), cen.row(c)))
        .sum();
    Ok(KMeansResult {
        assignments,
        centroids: cen,
        inertia,
    })
}

fn choose2(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let total = choose2(n);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        // Both labelings are trivial (all singletons or a single cluster).
        return if rows.len() == cols.len() && rows.len() == table.len() { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    pub image_id: String,
    pub label_global: usize,
    pub label_top: usize,
    pub label_bottom: usize,
    pub epoch: usize,
}

/// Clustering inputs: `[N, C]` unit-norm rows for each view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureViews {
    pub global: Tensor,
    pub top: Tensor,
    pub bottom: Tensor,
}

fn branch_theta(model: &CoreModel, student: &ParamStore, branch: Branch, zetas: &[FeatureMap], taus: &[FeatureMap]) -> Result<Tensor> {
    let ecab = model.ecab_params(student, branch)?;
    let bn = BranchNorm::from_store(student, branch);
    Ok(fuse_batch(zetas, taus, &ecab, &bn, Mode::Eval)?.theta)
}

/// Eval-mode features for the three views. The global view is the flip-averaged student
/// neck feature; the top and bottom views are fusion features in which the student's
/// halves attend the teacher's global map, flip-averaged the same way.
pub fn extract_views(model: &CoreModel, pair: &NetworkPair, images: &[Image], policy: &AugmentationPolicy) -> Result<FeatureViews> {
    if images.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    let c = model.channels();
    let n = images.len();
    let mut views = FeatureViews {
        global: Tensor::zeros(&[n, c]),
        top: Tensor::zeros(&[n, c]),
        bottom: Tensor::zeros(&[n, c]),
    };
    for (chunk_idx, chunk) in images.chunks(EMBED_CHUNK).enumerate() {
        let (x, x_flip) = eval_inputs(chunk, policy)?;
        let s = model.net.forward(&pair.student, &x, Mode::Eval)?;
        let s_flip = model.net.forward(&pair.student, &x_flip, Mode::Eval)?;
        let t = model.net.forward(&pair.teacher, &x, Mode::Eval)?;
        let t_flip = model.net.forward(&pair.teacher, &x_flip, Mode::Eval)?;
        let global = bmfn_rows(&s.neck, &s_flip.neck)?;

        let (s_top, s_bottom) = split_batch(&s.maps)?;
        let (sf_top, sf_bottom) = split_batch(&s_flip.maps)?;
        let taus: Vec<FeatureMap> = (0..chunk.len()).map(|i| FeatureMap::from_batch(&t.maps, i)).collect();
        let taus_flip: Vec<FeatureMap> = (0..chunk.len()).map(|i| FeatureMap::from_batch(&t_flip.maps, i)).collect();
        let top = bmfn_rows(
            &branch_theta(model, &pair.student, Branch::Top, &s_top, &taus)?,
            &branch_theta(model, &pair.student, Branch::Top, &sf_top, &taus_flip)?,
        )?;
        let bottom = bmfn_rows(
            &branch_theta(model, &pair.student, Branch::Bottom, &s_bottom, &taus)?,
            &branch_theta(model, &pair.student, Branch::Bottom, &sf_bottom, &taus_flip)?,
        )?;
        for i in 0..chunk.len() {
            let row = chunk_idx * EMBED_CHUNK + i;
            views.global.row_mut(row).copy_from_slice(global.row(i));
            views.top.row_mut(row).copy_from_slice(top.row(i));
            views.bottom.row_mut(row).copy_from_slice(bottom.row(i));
        }
    }
    Ok(views)
}

/// Clusters each view independently and returns one label triple per image.
pub fn generate_pseudo_labels(
    model: &CoreModel,
    pair: &NetworkPair,
    image_ids: &[String],
    images: &[Image],
    policy: &AugmentationPolicy,
    cfg: &[ClusterConfig; 3],
    epoch: usize,
) -> Result<Vec<PseudoLabelAssignment>> {
    if images.is_empty() {
        return Err(Error::EmptyTargetSet);
    }
    let views = extract_views(model, pair, images, policy)?;
    let g = minibatch_kmeans(&views.global, &cfg[0])?.assignments;
    let t = minibatch_kmeans(&views.top, &cfg[1])?.assignments;
    let b = minibatch_kmeans(&views.bottom, &cfg[2])?.assignments;
    Ok(image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| PseudoLabelAssignment {
            image_id: id.clone(),
            label_global: g[i],
            label_top: t[i],
            label_bottom: b[i],
            epoch,
        })
        .collect())
}

pub const PSEUDO_LABEL_HEADER: &str = "image_id\tlabel_global\tlabel_top\tlabel_bottom";

pub fn pseudo_labels_tsv(labels: &[PseudoLabelAssignment]) -> String {
    let mut s = String::from(PSEUDO_LABEL_HEADER);
    s.push('\n');
    for l in labels {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", l.image_id, l.label_global, l.label_top, l.label_bottom);
    }
    s
}

/// Writes `pseudo_labels_epoch{N}.tsv` under `dir`.
pub fn write_pseudo_labels(dir: &Path, labels: &[PseudoLabelAssignment], epoch: usize) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("pseudo_labels_epoch{epoch}.tsv"));
    std::fs::write(&path, pseudo_labels_tsv(labels)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn separated_groups() {
        let pts = Tensor::from_vec(&[4, 2], vec![0.0, 0.0, 10.0, 10.0, 0.1, 0.0, 10.1, 10.0]);
        let r = minibatch_kmeans(&pts, &ClusterConfig::new(2, 3)).unwrap();
        assert_eq!(adjusted_rand_index(&r.assignments, &[0, 1, 0, 1]), 1.0);
        assert_eq!(r.num_clusters(), 2);
    }

    #[test]
    fn k_equals_n_is_exact() {
        let pts = Tensor::from_vec(&[5, 1], vec![0.0, 1.0, 3.0, 7.0, 15.0]);
        let r = minibatch_kmeans(&pts, &ClusterConfig::new(5, 0)).unwrap();
        let mut a = r.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn deterministic_and_errors() {
        let pts = Tensor::from_vec(&[6, 1], vec![0.0, 0.3, 2.0, 2.2, 5.0, 5.1]);
        let cfg = ClusterConfig::new(3, 11);
        assert_eq!(minibatch_kmeans(&pts, &cfg).unwrap(), minibatch_kmeans(&pts, &cfg).unwrap());
        assert!(matches!(
            minibatch_kmeans(&pts, &ClusterConfig::new(7, 0)),
            Err(Error::TooFewPoints { points: 6, clusters: 7 })
        ));
        let nan = Tensor::from_vec(&[2, 1], vec![0.0, f64::NAN]);
        assert!(matches!(minibatch_kmeans(&nan, &ClusterConfig::new(1, 0)), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn duplicates_compact_labels() {
        let pts = Tensor::from_vec(&[4, 1], vec![1.0, 1.0, 1.0, 1.0]);
        let r = minibatch_kmeans(&pts, &ClusterConfig::new(3, 0)).unwrap();
        let max = *r.assignments.iter().max().unwrap();
        assert_eq!(max + 1, r.num_clusters());
        assert!(r.num_clusters() <= 3);
        let single = minibatch_kmeans(&Tensor::from_vec(&[1, 2], vec![0.5, 0.5]), &ClusterConfig::new(1, 0)).unwrap();
        assert_eq!(single.assignments, vec![0]);
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]), 1.0);
        // Hand-computed: contingency [[1,1],[1,1]] gives index 0, expected 0.5*... -> -0.5.
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn tsv_layout() {
        let l = PseudoLabelAssignment { image_id: "x1".into(), label_global: 2, label_top: 0, label_bottom: 1, epoch: 3 };
        assert_eq!(pseudo_labels_tsv(&[l]), format!("{PSEUDO_LABEL_HEADER}\nx1\t2\t0\t1\n"));
    }

    proptest! {
        #[test]
        fn labels_contiguous(seed in 0u64..200, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Tensor::from_vec(&[10, 2], (0..20).map(|_| (rng.random::<f64>() * 3.0).round()).collect());
            let r = minibatch_kmeans(&pts, &ClusterConfig::new(k, seed)).unwrap();
            let mut used = r.assignments.clone();
            used.sort_unstable();
            used.dedup();
            prop_assert_eq!(used, (0..r.num_clusters()).collect::<Vec<_>>());
            prop_assert!(r.num_clusters() <= k);
        }
    }
}
