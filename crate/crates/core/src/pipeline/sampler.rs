//! Identity-balanced (P identities x K images) batch sampling.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngExt};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// Groups item indices by label. Needs at least two labels so every batch has negatives.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        if by_label.len() < 2 || p < 2 || k == 0 {
            return Err(Error::DegenerateBatch(format!(
                "PK sampling needs >= 2 labels and P >= 2 (have {} labels, P={p}, K={k})",
                by_label.len()
            )));
        }
        Ok(PkSampler {
            groups: by_label.into_values().collect(),
            p,
            k,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.groups.len()
    }

    /// `min(P, labels)` distinct labels, `K` items each; items are drawn without
    /// replacement when the label has enough of them.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let p = self.p.min(self.groups.len());
        let chosen = index::sample(rng, self.groups.len(), p).into_vec();
        let mut batch = Vec::with_capacity(p * self.k);
        for g in chosen {
            let members = &self.groups[g];
            if members.len() >= self.k {
                let mut pick = index::sample(rng, members.len(), self.k).into_vec();
                pick.shuffle(rng);
                batch.extend(pick.into_iter().map(|i| members[i]));
            } else {
                batch.extend((0..self.k).map(|_| members[rng.random_range(0..members.len())]));
            }
        }
        batch
    }

    /// Batches per epoch that sweep every label once on average.
    pub fn sweep_len(&self) -> usize {
        self.groups.len().div_ceil(self.p).max(1)
    }
}
