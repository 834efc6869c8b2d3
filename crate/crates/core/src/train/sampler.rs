use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

/// Identity-balanced batches of `p` identities × `k` images.
///
/// Each epoch every identity's images are shuffled and cut into chunks of `k`
/// (the last chunk topped up by resampling); each batch then takes the `p`
/// identities with the most chunks left, ties broken at random, until fewer
/// than `p` identities have any.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_identity: BTreeMap<usize, Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `labels[i]` is the identity of sample `i`.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Self {
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_identity.entry(l).or_default().push(i);
        }
        PkSampler { by_identity, p, k }
    }

    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut chunks: Vec<Vec<Vec<usize>>> = Vec::with_capacity(self.by_identity.len());
        for members in self.by_identity.values() {
            let mut pool = members.clone();
            pool.shuffle(rng);
            while pool.len() % self.k != 0 {
                let extra = members[rng.random_range(0..members.len())];
                pool.push(extra);
            }
            chunks.push(pool.chunks(self.k).map(<[usize]>::to_vec).collect());
        }
        let mut batches = Vec::new();
        loop {
            let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if open.len() < self.p {
                break;
            }
            open.shuffle(rng);
            open.sort_by_key(|&i| std::cmp::Reverse(chunks[i].len()));
            let mut batch = Vec::with_capacity(self.p * self.k);
            for &i in &open[..self.p] {
                batch.extend(chunks[i].pop().expect("open identity has a chunk"));
            }
            batches.push(batch);
        }
        batches
    }
}
