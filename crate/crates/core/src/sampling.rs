//! Batch construction: PK batches, uniformly random triplets and offline
//! hard mining.
//!
//! Identities with a single item can never supply a positive, so they are
//! skipped as PK identities and as triplet anchors (they still serve as
//! negatives).

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{pairwise_distances, BatchLabels, Label, MarginMode, Metric};
use crate::mlp::{embed, MlpParams};
use crate::par;

pub const DEFAULT_OHM_FRACTION: f64 = 0.25;

/// Row indices into a dataset, laid out as `P` consecutive blocks of `K` rows
/// sharing one identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl PkBatch {
    pub fn labels(&self, dataset: &LabeledDataset) -> BatchLabels {
        BatchLabels::new(self.indices.iter().map(|&i| dataset.pid(i)).collect())
    }

    pub fn block(&self, b: usize) -> &[usize] {
        &self.indices[b * self.k..(b + 1) * self.k]
    }

    /// Checks the block layout against the dataset labels.
    pub fn validate(&self, dataset: &LabeledDataset) -> Result<()> {
        if self.indices.len() != self.p * self.k {
            return Err(Error::contract("PK batch length is not P·K"));
        }
        let mut seen = std::collections::HashSet::new();
        for b in 0..self.p {
            let block = self.block(b);
            let id = dataset.pid(block[0]);
            if block.iter().any(|&i| dataset.pid(i) != id) {
                return Err(Error::contract(format!("block {b} mixes identities")));
            }
            if !seen.insert(id) {
                return Err(Error::contract(format!("identity {id} appears in two blocks")));
            }
        }
        Ok(())
    }
}

/// Draws `P` identities uniformly without replacement and `K` items of each.
///
/// Items are drawn without replacement when the identity has at least `K`;
/// otherwise every item appears once and the remaining slots are filled by
/// uniform resampling among that identity's items.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<PkBatch> {
    if p < 2 || k < 2 {
        return Err(Error::config(format!("PK batches need P >= 2 and K >= 2, got P={p}, K={k}")));
    }
    let eligible: Vec<&Vec<usize>> = dataset
        .identities()
        .values()
        .filter(|items| items.len() >= 2)
        .collect();
    if eligible.len() < p {
        return Err(Error::sampling(format!(
            "need {p} identities with at least two items, dataset has {}",
            eligible.len()
        )));
    }
    let mut indices = Vec::with_capacity(p * k);
    for pick in index::sample(rng, eligible.len(), p) {
        let items = eligible[pick];
        if items.len() >= k {
            indices.extend(index::sample(rng, items.len(), k).into_iter().map(|j| items[j]));
        } else {
            let start = indices.len();
            indices.extend_from_slice(items);
            indices[start..].shuffle(rng);
            for _ in items.len()..k {
                indices.push(items[rng.random_range(0..items.len())]);
            }
        }
    }
    Ok(PkBatch { indices, p, k })
}

/// (anchor, positive, negative) dataset row indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<(usize, usize, usize)>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Rows stacked as `a0, p0, n0, a1, p1, n1, ...`.
    pub fn rows(&self) -> Vec<usize> {
        self.triplets.iter().flat_map(|&(a, p, n)| [a, p, n]).collect()
    }

    pub fn validate(&self, dataset: &LabeledDataset) -> Result<()> {
        for &(a, p, n) in &self.triplets {
            let (ya, yp, yn) = (dataset.pid(a), dataset.pid(p), dataset.pid(n));
            if a == p || ya != yp || ya == yn {
                return Err(Error::contract(format!("({a}, {p}, {n}) is not a valid triplet")));
            }
        }
        Ok(())
    }
}

fn check_triplet_support(dataset: &LabeledDataset) -> Result<()> {
    if dataset.num_identities() < 2 {
        return Err(Error::sampling("triplets need at least two identities"));
    }
    if dataset.identities().values().all(|items| items.len() < 2) {
        return Err(Error::sampling("no identity has two items to form a positive pair"));
    }
    Ok(())
}

/// `B` triplets with a uniform anchor, a uniform positive among the anchor's
/// other items and a uniform negative among all other identities' items.
pub fn sample_random_triplets<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    b: usize,
    rng: &mut R,
) -> Result<TripletSet> {
    check_triplet_support(dataset)?;
    let anchors: Vec<usize> = dataset
        .identities()
        .values()
        .filter(|items| items.len() >= 2)
        .flatten()
        .copied()
        .collect();
    let mut triplets = Vec::with_capacity(b);
    for _ in 0..b {
        let a = anchors[rng.random_range(0..anchors.len())];
        let ya = dataset.pid(a);
        let same = &dataset.identities()[&ya];
        // uniform over the anchor's other items
        let mut j = rng.random_range(0..same.len() - 1);
        let pos_self = same.iter().position(|&i| i == a).expect("anchor in its identity");
        if j >= pos_self {
            j += 1;
        }
        let p = same[j];
        // uniform over items of other identities
        let n = loop {
            let c = rng.random_range(0..dataset.len());
            if dataset.pid(c) != ya {
                break c;
            }
        };
        triplets.push((a, p, n));
    }
    Ok(TripletSet { triplets })
}

/// Scored candidate during mining.
#[derive(Clone, Copy, Debug)]
struct Scored {
    loss: f64,
    triplet: (usize, usize, usize),
}

fn valid_subset(dataset: &LabeledDataset, rows: &[usize]) -> bool {
    let mut counts = std::collections::BTreeMap::<Label, usize>::new();
    for &r in rows {
        *counts.entry(dataset.pid(r)).or_default() += 1;
    }
    counts.len() >= 2 && counts.values().any(|&c| c >= 2)
}

/// Offline hard mining: embeds a random `sample_fraction` of the dataset with
/// the current model and returns the `b` valid triplets of that subset with
/// the largest loss terms, in descending order (ties by ascending indices).
pub fn mine_hard_offline<R: Rng + ?Sized>(
    model: &MlpParams,
    dataset: &LabeledDataset,
    sample_fraction: f64,
    b: usize,
    mode: MarginMode,
    metric: Metric,
    rng: &mut R,
) -> Result<TripletSet> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::config(format!(
            "sample fraction must lie in (0, 1], got {sample_fraction}"
        )));
    }
    check_triplet_support(dataset)?;
    let n = dataset.len();
    let size = ((sample_fraction * n as f64).ceil() as usize).clamp(3.min(n), n);
    let mut rows = Vec::new();
    for attempt in 0..2 {
        let mut draw = index::sample(rng, n, size).into_vec();
        draw.sort_unstable();
        if valid_subset(dataset, &draw) {
            rows = draw;
            break;
        }
        if attempt == 1 {
            return Err(Error::sampling(
                "mining subset has no valid triplet after resampling",
            ));
        }
    }
    let emb = embed(model, &dataset.features().select_rows(&rows))?;
    let dist = pairwise_distances(&emb, metric);
    let y: Vec<Label> = rows.iter().map(|&r| dataset.pid(r)).collect();
    let m = rows.len();
    let per_anchor = par::map_range(m, |a| {
        let mut out = Vec::new();
        for p in (0..m).filter(|&p| p != a && y[p] == y[a]) {
            for q in (0..m).filter(|&q| y[q] != y[a]) {
                out.push(Scored {
                    loss: mode.apply(dist.get(a, p) - dist.get(a, q)),
                    triplet: (rows[a], rows[p], rows[q]),
                });
            }
        }
        out
    });
    let mut scored: Vec<Scored> = per_anchor.into_iter().flatten().collect();
    if scored.len() < b {
        return Err(Error::sampling(format!(
            "mining subset holds {} valid triplets, {b} requested",
            scored.len()
        )));
    }
    scored.sort_by(|x, y| y.loss.total_cmp(&x.loss).then(x.triplet.cmp(&y.triplet)));
    scored.truncate(b);
    Ok(TripletSet {
        triplets: scored.into_iter().map(|s| s.triplet).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(ids: usize, per: usize) -> LabeledDataset {
        let n = ids * per;
        let f = Matrix::from_fn(n, 2, |i, j| (i / per) as f64 * 10.0 + (i % per) as f64 * 0.1 + j as f64);
        LabeledDataset::new(
            f,
            (0..n).map(|i| (i / per) as Label).collect(),
            (0..n).map(|i| (i % 2) as i64).collect(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pk_batch_enough_items() {
        let d = grid(10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pk_batch(&d, 4, 4, &mut rng).unwrap();
        assert_eq!(b.indices.len(), 16);
        b.validate(&d).unwrap();
        for blk in 0..4 {
            let mut items = b.block(blk).to_vec();
            items.sort_unstable();
            items.dedup();
            assert_eq!(items.len(), 4);
        }
        assert_eq!(b.labels(&d).require_pk().unwrap(), (4, 4));
    }

    #[test]
    fn pk_batch_replicates_small_identity() {
        let f = Matrix::zeros(6, 1);
        let d = LabeledDataset::new(f, vec![0, 0, 1, 1, 1, 1], vec![0; 6], (0..6).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_pk_batch(&d, 2, 4, &mut rng).unwrap();
        let blk0: Vec<_> = (0..2).map(|i| b.block(i)).find(|blk| d.pid(blk[0]) == 0).unwrap().to_vec();
        assert!(blk0.contains(&0) && blk0.contains(&1));
        assert_eq!(blk0.len(), 4);
    }

    #[test]
    fn pk_batch_errors() {
        let d = grid(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(sample_pk_batch(&d, 4, 2, &mut rng), Err(Error::Sampling(_))));
        assert!(matches!(sample_pk_batch(&d, 2, 1, &mut rng), Err(Error::Config(_))));
        // singletons are not eligible
        let f = Matrix::zeros(4, 1);
        let d = LabeledDataset::new(f, vec![0, 0, 1, 2], vec![0; 4], (0..4).collect()).unwrap();
        assert!(matches!(sample_pk_batch(&d, 2, 2, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn pk_sampling_is_deterministic() {
        let d = grid(10, 5);
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| sample_pk_batch(&d, 3, 3, &mut rng).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| sample_pk_batch(&d, 3, 3, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn random_triplets_respect_labels() {
        let d = grid(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = sample_random_triplets(&d, 200, &mut rng).unwrap();
        assert_eq!(t.len(), 200);
        t.validate(&d).unwrap();

        let t = sample_random_triplets(&grid(5, 3), 42, &mut rng).unwrap();
        assert_eq!(t.rows().len(), 126);
    }

    #[test]
    fn singleton_is_never_anchor() {
        let f = Matrix::zeros(4, 1);
        let d = LabeledDataset::new(f, vec![0, 0, 0, 1], vec![0; 4], (0..4).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = sample_random_triplets(&d, 500, &mut rng).unwrap();
        assert!(t.triplets.iter().all(|&(a, _, n)| a != 3 && n == 3));
        let lonely = LabeledDataset::new(Matrix::zeros(2, 1), vec![0, 1], vec![0; 2], vec![0, 1]).unwrap();
        assert!(matches!(sample_random_triplets(&lonely, 1, &mut rng), Err(Error::Sampling(_))));
    }
}
