use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Two record indices of a dataset forming a verification pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub same_id: bool,
}

fn by_identity(dataset: &Dataset) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records().iter().enumerate() {
        map.entry(r.vehicle_id).or_default().push(i);
    }
    map
}

/// Draws `round(batch_size · positive_fraction)` same-identity pairs and
/// fills the rest with different-identity pairs, in shuffled order.
pub fn sample_pairs(dataset: &Dataset, batch_size: usize, positive_fraction: f64, seed: u64) -> Result<Vec<PairSample>> {
    if batch_size == 0 {
        return Err(Error::Sampling("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::Sampling(format!("positive fraction {positive_fraction} is outside [0, 1]")));
    }
    let n_pos = (batch_size as f64 * positive_fraction).round() as usize;
    let n_neg = batch_size - n_pos;
    let groups = by_identity(dataset);
    let multi: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if n_pos > 0 && multi.is_empty() {
        return Err(Error::Sampling("positive pairs requested but no identity has two images".into()));
    }
    if n_neg > 0 && groups.len() < 2 {
        return Err(Error::Sampling("negative pairs need at least two identities".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = dataset.records();
    let mut pairs = Vec::with_capacity(batch_size);
    for _ in 0..n_pos {
        let group = multi[rng.random_range(0..multi.len())];
        let i = rng.random_range(0..group.len());
        let mut j = rng.random_range(0..group.len() - 1);
        if j >= i {
            j += 1;
        }
        pairs.push(PairSample { a: group[i], b: group[j], same_id: true });
    }
    for _ in 0..n_neg {
        let a = rng.random_range(0..records.len());
        let b = loop {
            let b = rng.random_range(0..records.len());
            if records[b].vehicle_id != records[a].vehicle_id {
                break b;
            }
        };
        pairs.push(PairSample { a, b, same_id: false });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Identity-disjoint split: `round(n_identities · fraction)` identities go to
/// the first dataset, the rest to the second. Record order is preserved.
pub fn split_train_test(dataset: &Dataset, train_identity_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_identity_fraction > 0.0 && train_identity_fraction < 1.0) {
        return Err(Error::Split(format!("fraction {train_identity_fraction} must lie strictly between 0 and 1")));
    }
    let mut ids = dataset.identities();
    let n_train = (ids.len() as f64 * train_identity_fraction).round() as usize;
    if n_train == 0 || n_train == ids.len() {
        return Err(Error::Split(format!(
            "fraction {train_identity_fraction} of {} identities leaves one side empty",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train_ids: std::collections::BTreeSet<u32> = ids[..n_train].iter().copied().collect();
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| train_ids.contains(&dataset.records()[i].vehicle_id));
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}
