//! Synthetic datasets: a small two-block matrix for fast end-to-end tests,
//! and a MovieLens-100K-shaped ratings file for desk runs when the real
//! dataset is not on disk.

use std::io::Write;
use std::path::Path;

use crate::data::InteractionMatrix;
use crate::error::Result;
use crate::rng::Rng;

/// Two user groups with disjoint item vocabularies: users `0..m/2` interact
/// only with items `0..n/2`, the rest only with items `n/2..n`. A
/// recommender that learns anything keeps recommendations inside the
/// user's own block.
pub fn block_dataset(
    num_users: usize,
    num_items: usize,
    interactions_per_user: usize,
    rng: &mut Rng,
) -> InteractionMatrix {
    assert!(num_users % 2 == 0 && num_items % 2 == 0);
    let half_items = num_items / 2;
    assert!(interactions_per_user <= half_items);
    let mut pairs = Vec::new();
    for u in 0..num_users {
        let base = if u < num_users / 2 { 0 } else { half_items };
        let picks = rng.sample_distinct(half_items, interactions_per_user);
        for p in picks {
            pairs.push((u as u32, (base + p) as u32));
        }
    }
    InteractionMatrix::from_pairs(num_users, num_items, pairs).expect("block pairs in range")
}

/// Which block an item belongs to in a [`block_dataset`].
pub fn block_of_item(item: u32, num_items: usize) -> usize {
    if (item as usize) < num_items / 2 {
        0
    } else {
        1
    }
}

pub fn block_of_user(user: u32, num_users: usize) -> usize {
    if (user as usize) < num_users / 2 {
        0
    } else {
        1
    }
}

/// Writes a block dataset as pair-csv (`user,item`, 0-based ids).
pub fn write_block_csv(
    path: impl AsRef<Path>,
    num_users: usize,
    num_items: usize,
    interactions_per_user: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = Rng::new(seed);
    let matrix = block_dataset(num_users, num_items, interactions_per_user, &mut rng);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for (u, i) in matrix.pairs() {
        writeln!(out, "{u},{i}")?;
    }
    out.flush()?;
    Ok(())
}

/// MovieLens-100K dimensions: 943 users, 1,682 items, 100,000 ratings.
pub const ML_USERS: usize = 943;
/// Seed used for the bundled stand-in ratings file.
pub const ML_STAND_IN_SEED: u64 = 100_843;
pub const ML_ITEMS: usize = 1682;
pub const ML_RATINGS: usize = 100_000;

/// Marginal rating distribution used by the stand-in generator
/// (fractions of ratings equal to 1..=5).
const RATING_MARGINALS: [f64; 5] = [0.06, 0.11, 0.27, 0.34, 0.22];

/// Writes a ratings file with the exact MovieLens-100K shape in
/// `user<TAB>item<TAB>rating<TAB>timestamp` format: 943 users, 1,682 items,
/// 100,000 rows, 1-based ids, no duplicate (user, item) pairs.
///
/// The generator plants a low-rank preference structure (8 latent factors)
/// under a heavy-tailed item popularity, then quantizes affinities into
/// 1..=5 stars with MovieLens-like marginals, so recommenders trained on the
/// file have real signal to find. Fully deterministic in `seed`.
pub fn write_movielens_shaped(path: impl AsRef<Path>, seed: u64) -> Result<()> {
    let mut rng = Rng::new(seed);
    let d = 8usize;

    let user_latent: Vec<Vec<f64>> = (0..ML_USERS)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    let item_latent: Vec<Vec<f64>> = (0..ML_ITEMS)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();

    // Zipf-ish popularity over a random item permutation.
    let mut perm: Vec<usize> = (0..ML_ITEMS).collect();
    rng.shuffle(&mut perm);
    let mut log_pop = vec![0.0f64; ML_ITEMS];
    for (rank, &item) in perm.iter().enumerate() {
        log_pop[item] = -0.9 * ((rank + 1) as f64).ln();
    }

    // Heavy-tailed per-user activity, at least 20 ratings each, summing to
    // exactly ML_RATINGS.
    let mut weights: Vec<f64> = (0..ML_USERS)
        .map(|_| (rng.normal() * 0.9).exp())
        .collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    let spare = ML_RATINGS - 20 * ML_USERS;
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| 20 + (w * spare as f64).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut idx = 0;
    while assigned < ML_RATINGS {
        if counts[idx % ML_USERS] < ML_ITEMS {
            counts[idx % ML_USERS] += 1;
            assigned += 1;
        }
        idx += 1;
    }

    // Per user: weighted sample without replacement via Gumbel top-k over
    // popularity + affinity.
    let beta = 0.55;
    let mut rows: Vec<(u32, u32, f64)> = Vec::with_capacity(ML_RATINGS);
    let mut keys: Vec<(f64, u32)> = Vec::with_capacity(ML_ITEMS);
    for u in 0..ML_USERS {
        keys.clear();
        for i in 0..ML_ITEMS {
            let affinity = crate::substrate::ops::dot(&user_latent[u], &item_latent[i]);
            let gumbel = -(-rng.uniform().max(1e-12).ln()).ln();
            keys.push((log_pop[i] + beta * affinity + gumbel, i as u32));
        }
        keys.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, item) in keys.iter().take(counts[u]) {
            let affinity =
                crate::substrate::ops::dot(&user_latent[u], &item_latent[item as usize]);
            let z = affinity + 1.1 * rng.normal();
            rows.push((u as u32, item, z));
        }
    }

    // Quantize affinities to stars by global quantile cuts so the marginal
    // rating distribution matches the targets exactly.
    let mut zs: Vec<f64> = rows.iter().map(|r| r.2).collect();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cuts = [0.0f64; 4];
    let mut acc = 0.0;
    for (c, frac) in cuts.iter_mut().zip(RATING_MARGINALS.iter()) {
        acc += frac;
        let pos = ((acc * zs.len() as f64) as usize).min(zs.len() - 1);
        *c = zs[pos];
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    let mut ts = 874_000_000u64;
    for (u, i, z) in rows {
        let rating = 1 + cuts.iter().filter(|&&c| z > c).count();
        ts += 1;
        writeln!(out, "{}\t{}\t{}\t{}", u + 1, i + 1, rating, ts)?;
    }
    out.flush()?;
    Ok(())
}
