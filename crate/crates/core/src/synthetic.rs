//! Seeded synthetic interaction tables for tests and smoke runs.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};

use crate::dataset::InteractionTable;
use crate::error::{Error, Result};
use crate::rng;

/// Two communities: users and items are split in half, and each user links
/// to items of its own half with probability `p_in`, otherwise `p_out`.
/// Users left without any interaction get one in-block item.
pub fn two_block(n_users: usize, n_items: usize, p_in: f64, p_out: f64, seed: u64) -> Result<InteractionTable> {
    if n_users < 2 || n_items < 2 {
        return Err(Error::Config("two_block needs at least 2 users and 2 items".into()));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
        return Err(Error::Config("two_block probabilities must lie in [0, 1]".into()));
    }
    let mut rng = rng::Rng::seed_from_u64(seed);
    let block_of_user = |u: usize| usize::from(u >= n_users / 2);
    let block_of_item = |i: usize| usize::from(i >= n_items / 2);
    let mut pairs = Vec::new();
    for u in 0..n_users {
        let before = pairs.len();
        for i in 0..n_items {
            let p = if block_of_user(u) == block_of_item(i) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                pairs.push((u, i));
            }
        }
        if pairs.len() == before {
            let lo = if block_of_user(u) == 0 { 0 } else { n_items / 2 };
            let hi = if block_of_user(u) == 0 { n_items / 2 } else { n_items };
            pairs.push((u, rng.random_range(lo..hi)));
        }
    }
    InteractionTable::new(pairs, n_users, n_items)
}

/// Users with heavy-tailed activity: degrees follow a discrete Pareto law
/// with tail `exponent` starting at `min_degree` and capped at half the
/// catalogue. Items are drawn by Zipf-like popularity.
pub fn power_law(
    n_users: usize,
    n_items: usize,
    min_degree: usize,
    exponent: f64,
    seed: u64,
) -> Result<InteractionTable> {
    if min_degree == 0 || 2 * min_degree > n_items {
        return Err(Error::Config(format!(
            "min_degree {min_degree} must be positive and at most half of {n_items} items"
        )));
    }
    if exponent <= 1.0 {
        return Err(Error::Config("power_law exponent must exceed 1".into()));
    }
    let mut rng = rng::Rng::seed_from_u64(seed);
    let cap = n_items / 2;
    let popularity: Vec<f64> = (0..n_items).map(|i| 1.0 / ((i + 1) as f64).powf(0.8)).collect();
    let pick = WeightedIndex::new(&popularity).expect("positive weights");
    let mut pairs = Vec::new();
    for u in 0..n_users {
        let x: f64 = rng.random::<f64>();
        let raw = min_degree as f64 * (1.0 - x).powf(-1.0 / (exponent - 1.0));
        let degree = (raw.floor() as usize).clamp(min_degree, cap);
        let mut items = BTreeSet::new();
        while items.len() < degree {
            items.insert(pick.sample(&mut rng));
        }
        pairs.extend(items.into_iter().map(|i| (u, i)));
    }
    InteractionTable::new(pairs, n_users, n_items)
}
