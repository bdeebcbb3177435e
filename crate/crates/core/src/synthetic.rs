//! Seeded synthetic interaction logs.
//!
//! Two generators: [`ml100k_shaped`] reproduces the marginal shape of the
//! classic MovieLens-100K log (943 users, 1,682 items, exactly 100,000
//! ratings, long-tailed activity and popularity) for experiments that need a
//! realistically sparse corpus without shipping or downloading one, and
//! [`planted_groups_log`] builds a small corpus whose items fall into known
//! disjoint groups, for checking that structure discovery actually recovers
//! planted structure.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::LogNormal;

use crate::dataset::{InteractionLog, RawRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, purpose};

/// User count of the MovieLens-100K shape.
pub const ML100K_USERS: usize = 943;
/// Item count of the MovieLens-100K shape.
pub const ML100K_ITEMS: usize = 1682;
/// Interaction count of the MovieLens-100K shape.
pub const ML100K_INTERACTIONS: usize = 100_000;

/// Every user's minimum rating count (MovieLens-100K guarantees 20).
const MIN_PER_USER: usize = 20;
/// Activity cap per user, near the real log's most active user (737).
const MAX_PER_USER: usize = 600;
/// Start of the real log's timestamp epoch (late 1997), seconds.
const EPOCH_START: i64 = 874_724_710;
const EPOCH_END: i64 = 893_286_638;

/// A corpus with the exact MovieLens-100K marginals: 943 users, 1,682 items,
/// 100,000 ratings in 1..=5, no duplicate (user, item) pairs, every user with
/// at least 20 ratings and every item with at least one. User activity and
/// item popularity are long-tailed. Fully deterministic in `seed`.
pub fn ml100k_shaped(seed: u64) -> Result<InteractionLog> {
    let mut rng = derive_rng(seed, &[purpose::SYNTHETIC]);
    let n = ML100K_USERS;
    let m = ML100K_ITEMS;

    // Long-tailed per-user activity: log-normal weights shared out by
    // largest-remainder so the total is exact, floored at the minimum and
    // capped to keep one user from swallowing the corpus.
    let activity = LogNormal::new(0.0, 1.1).expect("constant parameters are valid");
    let weights: Vec<f64> = (0..n).map(|_| activity.sample(&mut rng)).collect();
    let quotas = capped_largest_remainder(
        &weights,
        ML100K_INTERACTIONS,
        MIN_PER_USER,
        MAX_PER_USER,
    );

    // Long-tailed item popularity: Zipf-like rank weights dealt onto a
    // shuffled item order, so popularity is independent of item id.
    let mut by_rank: Vec<u32> = (0..m as u32).collect();
    by_rank.shuffle(&mut rng);
    let mut popularity = vec![0.0f64; m];
    for (rank, &item) in by_rank.iter().enumerate() {
        popularity[item as usize] = ((rank + 1) as f64).powf(-0.8);
    }

    // Pre-deal every item to one user round-robin; that pins full item
    // coverage, and the per-user quota (>= 20 > ceil(m / n)) has room for it.
    let mut baskets: Vec<Vec<u32>> = vec![Vec::new(); n];
    for item in 0..m as u32 {
        baskets[item as usize % n].push(item);
    }

    let rating_values = [1.0, 2.0, 3.0, 4.0, 5.0];
    // Roughly the real log's rating histogram (4 is the mode).
    let rating_dist =
        WeightedIndex::new([6, 11, 27, 34, 21]).expect("constant weights are valid");

    let all_items: Vec<u32> = (0..m as u32).collect();
    let mut records = Vec::with_capacity(ML100K_INTERACTIONS);
    for (user, basket) in baskets.iter_mut().enumerate() {
        let want = quotas[user] - basket.len();
        let owned: Vec<bool> = {
            let mut flags = vec![false; m];
            for &i in basket.iter() {
                flags[i as usize] = true;
            }
            flags
        };
        let extra = all_items
            .choose_multiple_weighted(&mut rng, want + basket.len(), |&i| {
                // Zero weight removes the pre-dealt items from the draw.
                if owned[i as usize] {
                    0.0
                } else {
                    popularity[i as usize]
                }
            })
            .map_err(|e| Error::Sampling(format!("item popularity draw: {e}")))?
            .take(want);
        basket.extend(extra);
        debug_assert_eq!(basket.len(), quotas[user]);
        for &item in basket.iter() {
            records.push(RawRecord {
                user: user as u32,
                item,
                rating: rating_values[rating_dist.sample(&mut rng)],
                timestamp: rng.gen_range(EPOCH_START..=EPOCH_END),
            });
        }
    }
    debug_assert_eq!(records.len(), ML100K_INTERACTIONS);

    Ok(InteractionLog {
        records,
        // 1-based raw ids, like the real log.
        raw_users: (1..=n as u64).collect(),
        raw_items: (1..=m as u64).collect(),
    })
}

/// A small corpus with planted item structure, plus the ground-truth labels.
pub struct PlantedGroups {
    pub log: InteractionLog,
    /// `item_groups[item]` is the planted group of each (dense) item id.
    pub item_groups: Vec<u32>,
}

/// Splits `n_items` into `n_groups` equal contiguous groups, assigns each
/// client to one group round-robin, and gives every client `pos_per_client`
/// positives drawn from its own group's items only. Items of the same group
/// therefore co-occur across clients while items of different groups never
/// do — a clustering of item embeddings trained on this corpus should recover
/// the groups.
///
/// Every item is pre-dealt to one of its group's clients with an early
/// timestamp, so each item is in somebody's training set even after the
/// latest positive per client is held out for evaluation.
pub fn planted_groups_log(
    n_clients: usize,
    n_items: usize,
    n_groups: usize,
    pos_per_client: usize,
    seed: u64,
) -> Result<PlantedGroups> {
    if n_groups == 0 || n_clients < n_groups {
        return Err(Error::InvalidParameter(format!(
            "need at least one client per group, got {n_clients} clients / {n_groups} groups"
        )));
    }
    if n_items % n_groups != 0 {
        return Err(Error::InvalidParameter(format!(
            "{n_items} items do not split evenly into {n_groups} groups"
        )));
    }
    let group_size = n_items / n_groups;
    if pos_per_client < 2 || pos_per_client > group_size {
        return Err(Error::InvalidParameter(format!(
            "pos_per_client must be in [2, {group_size}], got {pos_per_client}"
        )));
    }
    let clients_per_group = n_clients / n_groups + usize::from(n_clients % n_groups != 0);
    let pre_dealt_cap = group_size / (n_clients / n_groups) + 1;
    if pre_dealt_cap >= pos_per_client {
        return Err(Error::InvalidParameter(format!(
            "each client of a {clients_per_group}-client group may be pre-dealt \
             up to {pre_dealt_cap} of its {group_size} items; pos_per_client = \
             {pos_per_client} leaves no room to sample"
        )));
    }

    let mut rng = derive_rng(seed, &[purpose::SYNTHETIC]);
    let item_groups: Vec<u32> = (0..n_items).map(|i| (i / group_size) as u32).collect();

    // Deal each group's items round-robin over the group's clients.
    let mut baskets: Vec<Vec<u32>> = vec![Vec::new(); n_clients];
    for g in 0..n_groups {
        let members: Vec<usize> = (0..n_clients).filter(|c| c % n_groups == g).collect();
        for (j, item) in (g * group_size..(g + 1) * group_size).enumerate() {
            baskets[members[j % members.len()]].push(item as u32);
        }
    }

    let mut records = Vec::with_capacity(n_clients * pos_per_client);
    for (client, basket) in baskets.iter_mut().enumerate() {
        let group = (client % n_groups) as u32;
        let pool: Vec<u32> = (group as usize * group_size..(group as usize + 1) * group_size)
            .map(|i| i as u32)
            .filter(|i| !basket.contains(i))
            .collect();
        let want = pos_per_client - basket.len();
        basket.extend(pool.choose_multiple(&mut rng, want));
        // Pre-dealt items come first, so the held-out latest positive is
        // always a sampled one and coverage survives the split.
        for (t, &item) in basket.iter().enumerate() {
            records.push(RawRecord {
                user: client as u32,
                item,
                rating: 5.0,
                timestamp: t as i64,
            });
        }
    }

    Ok(PlantedGroups {
        log: InteractionLog {
            records,
            raw_users: (0..n_clients as u64).collect(),
            raw_items: (0..n_items as u64).collect(),
        },
        item_groups,
    })
}

/// Allocates `total` units over `weights.len()` bins proportionally to the
/// weights, with every bin getting at least `floor` and at most `cap`, using
/// largest-remainder rounding so the sum is exactly `total`.
fn capped_largest_remainder(
    weights: &[f64],
    total: usize,
    floor: usize,
    cap: usize,
) -> Vec<usize> {
    let n = weights.len();
    assert!(n > 0 && floor <= cap, "degenerate allocation");
    assert!(n * floor <= total && total <= n * cap, "infeasible totals");
    let spread = cap - floor;
    let extra_total = total - n * floor;
    let sum_w: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights
        .iter()
        .map(|w| w / sum_w * extra_total as f64)
        .collect();
    let mut extra: Vec<usize> = shares
        .iter()
        .map(|s| (s.floor() as usize).min(spread))
        .collect();
    let mut leftover = extra_total - extra.iter().sum::<usize>();

    // Hand out the remainder by descending fractional part (ties by index),
    // skipping bins that hit the cap; loop because capped bins pass their
    // share on.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).expect("finite shares").then(a.cmp(&b))
    });
    while leftover > 0 {
        let mut progressed = false;
        for &u in &order {
            if leftover == 0 {
                break;
            }
            if extra[u] < spread {
                extra[u] += 1;
                leftover -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "total exceeds aggregate cap");
    }
    extra.iter().map(|e| e + floor).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_leave_one_out;
    use std::collections::HashSet;

    #[test]
    fn ml100k_shape_is_exact() {
        let log = ml100k_shaped(42).unwrap();
        assert_eq!(log.n_users(), ML100K_USERS);
        assert_eq!(log.n_items(), ML100K_ITEMS);
        assert_eq!(log.records.len(), ML100K_INTERACTIONS);

        let mut user_counts = vec![0usize; ML100K_USERS];
        let mut item_counts = vec![0usize; ML100K_ITEMS];
        let mut pairs = HashSet::with_capacity(ML100K_INTERACTIONS);
        for r in &log.records {
            user_counts[r.user as usize] += 1;
            item_counts[r.item as usize] += 1;
            assert!(pairs.insert((r.user, r.item)), "duplicate pair {r:?}");
            assert!((1.0..=5.0).contains(&r.rating));
            assert!((EPOCH_START..=EPOCH_END).contains(&r.timestamp));
        }
        assert!(user_counts.iter().all(|&c| (MIN_PER_USER..=MAX_PER_USER).contains(&c)));
        assert!(item_counts.iter().all(|&c| c >= 1));
        // The shape is long-tailed, not flat: the busiest user rates several
        // times the mean, the most popular item far exceeds the mean.
        let max_user = *user_counts.iter().max().unwrap();
        assert!(max_user > 300, "user tail too flat: max {max_user}");
        let max_item = *item_counts.iter().max().unwrap();
        assert!(max_item > 200, "item tail too flat: max {max_item}");
    }

    #[test]
    fn ml100k_is_seeded() {
        let a = ml100k_shaped(7).unwrap();
        let b = ml100k_shaped(7).unwrap();
        assert_eq!(a.records, b.records);
        let c = ml100k_shaped(8).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn ml100k_survives_the_split_intact() {
        let log = ml100k_shaped(42).unwrap();
        let ds = split_leave_one_out(&log, 42).unwrap();
        let stats = ds.compute_stats();
        assert_eq!(stats.users, ML100K_USERS as u64);
        assert_eq!(stats.items, ML100K_ITEMS as u64);
        assert_eq!(stats.interactions, ML100K_INTERACTIONS as u64);
        assert!((stats.sparsity_pct - 93.695_330_635_775_46).abs() < 1e-9);
    }

    #[test]
    fn planted_groups_have_pure_baskets() {
        let planted = planted_groups_log(40, 200, 4, 45, 1).unwrap();
        assert_eq!(planted.log.n_users(), 40);
        assert_eq!(planted.log.n_items(), 200);
        assert_eq!(planted.log.records.len(), 40 * 45);
        assert_eq!(planted.item_groups.len(), 200);

        // Every client's positives live in exactly one group.
        for client in 0..40u32 {
            let groups: HashSet<u32> = planted
                .log
                .records
                .iter()
                .filter(|r| r.user == client)
                .map(|r| planted.item_groups[r.item as usize])
                .collect();
            assert_eq!(groups.len(), 1, "client {client} straddles groups");
        }
    }

    #[test]
    fn planted_groups_cover_every_item_in_training() {
        let planted = planted_groups_log(40, 200, 4, 45, 3).unwrap();
        let ds = split_leave_one_out(&planted.log, 3).unwrap();
        let mut in_train = vec![false; ds.n_items()];
        for u in 0..ds.n_users() as u32 {
            for &i in ds.train_positives(u) {
                in_train[i as usize] = true;
            }
        }
        assert!(in_train.iter().all(|&t| t), "some item only appears as a test positive");
        // 44 train + 1 held-out test per client.
        for u in 0..40u32 {
            assert_eq!(ds.train_positives(u).len(), 44);
        }
    }

    #[test]
    fn planted_groups_validate_inputs() {
        assert!(planted_groups_log(3, 200, 4, 45, 1).is_err()); // fewer clients than groups
        assert!(planted_groups_log(40, 201, 4, 45, 1).is_err()); // uneven split
        assert!(planted_groups_log(40, 200, 4, 51, 1).is_err()); // more than a group holds
        assert!(planted_groups_log(40, 200, 4, 1, 1).is_err()); // too few to split
        assert!(planted_groups_log(4, 200, 4, 5, 1).is_err()); // pre-deal exceeds quota
    }

    #[test]
    fn largest_remainder_is_exact_and_capped() {
        let q = capped_largest_remainder(&[1.0, 1.0, 1.0, 97.0], 200, 10, 100);
        assert_eq!(q.iter().sum::<usize>(), 200);
        assert!(q.iter().all(|&v| (10..=100).contains(&v)));
        assert_eq!(q[3], 100); // heavy bin pinned at cap
        let flat = capped_largest_remainder(&[1.0; 7], 100, 0, 100);
        assert_eq!(flat.iter().sum::<usize>(), 100);
        // 100/7 = 14.28...: everyone gets 14, the first two (tie broken by
        // index) get the two leftovers.
        assert_eq!(flat, vec![15, 15, 14, 14, 14, 14, 14]);
    }
}
