//! Interaction-log ingestion and the leave-one-out split.
//!
//! Raw logs are `user <sep> item <sep> rating [<sep> timestamp]` lines with
//! arbitrary integer ids. Ingestion re-indexes both id spaces densely in
//! order of first appearance; everything downstream works on dense ids.
//! Ratings are binarized (`rating > 0` is a positive), duplicate
//! (user, item) pairs collapse to the record with the largest timestamp, and
//! each user's latest positive is held out as their test item.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, fnv1a64, purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    TabSeparated,
    CommaSeparated,
}

impl LogFormat {
    fn separator(self) -> char {
        match self {
            LogFormat::TabSeparated => '\t',
            LogFormat::CommaSeparated => ',',
        }
    }
}

/// One log record with dense ids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawRecord {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub timestamp: i64,
}

/// Densely re-indexed interaction log. `raw_users[dense]` recovers the
/// original id of a dense user id, likewise `raw_items`.
#[derive(Clone, Debug)]
pub struct InteractionLog {
    pub records: Vec<RawRecord>,
    pub raw_users: Vec<u64>,
    pub raw_items: Vec<u64>,
}

impl InteractionLog {
    pub fn n_users(&self) -> usize {
        self.raw_users.len()
    }

    pub fn n_items(&self) -> usize {
        self.raw_items.len()
    }
}

pub fn ingest(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    ingest_reader(BufReader::new(File::open(path)?), format)
}

/// Parses a log from any reader. Empty lines are skipped; malformed lines
/// error out with their 1-based line number.
pub fn ingest_reader<R: BufRead>(reader: R, format: LogFormat) -> Result<InteractionLog> {
    let sep = format.separator();
    let mut records = Vec::new();
    let mut users = Reindexer::new();
    let mut items = Reindexer::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 or 4 fields, got {}", fields.len()),
            });
        }
        let user_raw = parse_id(fields[0], "user", lineno)?;
        let item_raw = parse_id(fields[1], "item", lineno)?;
        let rating: f64 = fields[2].trim().parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad rating {:?}: {e}", fields[2]),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-finite rating {rating}"),
            });
        }
        let timestamp: i64 = match fields.get(3) {
            Some(tok) => tok.trim().parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad timestamp {tok:?}: {e}"),
            })?,
            None => 0,
        };
        records.push(RawRecord {
            user: users.dense_id(user_raw)?,
            item: items.dense_id(item_raw)?,
            rating,
            timestamp,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(InteractionLog {
        records,
        raw_users: users.raw,
        raw_items: items.raw,
    })
}

/// Drops every user with `min_count` or fewer records, then re-densifies both
/// id spaces over the surviving records (first-appearance order again).
pub fn filter_min_interactions(log: &InteractionLog, min_count: usize) -> Result<InteractionLog> {
    let mut counts = vec![0usize; log.n_users()];
    for r in &log.records {
        counts[r.user as usize] += 1;
    }
    let mut users = Reindexer::new();
    let mut items = Reindexer::new();
    let mut records = Vec::new();
    for r in &log.records {
        if counts[r.user as usize] > min_count {
            records.push(RawRecord {
                user: users.dense_id(log.raw_users[r.user as usize])?,
                item: items.dense_id(log.raw_items[r.item as usize])?,
                ..*r
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(InteractionLog {
        records,
        raw_users: users.raw,
        raw_items: items.raw,
    })
}

/// Split interaction data ready for federated training: per-user train
/// positives and one held-out test positive each.
#[derive(Clone, Debug)]
pub struct InteractionDataset {
    n_items: usize,
    raw_users: Vec<u64>,
    raw_items: Vec<u64>,
    /// Per user, sorted dense item ids of the training positives.
    train: Vec<Vec<u32>>,
    /// Per user, the held-out positive.
    test: Vec<u32>,
    /// Per user, sorted union of train and test items.
    interacted: Vec<Vec<u32>>,
    /// Per user, `[test, negative...]`; built by `build_eval_candidates`.
    eval_candidates: Option<Vec<Vec<u32>>>,
}

/// Holds out each user's most recent positive (largest timestamp; ties broken
/// by a per-user seeded draw). Duplicate (user, item) pairs collapse to their
/// max-timestamp record first; only `rating > 0` records count as positives.
pub fn split_leave_one_out(log: &InteractionLog, seed: u64) -> Result<InteractionDataset> {
    let n_users = log.n_users();
    let n_items = log.n_items();
    // item -> max timestamp among that user's positive records
    let mut positives: Vec<HashMap<u32, i64>> = vec![HashMap::new(); n_users];
    for r in &log.records {
        if r.rating > 0.0 {
            positives[r.user as usize]
                .entry(r.item)
                .and_modify(|ts| *ts = (*ts).max(r.timestamp))
                .or_insert(r.timestamp);
        }
    }
    let mut train = Vec::with_capacity(n_users);
    let mut test = Vec::with_capacity(n_users);
    let mut interacted = Vec::with_capacity(n_users);
    for (user, items) in positives.into_iter().enumerate() {
        if items.len() < 2 {
            return Err(Error::Split {
                user: user as u32,
                count: items.len(),
            });
        }
        let max_ts = items.values().copied().max().expect("non-empty");
        // Canonical candidate order before the seeded draw: sorted item id.
        let mut tied: Vec<u32> = items
            .iter()
            .filter(|(_, &ts)| ts == max_ts)
            .map(|(&item, _)| item)
            .collect();
        tied.sort_unstable();
        let pick = if tied.len() == 1 {
            tied[0]
        } else {
            let mut rng = derive_rng(seed, &[purpose::SPLIT, user as u64]);
            tied[rng.gen_range(0..tied.len())]
        };
        let mut all: Vec<u32> = items.keys().copied().collect();
        all.sort_unstable();
        train.push(all.iter().copied().filter(|&i| i != pick).collect());
        test.push(pick);
        interacted.push(all);
    }
    Ok(InteractionDataset {
        n_items,
        raw_users: log.raw_users.clone(),
        raw_items: log.raw_items.clone(),
        train,
        test,
        interacted,
        eval_candidates: None,
    })
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.train.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn raw_user_id(&self, user: u32) -> u64 {
        self.raw_users[user as usize]
    }

    pub fn raw_item_id(&self, item: u32) -> u64 {
        self.raw_items[item as usize]
    }

    pub fn train_positives(&self, user: u32) -> &[u32] {
        &self.train[user as usize]
    }

    pub fn test_positive(&self, user: u32) -> u32 {
        self.test[user as usize]
    }

    pub fn interacted(&self, user: u32) -> &[u32] {
        &self.interacted[user as usize]
    }

    /// Training negatives for one round: `ratio` per train positive, sampled
    /// uniformly **with replacement** from the items the user never touched
    /// (train and test both excluded). Deterministic in (seed, user).
    pub fn sample_train_negatives(&self, user: u32, ratio: usize, seed: u64) -> Result<Vec<u32>> {
        let interacted = self.interacted(user);
        let count = ratio * self.train_positives(user).len();
        let pool = self.n_items - interacted.len();
        if count > 0 && pool == 0 {
            return Err(Error::Sampling(format!(
                "user {user} interacted with all {} items",
                self.n_items
            )));
        }
        let mut rng = derive_rng(seed, &[purpose::NEG, u64::from(user)]);
        let mut negatives = Vec::with_capacity(count);
        while negatives.len() < count {
            let cand = rng.gen_range(0..self.n_items as u32);
            if interacted.binary_search(&cand).is_err() {
                negatives.push(cand);
            }
        }
        Ok(negatives)
    }

    /// Fixes each user's ranking slate: the held-out positive plus
    /// `n_negatives` **distinct** never-interacted items. Must be called once
    /// before evaluation; candidates are deterministic in (seed, user).
    pub fn build_eval_candidates(&mut self, n_negatives: usize, seed: u64) -> Result<()> {
        let mut all = Vec::with_capacity(self.n_users());
        for user in 0..self.n_users() as u32 {
            let interacted = self.interacted(user);
            let pool = self.n_items - interacted.len();
            if pool < n_negatives {
                return Err(Error::Sampling(format!(
                    "user {user} has only {pool} never-interacted items, need {n_negatives}"
                )));
            }
            let mut rng = derive_rng(seed, &[purpose::EVAL, u64::from(user)]);
            let mut candidates = Vec::with_capacity(n_negatives + 1);
            candidates.push(self.test_positive(user));
            let mut seen = std::collections::HashSet::with_capacity(n_negatives);
            while candidates.len() < n_negatives + 1 {
                let cand = rng.gen_range(0..self.n_items as u32);
                if interacted.binary_search(&cand).is_err() && seen.insert(cand) {
                    candidates.push(cand);
                }
            }
            all.push(candidates);
        }
        self.eval_candidates = Some(all);
        Ok(())
    }

    /// The user's ranking slate (`[test, negatives...]`). Errors if
    /// `build_eval_candidates` has not run.
    pub fn eval_candidates(&self, user: u32) -> Result<&[u32]> {
        self.eval_candidates
            .as_ref()
            .map(|all| all[user as usize].as_slice())
            .ok_or_else(|| Error::Config("eval candidates not built".into()))
    }

    pub fn has_eval_candidates(&self) -> bool {
        self.eval_candidates.is_some()
    }

    pub fn compute_stats(&self) -> DatasetStats {
        let users = self.n_users() as u64;
        let items = self.n_items as u64;
        // Every deduped positive counts: train rows plus one held-out per user.
        let interactions: u64 = self.train.iter().map(|t| t.len() as u64).sum::<u64>() + users;
        let density = interactions as f64 / (users as f64 * items as f64);
        DatasetStats {
            users,
            items,
            interactions,
            sparsity_pct: (1.0 - density) * 100.0,
        }
    }

    /// Stable content hash over the split (used to refuse resuming a
    /// checkpoint against different data).
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend((self.n_users() as u64).to_le_bytes());
        bytes.extend((self.n_items as u64).to_le_bytes());
        for (train, &test) in self.train.iter().zip(&self.test) {
            bytes.extend((train.len() as u64).to_le_bytes());
            for &item in train {
                bytes.extend(item.to_le_bytes());
            }
            bytes.extend(test.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

/// Corpus-level summary; `sparsity_pct` is
/// `100 * (1 - interactions / (users * items))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub users: u64,
    pub items: u64,
    pub interactions: u64,
    pub sparsity_pct: f64,
}

struct Reindexer {
    map: HashMap<u64, u32>,
    raw: Vec<u64>,
}

impl Reindexer {
    fn new() -> Self {
        Self {
            map: HashMap::new(),
            raw: Vec::new(),
        }
    }

    fn dense_id(&mut self, raw: u64) -> Result<u32> {
        if let Some(&id) = self.map.get(&raw) {
            return Ok(id);
        }
        let id = u32::try_from(self.raw.len())
            .map_err(|_| Error::InvalidParameter("more than u32::MAX distinct ids".into()))?;
        self.map.insert(raw, id);
        self.raw.push(raw);
        Ok(id)
    }
}

fn parse_id(tok: &str, what: &str, lineno: usize) -> Result<u64> {
    tok.trim().parse().map_err(|e| Error::Parse {
        line: lineno,
        msg: format!("bad {what} id {tok:?}: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(lines: &[&str]) -> String {
        lines.join("\n")
    }

    fn ingest_str(s: &str, format: LogFormat) -> Result<InteractionLog> {
        ingest_reader(s.as_bytes(), format)
    }

    #[test]
    fn ingest_reindexes_by_first_appearance() {
        let log = ingest_str(
            &tsv(&["50\t7\t5\t100", "10\t7\t3\t200", "50\t9\t1\t300"]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        assert_eq!(log.raw_users, vec![50, 10]);
        assert_eq!(log.raw_items, vec![7, 9]);
        assert_eq!(log.records[0].user, 0);
        assert_eq!(log.records[1].user, 1);
        assert_eq!(log.records[2].item, 1);
        assert_eq!(log.records[1].timestamp, 200);
    }

    #[test]
    fn ingest_accepts_csv_and_missing_timestamp() {
        let log = ingest_str("1,2,4.5\n1,3,0.0\n", LogFormat::CommaSeparated).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.records[0].rating, 4.5);
        assert_eq!(log.records[0].timestamp, 0);
    }

    #[test]
    fn ingest_skips_blank_lines_and_reports_line_numbers() {
        let err = ingest_str("1\t2\t3\n\n1\tx\t3\n", LogFormat::TabSeparated).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_empty_log_errors() {
        assert!(matches!(
            ingest_str("\n\n", LogFormat::TabSeparated),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn ingest_rejects_wrong_field_count() {
        let err = ingest_str("1\t2\n", LogFormat::TabSeparated).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn filter_is_strictly_greater_and_redensifies() {
        // user 50 has 3 records, user 10 has 2.
        let log = ingest_str(
            &tsv(&[
                "50\t7\t5\t1",
                "10\t7\t3\t2",
                "50\t9\t1\t3",
                "10\t9\t2\t4",
                "50\t11\t4\t5",
            ]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        let kept = filter_min_interactions(&log, 2).unwrap();
        assert_eq!(kept.raw_users, vec![50]);
        assert_eq!(kept.raw_items, vec![7, 9, 11]);
        assert_eq!(kept.records.len(), 3);
        assert!(kept.records.iter().all(|r| r.user == 0));
        // min_count equal to a user's record count drops that user.
        let none = filter_min_interactions(&log, 3);
        assert!(matches!(none, Err(Error::EmptyDataset)));
    }

    #[test]
    fn split_holds_out_latest_positive() {
        let log = ingest_str(
            &tsv(&["1\t10\t5\t100", "1\t20\t5\t300", "1\t30\t5\t200"]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        let ds = split_leave_one_out(&log, 7).unwrap();
        assert_eq!(ds.test_positive(0), 1); // dense id of raw item 20
        assert_eq!(ds.train_positives(0), &[0, 2]);
        assert_eq!(ds.interacted(0), &[0, 1, 2]);
    }

    #[test]
    fn split_ignores_non_positive_ratings() {
        let log = ingest_str(
            &tsv(&["1\t10\t5\t100", "1\t20\t0\t900", "1\t30\t2\t200"]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        let ds = split_leave_one_out(&log, 7).unwrap();
        // Item 20 (rating 0) is not a positive, so item 30 is the latest.
        assert_eq!(ds.test_positive(0), 2);
        assert_eq!(ds.train_positives(0), &[0]);
    }

    #[test]
    fn split_dedupes_to_max_timestamp() {
        // (1, 10) appears twice; its max ts (500) beats item 20's 300.
        let log = ingest_str(
            &tsv(&["1\t10\t5\t100", "1\t20\t5\t300", "1\t10\t4\t500"]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        let ds = split_leave_one_out(&log, 7).unwrap();
        assert_eq!(ds.test_positive(0), 0);
    }

    #[test]
    fn split_breaks_timestamp_ties_deterministically() {
        let log = ingest_str(
            &tsv(&["1\t10\t5\t100", "1\t20\t5\t100", "1\t30\t5\t100"]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        let a = split_leave_one_out(&log, 7).unwrap();
        let b = split_leave_one_out(&log, 7).unwrap();
        assert_eq!(a.test_positive(0), b.test_positive(0));
        assert!(a.test_positive(0) <= 2);
    }

    #[test]
    fn split_errors_on_single_positive_user() {
        let log = ingest_str(
            &tsv(&["1\t10\t5\t100", "2\t10\t5\t100", "2\t20\t5\t200"]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        let err = split_leave_one_out(&log, 7).unwrap_err();
        assert!(matches!(err, Error::Split { user: 0, count: 1 }));
    }

    fn small_dataset() -> InteractionDataset {
        // 2 users, 6 items; user 0 interacted with {0,1,2}, user 1 with {3,4}.
        let log = ingest_str(
            &tsv(&[
                "1\t10\t5\t1",
                "1\t11\t5\t2",
                "1\t12\t5\t3",
                "2\t13\t5\t1",
                "2\t14\t5\t2",
                "2\t15\t0\t9", // brings item 5 into the catalog, not a positive
                "1\t15\t0\t9",
            ]),
            LogFormat::TabSeparated,
        )
        .unwrap();
        split_leave_one_out(&log, 3).unwrap()
    }

    #[test]
    fn train_negatives_avoid_interacted_and_allow_repeats() {
        let ds = small_dataset();
        let negs = ds.sample_train_negatives(0, 10, 99).unwrap();
        assert_eq!(negs.len(), 10 * ds.train_positives(0).len());
        for &n in &negs {
            assert!(ds.interacted(0).binary_search(&n).is_err());
        }
        // Pool for user 0 is {3, 4, 5}: 20 draws from 3 items must repeat.
        let mut sorted = negs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert!(sorted.len() < negs.len());
        assert_eq!(negs, ds.sample_train_negatives(0, 10, 99).unwrap());
        assert_ne!(negs, ds.sample_train_negatives(0, 10, 100).unwrap());
    }

    #[test]
    fn eval_candidates_are_distinct_and_exclude_interacted() {
        let mut ds = small_dataset();
        assert!(ds.eval_candidates(0).is_err());
        ds.build_eval_candidates(3, 5).unwrap();
        let c = ds.eval_candidates(0).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[0], ds.test_positive(0));
        let mut negs: Vec<u32> = c[1..].to_vec();
        negs.sort_unstable();
        negs.dedup();
        assert_eq!(negs.len(), 3);
        for &n in &negs {
            assert!(ds.interacted(0).binary_search(&n).is_err());
        }
    }

    #[test]
    fn eval_candidates_error_when_pool_too_small() {
        let mut ds = small_dataset();
        // User 0 has only 3 never-interacted items.
        assert!(matches!(
            ds.build_eval_candidates(4, 5),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn stats_count_train_plus_heldout() {
        let ds = small_dataset();
        let stats = ds.compute_stats();
        assert_eq!(stats.users, 2);
        assert_eq!(stats.items, 6);
        // user 0 has 3 positives, user 1 has 2 -> 5 total.
        assert_eq!(stats.interactions, 5);
        let expected = (1.0 - 5.0 / 12.0) * 100.0;
        assert!((stats.sparsity_pct - expected).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let ds = small_dataset();
        let other = {
            let log = ingest_str(
                &tsv(&["1\t10\t5\t1", "1\t11\t5\t2", "1\t12\t5\t3"]),
                LogFormat::TabSeparated,
            )
            .unwrap();
            split_leave_one_out(&log, 3).unwrap()
        };
        assert_eq!(ds.fingerprint(), ds.clone().fingerprint());
        assert_ne!(ds.fingerprint(), other.fingerprint());
    }
}
