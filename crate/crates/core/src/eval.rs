//! Leave-one-out ranking metrics.
//!
//! Each user's held-out positive is ranked against its fixed negative
//! candidates by the user's own model; HR@K and NDCG@K are macro-averaged
//! over users. Ranking ties break by ascending item index, so metrics are
//! deterministic even for freshly initialized (near-constant) scorers.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::federation::ClientState;
use crate::model::{predict, EmbeddingTable, ScoreHead};

/// One user's scored candidate slate.
#[derive(Clone, Debug)]
pub struct RankedList {
    pub candidate_items: Vec<u32>,
    pub scores: Vec<f64>,
    /// 1-based position of the target: `1 + #{c != target : score_c > score_t
    /// or (score_c = score_t and c < target)}`.
    pub rank_of_target: usize,
}

/// Scores every candidate with the client model and ranks the target under
/// the ascending-item-index tie rule.
pub fn rank_target(
    head: &ScoreHead,
    table: &EmbeddingTable,
    candidates: &[u32],
    target: u32,
) -> Result<RankedList> {
    if !candidates.contains(&target) {
        return Err(Error::InvalidParameter(format!(
            "target item {target} is not among the candidates"
        )));
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&c| predict(head, table, c))
        .collect::<Result<_>>()?;
    let target_score = scores[candidates.iter().position(|&c| c == target).expect("checked")];
    let ahead = candidates
        .iter()
        .zip(&scores)
        .filter(|(&c, &s)| c != target && (s > target_score || (s == target_score && c < target)))
        .count();
    Ok(RankedList {
        candidate_items: candidates.to_vec(),
        scores,
        rank_of_target: 1 + ahead,
    })
}

/// 1 iff the target made the top K.
pub fn hr_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank_k(rank, k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the top K, else 0
/// (the ideal DCG is 1, so no further normalization).
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check_rank_k(rank, k)?;
    Ok(if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    })
}

fn check_rank_k(rank: usize, k: usize) -> Result<()> {
    if rank < 1 || k < 1 {
        return Err(Error::InvalidParameter(format!(
            "rank and K must be >= 1, got rank {rank}, K {k}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct UserEval {
    pub user: u32,
    pub rank: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// Macro-averaged metrics plus the per-user breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub hr: f64,
    pub ndcg: f64,
    pub per_user: Vec<UserEval>,
}

/// Evaluates every client on its own slate. Users run in parallel; results
/// are collected in user order, so the averages are worker-count independent.
pub fn evaluate_all(
    states: &[ClientState],
    ds: &InteractionDataset,
    k: usize,
) -> Result<EvalSummary> {
    let users: Vec<u32> = (0..states.len() as u32).collect();
    evaluate_users(states, ds, k, &users)
}

/// As [`evaluate_all`] but restricted to a user subset (early-stop validation
/// slices). Averages are over the subset.
pub fn evaluate_users(
    states: &[ClientState],
    ds: &InteractionDataset,
    k: usize,
    users: &[u32],
) -> Result<EvalSummary> {
    if states.len() != ds.n_users() {
        return Err(Error::ShapeMismatch(format!(
            "{} client states for {} users",
            states.len(),
            ds.n_users()
        )));
    }
    if users.is_empty() {
        return Err(Error::InvalidParameter("no users to evaluate".into()));
    }
    let per_user: Vec<UserEval> = users
        .par_iter()
        .map(|&user| {
            let state = &states[user as usize];
            let ranked = rank_target(
                &state.head,
                &state.table,
                ds.eval_candidates(user)?,
                ds.test_positive(user),
            )?;
            Ok(UserEval {
                user,
                rank: ranked.rank_of_target,
                hr: hr_at_k(ranked.rank_of_target, k)?,
                ndcg: ndcg_at_k(ranked.rank_of_target, k)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_user.len() as f64;
    Ok(EvalSummary {
        hr: per_user.iter().map(|u| u.hr).sum::<f64>() / n,
        ndcg: per_user.iter().map(|u| u.ndcg).sum::<f64>() / n,
        per_user,
    })
}

/// Per-user CSV (`user_id` is the raw id from the source log).
pub fn write_per_user_csv<W: Write>(
    mut w: W,
    summary: &EvalSummary,
    ds: &InteractionDataset,
    k: usize,
) -> Result<()> {
    writeln!(w, "user_id,rank,hr@{k},ndcg@{k}")?;
    for u in &summary.per_user {
        writeln!(
            w,
            "{},{},{},{}",
            ds.raw_user_id(u.user),
            u.rank,
            u.hr,
            u.ndcg
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScoreHead;

    fn table(rows: &[&[f64]]) -> EmbeddingTable {
        let d = rows[0].len();
        EmbeddingTable::from_rows(rows.len(), d, rows.concat()).unwrap()
    }

    #[test]
    fn rank_unique_maximum_is_first() {
        let head = ScoreHead::from_weights(vec![1.0]).unwrap();
        let t = table(&[&[5.0], &[1.0], &[2.0]]);
        let r = rank_target(&head, &t, &[0, 1, 2], 0).unwrap();
        assert_eq!(r.rank_of_target, 1);
        let r = rank_target(&head, &t, &[0, 1, 2], 1).unwrap();
        assert_eq!(r.rank_of_target, 3);
    }

    #[test]
    fn rank_ties_break_by_item_index() {
        let head = ScoreHead::from_weights(vec![1.0]).unwrap();
        let t = table(&[&[1.0], &[1.0], &[1.0]]);
        // All scores equal: smallest index wins.
        assert_eq!(rank_target(&head, &t, &[0, 1, 2], 0).unwrap().rank_of_target, 1);
        assert_eq!(rank_target(&head, &t, &[0, 1, 2], 1).unwrap().rank_of_target, 2);
        assert_eq!(rank_target(&head, &t, &[2, 0, 1], 2).unwrap().rank_of_target, 3);
    }

    #[test]
    fn rank_counts_strictly_higher_scores() {
        let head = ScoreHead::from_weights(vec![1.0]).unwrap();
        // 100 candidates with raw scores 0.00..0.99 (kept small so the sigmoid
        // stays strictly monotone in f64). The target, item 40, is bumped to
        // 0.595: items 60..100 land strictly above it, items 0..40 below.
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![f64::from(i) * 0.01]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut t = table(&refs);
        t.row_mut(40)[0] = 0.595;
        let candidates: Vec<u32> = (0..100).collect();
        let r = rank_target(&head, &t, &candidates, 40).unwrap();
        assert_eq!(r.rank_of_target, 41);
    }

    #[test]
    fn rank_requires_target_in_candidates() {
        let head = ScoreHead::from_weights(vec![1.0]).unwrap();
        let t = table(&[&[1.0], &[2.0]]);
        assert!(matches!(
            rank_target(&head, &t, &[0], 1),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn hr_boundary_values() {
        assert_eq!(hr_at_k(1, 5).unwrap(), 1.0);
        assert_eq!(hr_at_k(5, 5).unwrap(), 1.0);
        assert_eq!(hr_at_k(6, 5).unwrap(), 0.0);
        assert!(hr_at_k(0, 5).is_err());
        assert!(hr_at_k(1, 0).is_err());
    }

    #[test]
    fn ndcg_known_values() {
        assert_eq!(ndcg_at_k(1, 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(3, 5).unwrap(), 0.5); // 1/log2(4)
        assert_eq!(ndcg_at_k(6, 5).unwrap(), 0.0);
        let r2 = ndcg_at_k(2, 5).unwrap();
        assert!((r2 - 1.0 / 3.0f64.log2()).abs() < 1e-15);
    }
}
