//! Drives simulations end to end: dataset preparation, the round loop with
//! early stopping and checkpointing, and the multi-run suites (grid,
//! ablation, privacy sweep). Every function here is deterministic in the
//! spec it receives.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use cgfedrec::comms::{baseline_download_bytes, CommLedger};
use cgfedrec::dataset::{
    filter_min_interactions, ingest, split_leave_one_out, DatasetStats, InteractionDataset,
};
use cgfedrec::eval::{evaluate_all, evaluate_users, UserEval};
use cgfedrec::federation::{BroadcastMode, RoundReport, Simulation};
use cgfedrec::model::EmbeddingTable;
use cgfedrec::rng::{derive_rng, derive_seed, purpose};
use cgfedrec::structure::ClusterAssignment;
use cgfedrec::synthetic::ml100k_shaped;

use crate::output::Summary;
use crate::spec::{DataSource, ExperimentSpec};

/// A corpus ready to train on: split, with evaluation slates built.
pub struct PreparedData {
    pub dataset: InteractionDataset,
    pub stats: DatasetStats,
}

/// Loads or generates the log, applies the minimum-interaction filter, splits
/// leave-one-out, and (unless only statistics are wanted) samples the
/// per-user evaluation slates.
pub fn prepare_data(spec: &ExperimentSpec, build_eval: bool) -> Result<PreparedData> {
    let log = match &spec.data {
        DataSource::Synthetic { seed } => ml100k_shaped(*seed)?,
        DataSource::File { path, format } => ingest(path, *format)
            .with_context(|| format!("ingesting {}", path.display()))?,
    };
    let log = if spec.min_interactions > 0 {
        filter_min_interactions(&log, spec.min_interactions)?
    } else {
        log
    };
    let mut dataset = split_leave_one_out(&log, spec.federation.seed)?;
    if build_eval {
        dataset.build_eval_candidates(spec.federation.eval_negatives, spec.federation.seed)?;
    }
    let stats = dataset.compute_stats();
    Ok(PreparedData { dataset, stats })
}

/// The seeded ~10% user slice that early stopping watches (ascending ids).
pub fn validation_slice(n_users: usize, seed: u64) -> Vec<u32> {
    let count = n_users.div_ceil(10).clamp(1, n_users);
    let mut rng = derive_rng(seed, &[purpose::VALIDATION]);
    let mut users: Vec<u32> = rand::seq::index::sample(&mut rng, n_users, count)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    users.sort_unstable();
    users
}

/// Per-run behavior that is not science: checkpoint plumbing.
#[derive(Clone, Debug, Default)]
pub struct RunOptions<'p> {
    /// Resume from this file when it exists; keep it updated while running.
    pub checkpoint: Option<&'p Path>,
    /// Also save every N completed rounds (0: only after the final round).
    pub checkpoint_every: u32,
}

/// Everything a finished run produces.
pub struct RunResult {
    pub summary: Summary,
    pub reports: Vec<RoundReport>,
    pub per_user: Vec<UserEval>,
    pub ledger: CommLedger,
    pub global: EmbeddingTable,
    /// Clustering of the final global table (labels-bearing modes only).
    pub labels: Option<ClusterAssignment>,
}

/// One full run: round loop, early stopping on validation HR@K, final
/// evaluation over all users.
pub fn run_single(
    data: &PreparedData,
    spec: &ExperimentSpec,
    opts: &RunOptions,
) -> Result<RunResult> {
    let ds = &data.dataset;
    let cfg = spec.federation.clone();
    let mut sim = match opts.checkpoint {
        Some(path) if path.exists() => {
            let file = File::open(path)
                .with_context(|| format!("opening checkpoint {}", path.display()))?;
            Simulation::resume_from_checkpoint(ds, cfg, BufReader::new(file))
                .with_context(|| format!("resuming from {}", path.display()))?
        }
        _ => Simulation::new(ds, cfg)?,
    };

    let val_users = validation_slice(ds.n_users(), spec.federation.seed);
    let mut best_hr = f64::NEG_INFINITY;
    let mut best_round = sim.rounds_done();
    let mut early_stopped = false;
    while !sim.is_complete() {
        sim.run_round()?;
        if let Some(path) = opts.checkpoint {
            if opts.checkpoint_every > 0 && sim.rounds_done() % opts.checkpoint_every == 0 {
                save_checkpoint(&sim, path)?;
            }
        }
        if spec.early_stop_patience > 0 {
            let val = evaluate_users(sim.clients(), ds, spec.eval_k, &val_users)?;
            if val.hr > best_hr {
                best_hr = val.hr;
                best_round = sim.rounds_done();
            } else if sim.rounds_done() - best_round >= spec.early_stop_patience {
                early_stopped = true;
                break;
            }
        }
    }
    if let Some(path) = opts.checkpoint {
        save_checkpoint(&sim, path)?;
    }

    let eval = evaluate_all(sim.clients(), ds, spec.eval_k)?;
    let summary = Summary::collect(spec, &data.stats, &sim, &eval, early_stopped)?;
    let labels = sim.current_labels().cloned();
    let outcome = sim.into_outcome();
    Ok(RunResult {
        summary,
        reports: outcome.reports,
        per_user: eval.per_user,
        ledger: outcome.ledger,
        global: outcome.global,
        labels,
    })
}

/// Writes the checkpoint next to its final name, then renames, so a crash
/// mid-write never corrupts an existing checkpoint.
fn save_checkpoint(sim: &Simulation, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file =
        File::create(&tmp).with_context(|| format!("creating checkpoint {}", tmp.display()))?;
    let mut w = BufWriter::new(file);
    sim.save_checkpoint(&mut w)?;
    drop(w);
    fs::rename(&tmp, path)
        .with_context(|| format!("moving checkpoint into place at {}", path.display()))?;
    Ok(())
}

/// One row of the broadcast-mode comparison table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub system: &'static str,
    pub mode: &'static str,
    pub hr: f64,
    pub ndcg: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

/// Runs all four broadcast modes with the shared seed and returns the
/// comparison rows in protocol-first order.
pub fn run_ablation(data: &PreparedData, spec: &ExperimentSpec) -> Result<Vec<AblationRow>> {
    let modes = [
        BroadcastMode::LabelsOnly,
        BroadcastMode::EmbeddingsOnly,
        BroadcastMode::EmbeddingsAndLabels,
        BroadcastMode::EmbeddingsAndRandomLabels,
    ];
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut arm = spec.clone();
        arm.federation.mode = mode;
        let result = run_single(data, &arm, &RunOptions::default())
            .with_context(|| format!("ablation arm {}", mode.system_name()))?;
        rows.push(AblationRow {
            system: mode.system_name(),
            mode: mode.as_str(),
            hr: result.summary.hr,
            ndcg: result.summary.ndcg,
            upload_bytes: result.summary.upload_bytes,
            download_bytes: result.summary.download_bytes,
        });
    }
    Ok(rows)
}

/// Grid axes; an empty list pins that axis to the experiment's value.
#[derive(Clone, Debug, Default)]
pub struct GridLists {
    pub lambda: Vec<f64>,
    pub tau: Vec<f64>,
    pub k: Vec<usize>,
}

/// One evaluated grid cell.
#[derive(Clone, Debug)]
pub struct GridRow {
    pub index: usize,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

/// Cartesian product over the provided axes. Each cell runs with its own
/// seed derived from (base seed, cell index), so any cell is reproducible in
/// isolation from its recorded seed.
pub fn run_grid(
    data: &PreparedData,
    spec: &ExperimentSpec,
    lists: &GridLists,
) -> Result<Vec<GridRow>> {
    if lists.lambda.is_empty() && lists.tau.is_empty() && lists.k.is_empty() {
        bail!("grid mode needs at least one non-empty axis (lambda, tau, or k)");
    }
    let lambdas = non_empty(&lists.lambda, spec.federation.lambda);
    let taus = non_empty(&lists.tau, spec.federation.tau);
    let ks = non_empty(&lists.k, spec.federation.k);

    let mut rows = Vec::with_capacity(lambdas.len() * taus.len() * ks.len());
    let mut index = 0usize;
    for &lambda in &lambdas {
        for &tau in &taus {
            for &k in &ks {
                let seed = derive_seed(spec.federation.seed, &[purpose::GRID, index as u64]);
                let mut cell = spec.clone();
                cell.federation.lambda = lambda;
                cell.federation.tau = tau;
                cell.federation.k = k;
                cell.federation.seed = seed;
                let result = run_single(data, &cell, &RunOptions::default())
                    .with_context(|| format!("grid cell {index} (λ={lambda}, τ={tau}, k={k})"))?;
                rows.push(GridRow {
                    index,
                    seed,
                    lambda,
                    tau,
                    k,
                    hr: result.summary.hr,
                    ndcg: result.summary.ndcg,
                    upload_bytes: result.summary.upload_bytes,
                    download_bytes: result.summary.download_bytes,
                });
                index += 1;
            }
        }
    }
    Ok(rows)
}

fn non_empty<T: Copy>(list: &[T], fallback: T) -> Vec<T> {
    if list.is_empty() {
        vec![fallback]
    } else {
        list.to_vec()
    }
}

/// One evaluated noise level.
#[derive(Clone, Debug)]
pub struct LdpRow {
    pub delta: f64,
    pub hr: f64,
    pub ndcg: f64,
}

/// The canonical privacy sweep levels.
pub const LDP_SWEEP_DELTAS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Reruns the experiment at each noise scale, everything else shared.
pub fn run_ldp_sweep(
    data: &PreparedData,
    spec: &ExperimentSpec,
    deltas: &[f64],
) -> Result<Vec<LdpRow>> {
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut arm = spec.clone();
        arm.federation.ldp_delta = delta;
        let result = run_single(data, &arm, &RunOptions::default())
            .with_context(|| format!("ldp sweep at δ={delta}"))?;
        rows.push(LdpRow {
            delta,
            hr: result.summary.hr,
            ndcg: result.summary.ndcg,
        });
    }
    Ok(rows)
}

/// Sum over rounds of what broadcasting full tables to the same participants
/// would have cost.
pub fn baseline_download_total(
    reports: &[RoundReport],
    m: usize,
    d: usize,
    s_f: u64,
) -> Result<u64> {
    let mut total: u64 = 0;
    for r in reports {
        let b = baseline_download_bytes(r.participants.len() as u64, m as u64, d as u64, s_f)?;
        total = total
            .checked_add(b)
            .ok_or_else(|| anyhow::anyhow!("baseline byte total overflows u64"))?;
    }
    Ok(total)
}
