//! Result emission. The summary JSON deliberately contains no timestamps,
//! hostnames, or other environment noise: two runs of the same (dataset,
//! config) must produce byte-identical files, which is what makes result
//! directories diffable experiment records.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use cgfedrec::comms::LedgerCsvRow;
use cgfedrec::dataset::{DatasetStats, InteractionDataset};
use cgfedrec::eval::EvalSummary;
use cgfedrec::federation::{FederationConfig, RoundReport, Simulation};
use cgfedrec::model::EmbeddingTable;
use cgfedrec::structure::ClusterAssignment;
use serde::Serialize;

use crate::runner::{baseline_download_total, AblationRow, GridRow, LdpRow, RunResult};
use crate::spec::ExperimentSpec;

/// The `summary.json` document: metrics, exact byte totals, and the full
/// config so every number is reproducible from the file alone.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    /// System name of the configured broadcast mode (e.g. "CGFedRec").
    pub system: String,
    pub mode: String,
    pub eval_k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub rounds_completed: u32,
    pub early_stopped: bool,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// Bookkeeping bytes (coverage bitmaps) excluded from the payload totals.
    pub framing_bytes: u64,
    /// What downloading full tables to the same participants would have cost.
    pub baseline_download_bytes: u64,
    /// `1 - download_bytes / baseline_download_bytes`.
    pub download_reduction: f64,
    pub final_rec_loss: f64,
    pub final_cg_loss: f64,
    pub dataset: DatasetStats,
    pub config: FederationConfig,
}

impl Summary {
    /// Gathers the summary from a finished simulation and its evaluation.
    pub fn collect(
        spec: &ExperimentSpec,
        stats: &DatasetStats,
        sim: &Simulation,
        eval: &EvalSummary,
        early_stopped: bool,
    ) -> Result<Summary> {
        let cfg = sim.config();
        let ledger = sim.ledger();
        let reports = sim.reports();
        let upload_bytes = ledger.total_upload_bytes();
        let download_bytes = ledger.total_download_bytes();
        let baseline = baseline_download_total(
            reports,
            sim.dataset().n_items(),
            cfg.d,
            cfg.s_f,
        )?;
        let last = reports.last();
        Ok(Summary {
            system: cfg.mode.system_name().to_string(),
            mode: cfg.mode.as_str().to_string(),
            eval_k: spec.eval_k,
            hr: eval.hr,
            ndcg: eval.ndcg,
            rounds_completed: sim.rounds_done(),
            early_stopped,
            upload_bytes,
            download_bytes,
            framing_bytes: ledger.framing_bytes(),
            baseline_download_bytes: baseline,
            download_reduction: if baseline > 0 {
                1.0 - download_bytes as f64 / baseline as f64
            } else {
                0.0
            },
            final_rec_loss: last.map_or(0.0, |r| r.mean_rec_loss),
            final_cg_loss: last.map_or(0.0, |r| r.mean_cg_loss),
            dataset: *stats,
            config: cfg.clone(),
        })
    }

    /// Canonical serialized form (pretty JSON plus trailing newline).
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).context("serializing summary")?;
        s.push('\n');
        Ok(s)
    }
}

/// Writes `summary.json`, `rounds.jsonl`, `ledger.csv`, and `per_user.csv`
/// into `dir` (created if needed).
pub fn write_run_artifacts(
    dir: &Path,
    result: &RunResult,
    ds: &InteractionDataset,
    eval_k: usize,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    fs::write(dir.join("summary.json"), result.summary.to_json()?)
        .context("writing summary.json")?;

    let rounds = File::create(dir.join("rounds.jsonl")).context("creating rounds.jsonl")?;
    cgfedrec::federation::write_reports_jsonl(BufWriter::new(rounds), &result.reports)?;

    let cfg = &result.summary.config;
    let ledger_file = File::create(dir.join("ledger.csv")).context("creating ledger.csv")?;
    let rows = ledger_csv_rows(&result.summary.mode, &result.reports, ds.n_items(), cfg)?;
    cgfedrec::comms::write_ledger_csv(BufWriter::new(ledger_file), rows.iter().cloned())?;

    let per_user = File::create(dir.join("per_user.csv")).context("creating per_user.csv")?;
    let eval = EvalSummary {
        hr: result.summary.hr,
        ndcg: result.summary.ndcg,
        per_user: result.per_user.clone(),
    };
    cgfedrec::eval::write_per_user_csv(BufWriter::new(per_user), &eval, ds, eval_k)?;
    Ok(())
}

/// Per-round ledger rows with the full-table baseline and measured reduction.
pub fn ledger_csv_rows<'a>(
    mode: &'a str,
    reports: &[RoundReport],
    m: usize,
    cfg: &FederationConfig,
) -> Result<Vec<LedgerCsvRow<'a>>> {
    reports
        .iter()
        .map(|r| {
            let baseline = cgfedrec::comms::baseline_download_bytes(
                r.participants.len() as u64,
                m as u64,
                cfg.d as u64,
                cfg.s_f,
            )?;
            Ok(LedgerCsvRow {
                round: r.round,
                mode,
                upload_bytes: r.upload_bytes,
                download_bytes: r.download_bytes,
                baseline_download_bytes: baseline,
                reduction: 1.0 - r.download_bytes as f64 / baseline as f64,
            })
        })
        .collect::<cgfedrec::Result<Vec<_>>>()
        .map_err(Into::into)
}

/// The four-row broadcast-mode comparison table.
pub fn write_ablation_csv<W: Write>(mut w: W, k: usize, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "system,mode,hr@{k},ndcg@{k},upload_bytes,download_bytes")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.system, r.mode, r.hr, r.ndcg, r.upload_bytes, r.download_bytes
        )?;
    }
    Ok(())
}

/// One row per grid cell, reproducible in isolation via its recorded seed.
pub fn write_grid_csv<W: Write>(mut w: W, k: usize, rows: &[GridRow]) -> Result<()> {
    writeln!(
        w,
        "index,seed,lambda,tau,k,hr@{k},ndcg@{k},upload_bytes,download_bytes"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.index, r.seed, r.lambda, r.tau, r.k, r.hr, r.ndcg, r.upload_bytes, r.download_bytes
        )?;
    }
    Ok(())
}

/// Metric-vs-noise table of the privacy sweep.
pub fn write_ldp_csv<W: Write>(mut w: W, k: usize, rows: &[LdpRow]) -> Result<()> {
    writeln!(w, "delta,hr@{k},ndcg@{k}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.delta, r.hr, r.ndcg)?;
    }
    Ok(())
}

/// The final global table as CSV for external visualization: one row per
/// item with its raw id, its cluster when labels exist, and the embedding.
pub fn write_embeddings_csv<W: Write>(
    mut w: W,
    global: &EmbeddingTable,
    labels: Option<&ClusterAssignment>,
    ds: &InteractionDataset,
) -> Result<()> {
    let d = global.dim();
    write!(w, "item_id,cluster")?;
    for j in 0..d {
        write!(w, ",e{j}")?;
    }
    writeln!(w)?;
    for (item, row) in global.rows().enumerate() {
        write!(w, "{}", ds.raw_item_id(item as u32))?;
        match labels {
            Some(l) => write!(w, ",{}", l.labels[item])?,
            None => write!(w, ",")?,
        }
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
