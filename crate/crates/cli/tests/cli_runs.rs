//! End-to-end runner and binary checks: crash recovery through the
//! checkpoint file, the artifact bundle a run leaves behind, and the
//! installed binary's `stats` output.

use std::io::BufWriter;
use std::process::Command;

use cgfedrec::dataset::split_leave_one_out;
use cgfedrec::federation::{FederationConfig, Simulation};
use cgfedrec::synthetic::planted_groups_log;
use cgfedrec_cli::output::write_run_artifacts;
use cgfedrec_cli::runner::{run_single, PreparedData, RunOptions};
use cgfedrec_cli::spec::{DataSource, ExperimentSpec};

fn small_spec(rounds: u32) -> ExperimentSpec {
    ExperimentSpec {
        federation: FederationConfig {
            seed: 3,
            rounds,
            gamma: 1.0,
            d: 8,
            k: 2,
            ..FederationConfig::default()
        },
        data: DataSource::Synthetic { seed: 3 },
        min_interactions: 0,
        eval_k: 5,
        early_stop_patience: 0,
    }
}

fn small_data(seed: u64) -> PreparedData {
    let planted = planted_groups_log(10, 24, 2, 6, seed).unwrap();
    let mut ds = split_leave_one_out(&planted.log, seed).unwrap();
    ds.build_eval_candidates(16, seed).unwrap();
    PreparedData {
        stats: ds.compute_stats(),
        dataset: ds,
    }
}

/// A run killed halfway and restarted from its checkpoint must end exactly
/// where an uninterrupted run ends.
#[test]
fn resume_after_interruption_matches_uninterrupted_run() {
    let spec = small_spec(4);
    let data = small_data(3);
    let fresh = run_single(&data, &spec, &RunOptions::default()).unwrap();

    // Simulate the crash: run half the rounds, checkpoint, drop everything.
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run.ckpt");
    {
        let mut sim = Simulation::new(&data.dataset, spec.federation.clone()).unwrap();
        sim.run_round().unwrap();
        sim.run_round().unwrap();
        let file = std::fs::File::create(&ckpt).unwrap();
        sim.save_checkpoint(BufWriter::new(file)).unwrap();
    }

    let opts = RunOptions {
        checkpoint: Some(&ckpt),
        checkpoint_every: 0,
    };
    let resumed = run_single(&data, &spec, &opts).unwrap();
    assert_eq!(
        fresh.summary.to_json().unwrap(),
        resumed.summary.to_json().unwrap()
    );

    // The finished run rewrote the checkpoint; a further invocation has no
    // rounds left and must reproduce the same summary from it.
    let replay = run_single(&data, &spec, &opts).unwrap();
    assert_eq!(
        fresh.summary.to_json().unwrap(),
        replay.summary.to_json().unwrap()
    );
}

/// A finished run leaves the full artifact bundle, each file well-formed.
#[test]
fn run_artifacts_are_complete() {
    let spec = small_spec(3);
    let data = small_data(7);
    let result = run_single(&data, &spec, &RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_run_artifacts(dir.path(), &result, &data.dataset, spec.eval_k).unwrap();

    let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(parsed["system"], "CGFedRec");
    assert_eq!(parsed["rounds_completed"], 3);
    assert!(parsed["hr"].is_number() && parsed["download_reduction"].is_number());

    let rounds = std::fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
    let lines: Vec<&str> = rounds.lines().collect();
    assert_eq!(lines.len(), 3);
    for line in &lines {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(row["round"].is_number());
    }

    let ledger = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    assert_eq!(ledger.lines().count(), 1 + 3, "header plus one row per round");
    assert!(ledger.starts_with("round,mode,upload_bytes,download_bytes,"));

    let per_user = std::fs::read_to_string(dir.path().join("per_user.csv")).unwrap();
    assert_eq!(per_user.lines().count(), 1 + data.dataset.n_users());
}

/// The compiled binary reports the corpus statistics on stdout as JSON.
#[test]
fn binary_stats_reports_corpus_shape() {
    let out = Command::new(env!("CARGO_BIN_EXE_cgfedrec"))
        .args(["stats", "--synthetic-seed", "42"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["users"], 943);
    assert_eq!(stats["items"], 1682);
    assert_eq!(stats["interactions"], 100_000);
}

/// Top-level and per-subcommand help both render.
#[test]
fn binary_help_renders() {
    for args in [vec!["--help"], vec!["run", "--help"], vec!["ablation", "--help"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_cgfedrec"))
            .args(&args)
            .output()
            .unwrap();
        assert!(out.status.success(), "help failed for {args:?}");
    }
}
