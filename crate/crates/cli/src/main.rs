//! `cgfedrec` — experiment runner for the CGFedRec federated recommendation
//! simulator. Thin argument layer; all behavior lives in the library so tests
//! can drive the same code in-process.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use cgfedrec::federation::FederationConfig;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use cgfedrec_cli::output::{
    write_ablation_csv, write_embeddings_csv, write_grid_csv, write_ldp_csv, write_run_artifacts,
};
use cgfedrec_cli::runner::{
    prepare_data, run_ablation, run_grid, run_ldp_sweep, run_single, GridLists, RunOptions,
    LDP_SWEEP_DELTAS,
};
use cgfedrec_cli::spec::{load_config, parse_override, resolve_format, DataSource, ExperimentSpec};

#[derive(Parser)]
#[command(name = "cgfedrec", version, about = "CGFedRec federated recommendation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report dataset statistics (users, items, interactions, sparsity).
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the JSON report to this file.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// One federated run; writes summary.json, rounds.jsonl, ledger.csv,
    /// per_user.csv into the output directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Output directory.
        #[arg(short, long, default_value = "results")]
        out: PathBuf,
        /// Resume from this checkpoint if it exists; keep it updated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Additionally checkpoint every N rounds (0: only after the last).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u32,
    },
    /// Hyper-parameter grid over lambda, tau, and k; one CSV row per cell.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(short, long, default_value = "results")]
        out: PathBuf,
        /// Lambda axis, e.g. 0.005,0.01,0.05,0.1,0.5
        #[arg(long, value_delimiter = ',')]
        grid_lambda: Vec<f64>,
        /// Tau axis, e.g. 0.005,0.01,0.05,0.1,0.5
        #[arg(long, value_delimiter = ',')]
        grid_tau: Vec<f64>,
        /// Cluster-count axis, e.g. 5,10,20,50,100
        #[arg(long, value_delimiter = ',')]
        grid_k: Vec<usize>,
    },
    /// Run all four broadcast modes with a shared seed and emit the
    /// comparison table.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(short, long, default_value = "results")]
        out: PathBuf,
    },
    /// Metric-vs-noise sweep over upload perturbation scales.
    LdpSweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(short, long, default_value = "results")]
        out: PathBuf,
        /// Noise scales to sweep (default 0,0.1,0.2,0.3,0.4,0.5).
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Run (or resume) and export the final global embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(short, long, default_value = "results")]
        out: PathBuf,
        /// Resume from this checkpoint if it exists; keep it updated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Science configuration: a JSON file plus overrides. Dedicated flags exist
/// for the commonly swept knobs; every other `FederationConfig` key is
/// reachable through `--set key=value`. Flags beat `--set`, which beats the
/// file.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file with FederationConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    /// Participation rate in (0, 1].
    #[arg(long)]
    gamma: Option<f64>,
    /// labels_only | embeddings_only | embeddings_and_labels |
    /// embeddings_and_random_labels
    #[arg(long)]
    mode: Option<String>,
    /// Weight of the contrastive term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Cluster count.
    #[arg(long)]
    k: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Score-head learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Embedding learning rate.
    #[arg(long)]
    eta_prime: Option<f64>,
    /// Upload noise scale (0 disables).
    #[arg(long)]
    ldp_delta: Option<f64>,
    /// laplace | gaussian
    #[arg(long)]
    ldp_mechanism: Option<String>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    neg_ratio: Option<usize>,
    /// Generic override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<FederationConfig> {
        let mut overrides: Vec<(String, Value)> = Vec::new();
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        let mut flag = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                overrides.push((key.to_string(), v));
            }
        };
        flag("seed", self.seed.map(|v| json!(v)));
        flag("rounds", self.rounds.map(|v| json!(v)));
        flag("gamma", self.gamma.map(|v| json!(v)));
        flag("mode", self.mode.clone().map(Value::String));
        flag("lambda", self.lambda.map(|v| json!(v)));
        flag("tau", self.tau.map(|v| json!(v)));
        flag("k", self.k.map(|v| json!(v)));
        flag("d", self.d.map(|v| json!(v)));
        flag("eta", self.eta.map(|v| json!(v)));
        flag("eta_prime", self.eta_prime.map(|v| json!(v)));
        flag("ldp_delta", self.ldp_delta.map(|v| json!(v)));
        flag("ldp_mechanism", self.ldp_mechanism.clone().map(Value::String));
        flag("local_epochs", self.local_epochs.map(|v| json!(v)));
        flag("batch_size", self.batch_size.map(|v| json!(v)));
        flag("neg_ratio", self.neg_ratio.map(|v| json!(v)));
        load_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Interaction log (`user <sep> item <sep> rating [<sep> timestamp]`).
    /// Omitted: the built-in synthetic corpus with MovieLens-100K marginals.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Log field separator: tab | comma (default: csv extension means comma).
    #[arg(long)]
    format: Option<String>,
    /// Seed of the synthetic corpus when --data is omitted.
    #[arg(long, default_value_t = 42)]
    synthetic_seed: u64,
    /// Drop users with at most this many interactions (0 keeps everyone).
    #[arg(long, default_value_t = 5)]
    min_interactions: usize,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        Ok(match &self.data {
            Some(path) => DataSource::File {
                format: resolve_format(self.format.as_deref(), path)?,
                path: path.clone(),
            },
            None => DataSource::Synthetic {
                seed: self.synthetic_seed,
            },
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Cutoff K of HR@K and NDCG@K.
    #[arg(long, default_value_t = 5)]
    eval_k: usize,
    /// Early-stop patience in rounds on validation HR@K (0 disables).
    #[arg(long, default_value_t = 20)]
    patience: u32,
}

fn build_spec(config: &ConfigArgs, data: &DataArgs, eval: &EvalArgs) -> Result<ExperimentSpec> {
    Ok(ExperimentSpec {
        federation: config.resolve()?,
        data: data.source()?,
        min_interactions: data.min_interactions,
        eval_k: eval.eval_k,
        early_stop_patience: eval.patience,
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Stats { data, out } => {
            let spec = ExperimentSpec {
                federation: FederationConfig::default(),
                data: data.source()?,
                min_interactions: data.min_interactions,
                eval_k: 5,
                early_stop_patience: 0,
            };
            let prepared = prepare_data(&spec, false)?;
            let mut report = serde_json::to_string_pretty(&prepared.stats)?;
            report.push('\n');
            print!("{report}");
            if let Some(path) = out {
                fs::write(&path, report).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Run {
            config,
            data,
            eval,
            out,
            checkpoint,
            checkpoint_every,
        } => {
            let spec = build_spec(&config, &data, &eval)?;
            let prepared = prepare_data(&spec, true)?;
            let result = run_single(
                &prepared,
                &spec,
                &RunOptions {
                    checkpoint: checkpoint.as_deref(),
                    checkpoint_every,
                },
            )?;
            write_run_artifacts(&out, &result, &prepared.dataset, spec.eval_k)?;
            println!(
                "{} ({} rounds{}): hr@{} = {}, ndcg@{} = {}, upload = {} B, download = {} B",
                result.summary.system,
                result.summary.rounds_completed,
                if result.summary.early_stopped {
                    ", early-stopped"
                } else {
                    ""
                },
                spec.eval_k,
                result.summary.hr,
                spec.eval_k,
                result.summary.ndcg,
                result.summary.upload_bytes,
                result.summary.download_bytes,
            );
            println!("artifacts in {}", out.display());
        }
        Command::Grid {
            config,
            data,
            eval,
            out,
            grid_lambda,
            grid_tau,
            grid_k,
        } => {
            let spec = build_spec(&config, &data, &eval)?;
            let prepared = prepare_data(&spec, true)?;
            let rows = run_grid(
                &prepared,
                &spec,
                &GridLists {
                    lambda: grid_lambda,
                    tau: grid_tau,
                    k: grid_k,
                },
            )?;
            fs::create_dir_all(&out)?;
            let path = out.join("grid.csv");
            write_grid_csv(BufWriter::new(File::create(&path)?), spec.eval_k, &rows)?;
            println!("{} grid cells -> {}", rows.len(), path.display());
        }
        Command::Ablation {
            config,
            data,
            eval,
            out,
        } => {
            let spec = build_spec(&config, &data, &eval)?;
            let prepared = prepare_data(&spec, true)?;
            let rows = run_ablation(&prepared, &spec)?;
            fs::create_dir_all(&out)?;
            let path = out.join("ablation.csv");
            write_ablation_csv(BufWriter::new(File::create(&path)?), spec.eval_k, &rows)?;
            for r in &rows {
                println!(
                    "{}: hr@{} = {}, ndcg@{} = {}, download = {} B",
                    r.system, spec.eval_k, r.hr, spec.eval_k, r.ndcg, r.download_bytes
                );
            }
            println!("table -> {}", path.display());
        }
        Command::LdpSweep {
            config,
            data,
            eval,
            out,
            deltas,
        } => {
            let spec = build_spec(&config, &data, &eval)?;
            let prepared = prepare_data(&spec, true)?;
            let deltas = deltas.unwrap_or_else(|| LDP_SWEEP_DELTAS.to_vec());
            let rows = run_ldp_sweep(&prepared, &spec, &deltas)?;
            fs::create_dir_all(&out)?;
            let path = out.join("ldp.csv");
            write_ldp_csv(BufWriter::new(File::create(&path)?), spec.eval_k, &rows)?;
            println!("{} noise levels -> {}", rows.len(), path.display());
        }
        Command::ExportEmbeddings {
            config,
            data,
            eval,
            out,
            checkpoint,
        } => {
            let spec = build_spec(&config, &data, &eval)?;
            let prepared = prepare_data(&spec, true)?;
            let result = run_single(
                &prepared,
                &spec,
                &RunOptions {
                    checkpoint: checkpoint.as_deref(),
                    checkpoint_every: 0,
                },
            )?;
            fs::create_dir_all(&out)?;
            let path = out.join("embeddings.csv");
            write_embeddings_csv(
                BufWriter::new(File::create(&path)?),
                &result.global,
                result.labels.as_ref(),
                &prepared.dataset,
            )?;
            println!("embeddings -> {}", path.display());
        }
    }
    Ok(())
}
