//! The federated round loop.
//!
//! Each round: sample participants, broadcast per the configured mode
//! (cluster labels, global embeddings, both, or embeddings plus random
//! labels), run every participant's local training in parallel, optionally
//! perturb uploads with local differential privacy, aggregate into a new
//! global table, and re-cluster it for the next round's label broadcast.
//!
//! Every random decision derives from `(seed, purpose, round, client)`, so a
//! run is a pure function of `(dataset, config)` — independent of worker
//! count and resumable from a checkpoint bitwise.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{effective_label_bytes, CommLedger, Direction, PayloadKind};
use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::model::{
    bce_gradients, bce_loss, EmbeddingTable, LearningRates, ScoreHead, SparseRows, TrainBatch,
};
use crate::rng::{derive_rng, derive_seed, fnv1a64, purpose};
use crate::structure::{
    aggregate, aggregate_plain_mean, build_mask, contrastive_loss_and_gradients, encode_labels,
    kmeans, random_labels, ClusterAssignment, ContrastiveConfig, PairMask,
};

/// What the server sends to participants each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastMode {
    /// Cluster labels only — the full protocol. Clients keep private tables.
    LabelsOnly,
    /// Global embedding tables only, no structural signal (ablation "-E").
    EmbeddingsOnly,
    /// Global embeddings plus k-means labels (ablation "-EC").
    EmbeddingsAndLabels,
    /// Global embeddings plus uniformly random labels (ablation "-ERC").
    EmbeddingsAndRandomLabels,
}

impl BroadcastMode {
    /// Mode name as used in config files and report columns.
    pub fn as_str(self) -> &'static str {
        match self {
            BroadcastMode::LabelsOnly => "labels_only",
            BroadcastMode::EmbeddingsOnly => "embeddings_only",
            BroadcastMode::EmbeddingsAndLabels => "embeddings_and_labels",
            BroadcastMode::EmbeddingsAndRandomLabels => "embeddings_and_random_labels",
        }
    }

    /// System name of the corresponding ablation row.
    pub fn system_name(self) -> &'static str {
        match self {
            BroadcastMode::LabelsOnly => "CGFedRec",
            BroadcastMode::EmbeddingsOnly => "CGFedRec-E",
            BroadcastMode::EmbeddingsAndLabels => "CGFedRec-EC",
            BroadcastMode::EmbeddingsAndRandomLabels => "CGFedRec-ERC",
        }
    }

    pub fn sends_embeddings(self) -> bool {
        !matches!(self, BroadcastMode::LabelsOnly)
    }

    pub fn sends_kmeans_labels(self) -> bool {
        matches!(
            self,
            BroadcastMode::LabelsOnly | BroadcastMode::EmbeddingsAndLabels
        )
    }

    pub fn sends_random_labels(self) -> bool {
        matches!(self, BroadcastMode::EmbeddingsAndRandomLabels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdpMechanism {
    Laplace,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    /// Mean over the clients that actually trained each item; untouched items
    /// keep the previous global row.
    CoverageMean,
    /// Plain mean over every uploaded table.
    PlainMean,
}

/// Full experiment configuration. Serializes as a flat JSON object; unknown
/// keys are rejected so typos fail loudly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub seed: u64,
    /// Number of federation rounds T.
    pub rounds: u32,
    /// Participation rate gamma in (0, 1]; ceil(gamma * n) clients per round.
    pub gamma: f64,
    /// Embedding dimension.
    pub d: usize,
    /// Cluster count for the server-side k-means.
    pub k: usize,
    /// Score-head learning rate.
    pub eta: f64,
    /// Embedding learning rate.
    pub eta_prime: f64,
    /// Weight of the contrastive term.
    pub lambda: f64,
    pub tau: f64,
    pub tau_base: f64,
    pub use_normalized: bool,
    /// Sampled negatives per train positive, per round.
    pub neg_ratio: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub mode: BroadcastMode,
    pub aggregation: AggregationKind,
    /// Scale of the per-entry upload noise; 0 disables the mechanism entirely.
    pub ldp_delta: f64,
    pub ldp_mechanism: LdpMechanism,
    /// Wire bytes per float for byte accounting (tables ship as float32).
    pub s_f: u64,
    /// Wire bytes per cluster label (auto-promoted to 2 when k > 256).
    pub s_i: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Seeded k-means++ restarts per server clustering; the min-inertia run wins.
    pub kmeans_restarts: usize,
    /// Catalog size above which the contrastive term runs on a per-round
    /// uniform item subsample of this size.
    pub contrastive_subsample: usize,
    /// Std-dev of the Gaussian initialization of tables and heads.
    pub init_scale: f64,
    /// Cluster the initial global table so labels-bearing modes have labels
    /// in round 1 (off: round 1 trains without the contrastive term).
    pub bootstrap_labels: bool,
    /// Draw the random-label broadcast once and reuse it every round, instead
    /// of redrawing per round.
    pub fixed_random_labels: bool,
    /// Negatives per user in the fixed evaluation slate.
    pub eval_negatives: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            rounds: 100,
            gamma: 0.1,
            d: 32,
            k: 20,
            eta: 0.2,
            eta_prime: 0.2,
            lambda: 0.5,
            tau: 0.1,
            tau_base: 0.07,
            use_normalized: true,
            neg_ratio: 4,
            batch_size: 256,
            local_epochs: 1,
            mode: BroadcastMode::LabelsOnly,
            aggregation: AggregationKind::CoverageMean,
            ldp_delta: 0.0,
            ldp_mechanism: LdpMechanism::Laplace,
            s_f: 4,
            s_i: 1,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            kmeans_restarts: 4,
            contrastive_subsample: 8192,
            init_scale: 0.1,
            bootstrap_labels: true,
            fixed_random_labels: false,
            eval_negatives: 99,
        }
    }
}

impl FederationConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            tau_base: self.tau_base,
            lambda: self.lambda,
            use_normalized: self.use_normalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.k == 0 || self.k > 65536 {
            return Err(Error::Config(format!(
                "k must be in [1, 65536] (16-bit label wire limit), got {}",
                self.k
            )));
        }
        LearningRates::new(self.eta, self.eta_prime).map_err(|e| Error::Config(e.to_string()))?;
        self.contrastive()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.ldp_delta.is_finite() || self.ldp_delta < 0.0 {
            return Err(Error::Config(format!(
                "ldp_delta must be finite and >= 0, got {}",
                self.ldp_delta
            )));
        }
        if self.s_f == 0 || self.s_i == 0 {
            return Err(Error::Config("s_f and s_i must be >= 1".into()));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::Config("kmeans_max_iters must be >= 1".into()));
        }
        if !self.kmeans_tol.is_finite() || self.kmeans_tol < 0.0 {
            return Err(Error::Config("kmeans_tol must be finite and >= 0".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Config("kmeans_restarts must be >= 1".into()));
        }
        if self.contrastive_subsample < 2 {
            return Err(Error::Config("contrastive_subsample must be >= 2".into()));
        }
        if !self.init_scale.is_finite() || self.init_scale <= 0.0 {
            return Err(Error::Config("init_scale must be finite and > 0".into()));
        }
        if self.eval_negatives == 0 {
            return Err(Error::Config("eval_negatives must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config (checkpoint compatibility check).
    pub fn fingerprint(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        fnv1a64(&bytes)
    }
}

/// One client's private model plus its training items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: u32,
    pub table: EmbeddingTable,
    pub head: ScoreHead,
    pub train_items: Vec<u32>,
}

/// What a participant hands back to the server.
#[derive(Clone, Debug)]
pub struct ClientRoundOutput {
    pub upload: EmbeddingTable,
    /// Per-item trained-flags: true iff the item appeared in a batch this round.
    pub coverage: Vec<bool>,
    /// Mean per-sample recommendation loss over the round.
    pub rec_loss: f64,
    /// Mean per-step contrastive loss over the round (0 when inactive).
    pub cg_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub participants: Vec<u32>,
    pub mean_rec_loss: f64,
    pub mean_cg_loss: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// Content hash of the broadcast label vector; absent when the round
    /// carried no labels.
    pub cluster_labels_hash: Option<u64>,
}

/// `ceil(gamma * n)` distinct clients, uniform without replacement under the
/// (seed, round)-derived stream, returned ascending.
pub fn select_participants(n_clients: usize, gamma: f64, round: u32, seed: u64) -> Vec<u32> {
    assert!(
        n_clients > 0 && gamma > 0.0 && gamma <= 1.0,
        "participant selection needs n >= 1 and gamma in (0, 1]"
    );
    let count = ((gamma * n_clients as f64).ceil() as usize).clamp(1, n_clients);
    let mut rng = derive_rng(seed, &[purpose::SELECT, u64::from(round)]);
    let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, n_clients, count)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    picked.sort_unstable();
    picked
}

/// Element-wise zero-mean noise on the upload, scale `delta`, deterministic
/// under `seed`. `delta = 0` returns the input bitwise (callers skip the call
/// entirely in that case; this keeps the operation total).
pub fn apply_ldp(
    upload: &EmbeddingTable,
    delta: f64,
    seed: u64,
    mechanism: LdpMechanism,
) -> EmbeddingTable {
    assert!(delta >= 0.0, "ldp delta must be >= 0");
    if delta == 0.0 {
        return upload.clone();
    }
    let mut rng = derive_rng(seed, &[purpose::LDP]);
    let mut out = upload.clone();
    match mechanism {
        LdpMechanism::Laplace => {
            for v in out.values_mut() {
                *v += sample_laplace(&mut rng, delta);
            }
        }
        LdpMechanism::Gaussian => {
            let normal = Normal::new(0.0, delta).expect("delta validated positive finite");
            for v in out.values_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    out
}

/// Inverse-CDF Laplace(0, scale): u ~ U(0,1) (resampling the u = 0 corner),
/// v = u - 1/2, x = -scale * sign(v) * ln(1 - 2|v|).
fn sample_laplace<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = loop {
        let u = rng.gen::<f64>();
        if u != 0.0 {
            break u;
        }
    };
    let v = u - 0.5;
    -scale * v.signum() * (-2.0 * v.abs()).ln_1p()
}

/// One participant's local round: optional table sync from the broadcast,
/// then `local_epochs` passes of shuffled mini-batch SGD on the joint
/// objective (recommendation loss plus `lambda` times the contrastive term
/// when labels arrived).
pub fn client_round(
    state: &mut ClientState,
    ds: &InteractionDataset,
    labels: Option<&ClusterAssignment>,
    global_emb: Option<&EmbeddingTable>,
    cfg: &FederationConfig,
    round: u32,
) -> Result<ClientRoundOutput> {
    let m = ds.n_items();
    let d = cfg.d;
    if state.table.n_items() != m || state.table.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "client {} table is {} x {}, expected {m} x {d}",
            state.client_id,
            state.table.n_items(),
            state.table.dim()
        )));
    }
    // Table synchronization: in embedding-broadcast modes the private table is
    // replaced by the global one before training. labels_only never does this
    // — that privacy/traffic asymmetry is the point of the protocol.
    if let Some(g) = global_emb {
        if g.n_items() != m || g.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "broadcast table is {} x {}, expected {m} x {d}",
                g.n_items(),
                g.dim()
            )));
        }
        state.table = g.clone();
    }

    let rates = LearningRates::new(cfg.eta, cfg.eta_prime)?;
    let ccfg = cfg.contrastive();
    // lambda = 0 must be bit-identical to "no labels at all", so the term is
    // skipped entirely rather than scaled by zero.
    let regularizer = match labels {
        Some(assign) if cfg.lambda > 0.0 && m >= 2 => {
            if assign.n_items() != m {
                return Err(Error::ShapeMismatch(format!(
                    "label broadcast covers {} items, catalog has {m}",
                    assign.n_items()
                )));
            }
            Some(Regularizer::new(assign, cfg, round)?)
        }
        _ => None,
    };

    let client = state.client_id;
    let neg_seed = derive_seed(cfg.seed, &[purpose::NEG, u64::from(round)]);
    let negatives = ds.sample_train_negatives(client, cfg.neg_ratio, neg_seed)?;
    let mut samples: Vec<(u32, bool)> = state
        .train_items
        .iter()
        .map(|&i| (i, true))
        .chain(negatives.iter().map(|&i| (i, false)))
        .collect();

    let mut coverage = vec![false; m];
    let mut rec_loss_sum = 0.0;
    let mut rec_samples = 0usize;
    let mut cg_loss_sum = 0.0;
    let mut cg_steps = 0usize;
    for epoch in 0..cfg.local_epochs {
        let mut rng = derive_rng(
            cfg.seed,
            &[
                purpose::SHUFFLE,
                u64::from(round),
                u64::from(client),
                epoch as u64,
            ],
        );
        samples.shuffle(&mut rng);
        for chunk in samples.chunks(cfg.batch_size) {
            let items: Vec<u32> = chunk.iter().map(|&(i, _)| i).collect();
            let labels_vec: Vec<bool> = chunk.iter().map(|&(_, l)| l).collect();
            let batch = TrainBatch::new(items, labels_vec)?;
            let loss = bce_loss(&state.head, &state.table, &batch)?;
            let (grad_w, grad_e) = bce_gradients(&state.head, &state.table, &batch)?;
            let extra = match &regularizer {
                Some(reg) => {
                    let (cg_loss, grad) = reg.eval(&state.table, &ccfg)?;
                    cg_loss_sum += cg_loss;
                    cg_steps += 1;
                    Some(grad.scaled(cfg.lambda))
                }
                None => None,
            };
            crate::model::sgd_step(
                &mut state.head,
                &mut state.table,
                &grad_w,
                &grad_e,
                extra.as_ref(),
                &rates,
            )?;
            for (item, _) in batch.iter() {
                coverage[item as usize] = true;
            }
            rec_loss_sum += loss;
            rec_samples += batch.len();
        }
    }
    Ok(ClientRoundOutput {
        upload: state.table.clone(),
        coverage,
        rec_loss: if rec_samples > 0 {
            rec_loss_sum / rec_samples as f64
        } else {
            0.0
        },
        cg_loss: if cg_steps > 0 {
            cg_loss_sum / cg_steps as f64
        } else {
            0.0
        },
    })
}

/// The contrastive term as seen by one client round: the full mask, or a
/// per-round uniform item subsample when the catalog exceeds the configured
/// threshold (the subsample is shared by all clients that round).
struct Regularizer {
    mask: PairMask,
    subset: Option<Vec<u32>>,
}

impl Regularizer {
    fn new(assign: &ClusterAssignment, cfg: &FederationConfig, round: u32) -> Result<Self> {
        let m = assign.n_items();
        let mask = build_mask(assign)?;
        if m <= cfg.contrastive_subsample {
            return Ok(Self { mask, subset: None });
        }
        let mut rng = derive_rng(cfg.seed, &[purpose::SUBSAMPLE, u64::from(round)]);
        let mut subset: Vec<u32> = rand::seq::index::sample(&mut rng, m, cfg.contrastive_subsample)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        subset.sort_unstable();
        let mask = mask.restrict(&subset);
        Ok(Self {
            mask,
            subset: Some(subset),
        })
    }

    fn eval(&self, table: &EmbeddingTable, ccfg: &ContrastiveConfig) -> Result<(f64, SparseRows)> {
        match &self.subset {
            None => contrastive_loss_and_gradients(table, &self.mask, ccfg),
            Some(subset) => {
                let d = table.dim();
                let mut values = Vec::with_capacity(subset.len() * d);
                for &i in subset {
                    values.extend_from_slice(table.row(i as usize));
                }
                let sub_table = EmbeddingTable::from_rows(subset.len(), d, values)?;
                let (loss, grad) = contrastive_loss_and_gradients(&sub_table, &self.mask, ccfg)?;
                // Scatter the subsample gradient back to catalog item ids.
                let mut rows = Vec::with_capacity(subset.len() * d);
                for (_, row) in grad.iter() {
                    rows.extend_from_slice(row);
                }
                Ok((loss, SparseRows::from_sorted(d, subset.clone(), rows)))
            }
        }
    }
}

/// Full simulator state; drive it round by round (the CLI adds evaluation and
/// early stopping between rounds) or via [`run_federation`].
pub struct Simulation<'d> {
    ds: &'d InteractionDataset,
    cfg: FederationConfig,
    clients: Vec<ClientState>,
    global: EmbeddingTable,
    /// Clustering of the current global table, broadcast next round.
    labels_next: Option<ClusterAssignment>,
    ledger: CommLedger,
    reports: Vec<RoundReport>,
    rounds_done: u32,
}

/// Owned results of a completed run.
pub struct RunOutcome {
    pub clients: Vec<ClientState>,
    pub reports: Vec<RoundReport>,
    pub ledger: CommLedger,
    pub global: EmbeddingTable,
}

impl<'d> Simulation<'d> {
    pub fn new(ds: &'d InteractionDataset, cfg: FederationConfig) -> Result<Self> {
        cfg.validate()?;
        let m = ds.n_items();
        let n = ds.n_users();
        if cfg.k > m {
            return Err(Error::Config(format!(
                "k = {} exceeds the catalog size m = {m}",
                cfg.k
            )));
        }
        let clients = (0..n as u32)
            .map(|u| {
                let mut rng = derive_rng(cfg.seed, &[purpose::INIT, u64::from(u)]);
                Ok(ClientState {
                    client_id: u,
                    table: EmbeddingTable::random(m, cfg.d, cfg.init_scale, &mut rng)?,
                    head: ScoreHead::random(cfg.d, cfg.init_scale, &mut rng)?,
                    train_items: ds.train_positives(u).to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut global_rng = derive_rng(cfg.seed, &[purpose::GLOBAL_INIT]);
        let global = EmbeddingTable::random(m, cfg.d, cfg.init_scale, &mut global_rng)?;
        let ledger = CommLedger::new(cfg.s_f, effective_label_bytes(cfg.s_i, cfg.k))?;
        let mut sim = Self {
            ds,
            cfg,
            clients,
            global,
            labels_next: None,
            ledger,
            reports: Vec::new(),
            rounds_done: 0,
        };
        // Round-1 bootstrap: cluster the initial global table so the first
        // labels-bearing broadcast has something to say.
        if sim.cfg.mode.sends_kmeans_labels() && sim.cfg.bootstrap_labels {
            sim.labels_next = Some(sim.server_cluster(0)?);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &'d InteractionDataset {
        self.ds
    }

    pub fn rounds_done(&self) -> u32 {
        self.rounds_done
    }

    pub fn is_complete(&self) -> bool {
        self.rounds_done >= self.cfg.rounds
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global_table(&self) -> &EmbeddingTable {
        &self.global
    }

    /// The clustering of the current global table (what the next round would
    /// broadcast in labels-bearing modes).
    pub fn current_labels(&self) -> Option<&ClusterAssignment> {
        self.labels_next.as_ref()
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn into_outcome(self) -> RunOutcome {
        RunOutcome {
            clients: self.clients,
            reports: self.reports,
            ledger: self.ledger,
            global: self.global,
        }
    }

    /// Best-of-R seeded k-means over the current global table (min inertia;
    /// restart seeds derive from (seed, round, restart), so one bad init
    /// cannot wreck a round).
    fn server_cluster(&self, round: u32) -> Result<ClusterAssignment> {
        let mut best: Option<ClusterAssignment> = None;
        for restart in 0..self.cfg.kmeans_restarts {
            let seed = derive_seed(
                self.cfg.seed,
                &[purpose::KMEANS, u64::from(round), restart as u64],
            );
            let assign = kmeans(
                &self.global,
                self.cfg.k,
                seed,
                self.cfg.kmeans_max_iters,
                self.cfg.kmeans_tol,
            )?;
            if best.as_ref().map_or(true, |b| assign.inertia < b.inertia) {
                best = Some(assign);
            }
        }
        Ok(best.expect("at least one restart"))
    }

    /// Executes the next round and returns its report.
    pub fn run_round(&mut self) -> Result<&RoundReport> {
        let round = self.rounds_done + 1;
        self.run_round_inner(round)
            .map_err(|e| e.with_context(format!("round {round}")))?;
        Ok(self.reports.last().expect("round just pushed"))
    }

    fn run_round_inner(&mut self, round: u32) -> Result<()> {
        let cfg = self.cfg.clone();
        let m = self.ds.n_items();
        let participants = select_participants(self.clients.len(), cfg.gamma, round, cfg.seed);
        self.ledger.begin_round()?;

        let broadcast_emb = cfg.mode.sends_embeddings().then_some(&self.global);
        let labels: Option<ClusterAssignment> = if cfg.mode.sends_kmeans_labels() {
            self.labels_next.clone()
        } else if cfg.mode.sends_random_labels() {
            let scope: &[u64] = if cfg.fixed_random_labels {
                &[purpose::RANDOM_LABELS]
            } else {
                &[purpose::RANDOM_LABELS, u64::from(round)]
            };
            Some(random_labels(m, cfg.k, derive_seed(cfg.seed, scope)))
        } else {
            None
        };
        let labels_hash = match &labels {
            Some(l) => Some(fnv1a64(&encode_labels(l)?)),
            None => None,
        };
        for _ in &participants {
            if broadcast_emb.is_some() {
                self.ledger.record_transfer(
                    Direction::Down,
                    PayloadKind::EmbeddingTable,
                    m as u64,
                    cfg.d as u64,
                )?;
            }
            if labels.is_some() {
                self.ledger
                    .record_transfer(Direction::Down, PayloadKind::LabelVector, m as u64, 1)?;
            }
        }

        // Parallel local training. Slots are indexed by client id, so the
        // result layout is independent of scheduling.
        let mut outputs: Vec<Option<ClientRoundOutput>> = Vec::new();
        outputs.resize_with(self.clients.len(), || None);
        let is_participant = {
            let mut flags = vec![false; self.clients.len()];
            for &p in &participants {
                flags[p as usize] = true;
            }
            flags
        };
        let ds = self.ds;
        let labels_ref = labels.as_ref();
        self.clients
            .par_iter_mut()
            .zip(outputs.par_iter_mut())
            .enumerate()
            .filter(|(i, _)| is_participant[*i])
            .try_for_each(|(i, (state, slot))| {
                let out = client_round(state, ds, labels_ref, broadcast_emb, &cfg, round)
                    .map_err(|e| e.with_context(format!("client {i}")))?;
                *slot = Some(out);
                Ok::<(), Error>(())
            })?;

        // Server phase: collect uploads in participant order, perturb, account.
        let mut uploads = Vec::with_capacity(participants.len());
        let mut coverages = Vec::with_capacity(participants.len());
        let mut rec_loss_sum = 0.0;
        let mut cg_loss_sum = 0.0;
        for &p in &participants {
            let out = outputs[p as usize].take().expect("participant ran");
            let upload = if cfg.ldp_delta > 0.0 {
                apply_ldp(
                    &out.upload,
                    cfg.ldp_delta,
                    derive_seed(cfg.seed, &[purpose::LDP, u64::from(round), u64::from(p)]),
                    cfg.ldp_mechanism,
                )
            } else {
                out.upload
            };
            self.ledger.record_transfer(
                Direction::Up,
                PayloadKind::EmbeddingTable,
                m as u64,
                cfg.d as u64,
            )?;
            // Coverage bitmap rides along as metadata, not payload.
            self.ledger.record_framing(((m as u64) + 7) / 8);
            uploads.push(upload);
            coverages.push(out.coverage);
            rec_loss_sum += out.rec_loss;
            cg_loss_sum += out.cg_loss;
        }
        self.global = match cfg.aggregation {
            AggregationKind::CoverageMean => aggregate(&uploads, &coverages, &self.global)?,
            AggregationKind::PlainMean => aggregate_plain_mean(&uploads)?,
        };
        if cfg.mode.sends_kmeans_labels() {
            self.labels_next = Some(self.server_cluster(round)?);
        }

        let comms = self.ledger.end_round()?;
        let n_parts = participants.len() as f64;
        self.reports.push(RoundReport {
            round,
            participants,
            mean_rec_loss: rec_loss_sum / n_parts,
            mean_cg_loss: cg_loss_sum / n_parts,
            upload_bytes: comms.upload_bytes,
            download_bytes: comms.download_bytes,
            cluster_labels_hash: labels_hash,
        });
        self.rounds_done = round;
        Ok(())
    }

    pub fn run_to_completion(&mut self) -> Result<()> {
        while !self.is_complete() {
            self.run_round()?;
        }
        Ok(())
    }

    /// Serializes the full simulator state to a single binary stream. All
    /// randomness is derived statelessly from (seed, round, client), so there
    /// are no RNG cursors to save — the round index is enough.
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        if self.ledger.rounds().len() != self.rounds_done as usize {
            return Err(Error::Config(
                "checkpoint only between completed rounds".into(),
            ));
        }
        w.write_all(&CHECKPOINT_MAGIC)?;
        let body = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_fingerprint: self.cfg.fingerprint(),
            dataset_fingerprint: self.ds.fingerprint(),
            rounds_done: self.rounds_done,
            global: self.global.clone(),
            clients: self.clients.clone(),
            labels_next: self.labels_next.clone(),
            ledger: self.ledger.clone(),
            reports: self.reports.clone(),
        };
        bincode::serialize_into(&mut w, &body)
            .map_err(|e| Error::Format(format!("checkpoint encode: {e}")))?;
        Ok(())
    }

    /// Restores a simulation saved by [`Self::save_checkpoint`]. The config
    /// and dataset must fingerprint-match what the checkpoint was taken with;
    /// continuation is then bitwise identical to the uninterrupted run.
    pub fn resume_from_checkpoint<R: Read>(
        ds: &'d InteractionDataset,
        cfg: FederationConfig,
        mut r: R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let body: Checkpoint = bincode::deserialize_from(&mut r)
            .map_err(|e| Error::Format(format!("checkpoint decode: {e}")))?;
        if body.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                body.version
            )));
        }
        if body.config_fingerprint != cfg.fingerprint() {
            return Err(Error::Config(
                "checkpoint was taken with a different configuration".into(),
            ));
        }
        if body.dataset_fingerprint != ds.fingerprint() {
            return Err(Error::Config(
                "checkpoint was taken with a different dataset".into(),
            ));
        }
        if body.clients.len() != ds.n_users() {
            return Err(Error::Format("checkpoint client count mismatch".into()));
        }
        Ok(Self {
            ds,
            cfg,
            clients: body.clients,
            global: body.global,
            labels_next: body.labels_next,
            ledger: body.ledger,
            reports: body.reports,
            rounds_done: body.rounds_done,
        })
    }
}

const CHECKPOINT_MAGIC: [u8; 8] = *b"CGFRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_fingerprint: u64,
    dataset_fingerprint: u64,
    rounds_done: u32,
    global: EmbeddingTable,
    clients: Vec<ClientState>,
    labels_next: Option<ClusterAssignment>,
    ledger: CommLedger,
    reports: Vec<RoundReport>,
}

/// Runs all `cfg.rounds` rounds and returns the final states, reports, and
/// ledger.
pub fn run_federation(ds: &InteractionDataset, cfg: FederationConfig) -> Result<RunOutcome> {
    let mut sim = Simulation::new(ds, cfg)?;
    sim.run_to_completion()?;
    Ok(sim.into_outcome())
}

/// Streams reports as JSON-lines, one object per round.
pub fn write_reports_jsonl<W: Write>(mut w: W, reports: &[RoundReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_reader, split_leave_one_out, LogFormat};
    use crate::model::predict;

    fn toy_dataset(n_users: usize, n_items: usize, per_user: usize) -> InteractionDataset {
        // Deterministic round-robin positives; timestamps make the last one
        // the held-out test item.
        let mut lines = String::new();
        for u in 0..n_users {
            for j in 0..per_user {
                let item = (u * 3 + j * 7) % n_items;
                lines.push_str(&format!("{u}\t{item}\t5\t{j}\n"));
            }
        }
        let log = ingest_reader(lines.as_bytes(), LogFormat::TabSeparated).unwrap();
        split_leave_one_out(&log, 1).unwrap()
    }

    fn small_cfg() -> FederationConfig {
        FederationConfig {
            rounds: 2,
            gamma: 1.0,
            d: 4,
            k: 2,
            batch_size: 16,
            ..FederationConfig::default()
        }
    }

    #[test]
    fn select_participants_contract() {
        let all = select_participants(7, 1.0, 3, 9);
        assert_eq!(all, (0..7).collect::<Vec<u32>>());

        let three = select_participants(10, 0.3, 1, 9);
        assert_eq!(three.len(), 3);
        assert!(three.windows(2).all(|w| w[0] < w[1]));

        assert_eq!(select_participants(10, 0.3, 1, 9), three);
        // ceil: gamma epsilon still selects someone.
        assert_eq!(select_participants(10, 0.01, 1, 9).len(), 1);
        // Different rounds generally differ.
        let other_rounds: Vec<_> = (2..10)
            .map(|r| select_participants(10, 0.3, r, 9))
            .collect();
        assert!(other_rounds.iter().any(|s| *s != three));
    }

    #[test]
    fn ldp_zero_delta_is_bitwise_identity() {
        let mut rng = derive_rng(1, &[purpose::INIT]);
        let t = EmbeddingTable::random(5, 3, 1.0, &mut rng).unwrap();
        let out = apply_ldp(&t, 0.0, 77, LdpMechanism::Laplace);
        for (a, b) in t.values().iter().zip(out.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ldp_noise_is_seeded_and_zero_mean() {
        let t = EmbeddingTable::zeros(1000, 1000).unwrap();
        let a = apply_ldp(&t, 0.1, 5, LdpMechanism::Laplace);
        let b = apply_ldp(&t, 0.1, 5, LdpMechanism::Laplace);
        assert_eq!(a, b);
        let c = apply_ldp(&t, 0.1, 6, LdpMechanism::Laplace);
        assert_ne!(a, c);
        // Laplace(0, 0.1): sigma = 0.1 * sqrt(2), mean of 1e6 draws within
        // 3 sigma/1000 = 0.000424... of zero.
        let mean = a.values().iter().sum::<f64>() / a.values().len() as f64;
        assert!(mean.abs() < 0.000_424_264_068_711_929, "mean = {mean}");
        // Same bound holds for the Gaussian mechanism (sigma_mean = 1e-4 * 3).
        let g = apply_ldp(&t, 0.1, 5, LdpMechanism::Gaussian);
        let gmean = g.values().iter().sum::<f64>() / g.values().len() as f64;
        assert!(gmean.abs() < 3.0e-4, "gaussian mean = {gmean}");
    }

    #[test]
    fn client_round_lambda_zero_matches_label_free_run() {
        let ds = toy_dataset(4, 12, 5);
        let cfg = FederationConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let sim = Simulation::new(&ds, cfg.clone()).unwrap();
        let mut with_labels = sim.clients()[0].clone();
        let mut without = sim.clients()[0].clone();
        let labels = random_labels(12, 2, 3);
        let global = sim.global_table().clone();
        let a = client_round(&mut with_labels, &ds, Some(&labels), Some(&global), &cfg, 1).unwrap();
        let b = client_round(&mut without, &ds, None, Some(&global), &cfg, 1).unwrap();
        assert_eq!(with_labels, without);
        assert_eq!(a.upload, b.upload);
        assert_eq!(a.cg_loss, 0.0);
        assert_eq!(b.cg_loss, 0.0);
    }

    #[test]
    fn client_round_zero_epochs_only_syncs() {
        let ds = toy_dataset(3, 9, 4);
        let cfg = FederationConfig {
            local_epochs: 0,
            ..small_cfg()
        };
        let sim = Simulation::new(&ds, cfg.clone()).unwrap();
        let mut state = sim.clients()[1].clone();
        let before = state.clone();
        let global = sim.global_table().clone();
        // labels_only shape: no broadcast table, nothing changes at all.
        let out = client_round(&mut state, &ds, None, None, &cfg, 1).unwrap();
        assert_eq!(state, before);
        assert_eq!(out.upload, before.table);
        assert!(out.coverage.iter().all(|&c| !c));
        // With a broadcast table the upload equals the synced table.
        let out = client_round(&mut state, &ds, None, Some(&global), &cfg, 1).unwrap();
        assert_eq!(state.table, global);
        assert_eq!(out.upload, global);
    }

    #[test]
    fn repeated_training_on_one_positive_converges() {
        // Single user whose train set is one item (the other positive is held
        // out): prediction on the train item must rise monotonically past 0.9.
        let log = ingest_reader("0\t0\t5\t1\n0\t1\t5\t2\n".as_bytes(), LogFormat::TabSeparated)
            .unwrap();
        let ds = split_leave_one_out(&log, 1).unwrap();
        let cfg = FederationConfig {
            rounds: 1,
            gamma: 1.0,
            d: 4,
            k: 1,
            eta: 0.5,
            eta_prime: 0.5,
            lambda: 0.0,
            neg_ratio: 0,
            bootstrap_labels: false,
            batch_size: 8,
            ..FederationConfig::default()
        };
        let sim = Simulation::new(&ds, cfg.clone()).unwrap();
        let mut state = sim.clients()[0].clone();
        let item = state.train_items[0];
        let mut prev = predict(&state.head, &state.table, item).unwrap();
        let mut crossed = false;
        for round in 1..=60 {
            client_round(&mut state, &ds, None, None, &cfg, round).unwrap();
            let p = predict(&state.head, &state.table, item).unwrap();
            assert!(p > prev, "round {round}: {p} <= {prev}");
            prev = p;
            if p > 0.9 {
                crossed = true;
                break;
            }
        }
        assert!(crossed, "never exceeded 0.9 (reached {prev})");
    }

    #[test]
    fn one_round_ledger_shape() {
        let ds = toy_dataset(2, 10, 4);
        let m = ds.n_items() as u64; // distinct items the toy log touches
        let cfg = FederationConfig {
            rounds: 1,
            ..small_cfg()
        };
        let outcome = run_federation(&ds, cfg.clone()).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        let r = &outcome.reports[0];
        assert_eq!(r.participants, vec![0, 1]);
        // Uploads: both clients ship full tables; labels_only downloads are
        // d-free: m * s_i per participant.
        assert_eq!(r.upload_bytes, 2 * m * 4 * 4);
        assert_eq!(r.download_bytes, 2 * m);
        assert!(r.cluster_labels_hash.is_some());
    }

    #[test]
    fn mode_semantics_of_label_hashes() {
        let ds = toy_dataset(3, 9, 4);
        let erc = FederationConfig {
            mode: BroadcastMode::EmbeddingsAndRandomLabels,
            rounds: 3,
            ..small_cfg()
        };
        let outcome = run_federation(&ds, erc).unwrap();
        let hashes: Vec<_> = outcome
            .reports
            .iter()
            .map(|r| r.cluster_labels_hash.unwrap())
            .collect();
        assert!(hashes.windows(2).any(|w| w[0] != w[1]), "hashes {hashes:?}");

        let e_only = FederationConfig {
            mode: BroadcastMode::EmbeddingsOnly,
            lambda: 0.0,
            rounds: 1,
            ..small_cfg()
        };
        let outcome = run_federation(&ds, e_only).unwrap();
        assert!(outcome.reports[0].cluster_labels_hash.is_none());
        // Embedding downloads carry the d-dependent term.
        assert_eq!(outcome.reports[0].download_bytes, 3 * 9 * 4 * 4);
    }

    #[test]
    fn fixed_random_labels_repeat_across_rounds() {
        let ds = toy_dataset(3, 9, 4);
        let cfg = FederationConfig {
            mode: BroadcastMode::EmbeddingsAndRandomLabels,
            fixed_random_labels: true,
            rounds: 3,
            ..small_cfg()
        };
        let outcome = run_federation(&ds, cfg).unwrap();
        let hashes: Vec<_> = outcome
            .reports
            .iter()
            .map(|r| r.cluster_labels_hash.unwrap())
            .collect();
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn non_participants_are_untouched() {
        let ds = toy_dataset(8, 16, 4);
        let cfg = FederationConfig {
            gamma: 0.25,
            rounds: 1,
            ..small_cfg()
        };
        let mut sim = Simulation::new(&ds, cfg.clone()).unwrap();
        let before: Vec<ClientState> = sim.clients().to_vec();
        sim.run_round().unwrap();
        let participants = sim.reports()[0].participants.clone();
        assert_eq!(participants.len(), 2);
        for (i, (b, a)) in before.iter().zip(sim.clients()).enumerate() {
            if participants.contains(&(i as u32)) {
                assert_ne!(b, a, "participant {i} should have trained");
            } else {
                assert_eq!(b, a, "non-participant {i} must be unchanged");
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = toy_dataset(5, 12, 4);
        let cfg = FederationConfig {
            rounds: 3,
            gamma: 0.6,
            ..small_cfg()
        };
        let a = run_federation(&ds, cfg.clone()).unwrap();
        let b = run_federation(&ds, cfg).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.global, b.global);
        for (x, y) in a.clients.iter().zip(&b.clients) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn checkpoint_resume_is_bitwise_identical() {
        let ds = toy_dataset(5, 12, 4);
        let cfg = FederationConfig {
            rounds: 5,
            gamma: 0.6,
            ..small_cfg()
        };

        let mut straight = Simulation::new(&ds, cfg.clone()).unwrap();
        straight.run_to_completion().unwrap();

        let mut first = Simulation::new(&ds, cfg.clone()).unwrap();
        for _ in 0..2 {
            first.run_round().unwrap();
        }
        let mut blob = Vec::new();
        first.save_checkpoint(&mut blob).unwrap();
        drop(first);
        let mut resumed = Simulation::resume_from_checkpoint(&ds, cfg, blob.as_slice()).unwrap();
        assert_eq!(resumed.rounds_done(), 2);
        resumed.run_to_completion().unwrap();

        assert_eq!(straight.reports(), resumed.reports());
        assert_eq!(straight.global_table(), resumed.global_table());
        assert_eq!(straight.clients(), resumed.clients());
        assert_eq!(straight.ledger(), resumed.ledger());
    }

    #[test]
    fn checkpoint_rejects_mismatched_config_or_data() {
        let ds = toy_dataset(3, 9, 4);
        let cfg = small_cfg();
        let mut sim = Simulation::new(&ds, cfg.clone()).unwrap();
        sim.run_round().unwrap();
        let mut blob = Vec::new();
        sim.save_checkpoint(&mut blob).unwrap();

        let other_cfg = FederationConfig {
            eta: 0.11,
            ..cfg.clone()
        };
        assert!(Simulation::resume_from_checkpoint(&ds, other_cfg, blob.as_slice()).is_err());

        let other_ds = toy_dataset(3, 9, 3);
        assert!(Simulation::resume_from_checkpoint(&other_ds, cfg, blob.as_slice()).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = FederationConfig::default();
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        cfg.gamma = 1.5;
        assert!(cfg.validate().is_err());
        cfg = FederationConfig::default();
        cfg.ldp_delta = -0.1;
        assert!(cfg.validate().is_err());
        cfg = FederationConfig::default();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
        cfg = FederationConfig::default();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        assert!(FederationConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_round_trip_and_unknown_key_rejection() {
        let cfg = FederationConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: FederationConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let partial: FederationConfig =
            serde_json::from_str(r#"{"mode": "embeddings_and_labels", "rounds": 7}"#).unwrap();
        assert_eq!(partial.mode, BroadcastMode::EmbeddingsAndLabels);
        assert_eq!(partial.rounds, 7);
        assert_eq!(partial.gamma, cfg.gamma);
        assert!(serde_json::from_str::<FederationConfig>(r#"{"rounds_typo": 7}"#).is_err());
    }

    #[test]
    fn labels_only_mode_never_syncs_tables() {
        let ds = toy_dataset(2, 8, 4);
        let cfg = FederationConfig {
            rounds: 1,
            lambda: 0.0, // isolate the sync behavior from training content
            local_epochs: 0,
            ..small_cfg()
        };
        let mut sim = Simulation::new(&ds, cfg).unwrap();
        let tables_before: Vec<EmbeddingTable> =
            sim.clients().iter().map(|c| c.table.clone()).collect();
        sim.run_round().unwrap();
        for (before, after) in tables_before.iter().zip(sim.clients()) {
            assert_eq!(before, &after.table);
        }
    }
}
