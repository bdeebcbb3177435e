//! Server-side structure discovery and the client-side contrastive term.
//!
//! Each round the server aggregates uploaded embedding tables into a global
//! table, clusters its rows with seeded k-means, and broadcasts only the
//! cluster-label vector. Clients expand the labels into a same-cluster pair
//! mask and regularize their private tables with a supervised contrastive
//! loss over that mask, so structural knowledge moves without any embedding
//! row leaving the server.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, SparseRows};
use crate::rng::{derive_rng, purpose};

/// Result of one clustering pass over the global table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Per-item cluster id, each in `[0, k)`.
    pub labels: Vec<u32>,
    /// Cluster centers (`k x d`); `None` for label vectors that never came
    /// from k-means (the random-label ablation arm).
    pub centroids: Option<EmbeddingTable>,
    pub k: usize,
    /// Sum of squared distances of every item to its centroid; 0 when
    /// centroids are unset.
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn n_items(&self) -> usize {
        self.labels.len()
    }

    fn check(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidParameter("empty cluster assignment".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.k) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} out of range for k = {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Hyper-parameters of the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Temperature dividing the pairwise similarities.
    pub tau: f64,
    /// Reference temperature scaling the loss back to a stable magnitude.
    pub tau_base: f64,
    /// Weight of the contrastive term in the joint objective.
    pub lambda: f64,
    /// Cosine similarity on L2-normalized rows (default) vs raw dot products.
    pub use_normalized: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_base: 0.07,
            lambda: 0.5,
            use_normalized: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tau_base", self.tau_base)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Same-cluster positive-pair structure, stored as per-cluster member lists
/// (equivalent to the m x m boolean mask with zero diagonal).
#[derive(Clone, Debug)]
pub struct PairMask {
    labels: Vec<u32>,
    /// `members[c]` lists the items of cluster `c`, ascending.
    members: Vec<Vec<u32>>,
}

impl PairMask {
    pub fn m(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn cluster_members(&self, c: u32) -> &[u32] {
        &self.members[c as usize]
    }

    pub fn clusters(&self) -> impl Iterator<Item = &[u32]> {
        self.members.iter().map(|v| v.as_slice())
    }

    /// Number of positives of item `i` (its cluster size minus itself).
    pub fn n_positives(&self, i: u32) -> usize {
        self.members[self.labels[i as usize] as usize].len() - 1
    }

    /// True iff `i != j` and both items share a cluster.
    pub fn is_positive(&self, i: u32, j: u32) -> bool {
        i != j && self.labels[i as usize] == self.labels[j as usize]
    }

    /// Restriction of the mask to a subset of items (dense re-indexed in the
    /// subset's order). Used when the contrastive term runs on an item
    /// subsample.
    pub fn restrict(&self, items: &[u32]) -> PairMask {
        let labels: Vec<u32> = items.iter().map(|&i| self.labels[i as usize]).collect();
        let k = self.members.len();
        PairMask {
            members: group_by_label(&labels, k),
            labels,
        }
    }
}

/// Expands a cluster assignment into the positive-pair mask.
pub fn build_mask(assign: &ClusterAssignment) -> Result<PairMask> {
    assign.check()?;
    Ok(PairMask {
        members: group_by_label(&assign.labels, assign.k),
        labels: assign.labels.clone(),
    })
}

fn group_by_label(labels: &[u32], k: usize) -> Vec<Vec<u32>> {
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l as usize].push(i as u32);
    }
    members
}

/// Coverage-weighted aggregation: each item's global row is the mean over the
/// clients whose trained-flag for that item is set; items nobody touched keep
/// their previous global row bitwise.
pub fn aggregate(
    tables: &[EmbeddingTable],
    coverage: &[Vec<bool>],
    previous_global: &EmbeddingTable,
) -> Result<EmbeddingTable> {
    let (m, d) = check_same_dims(tables)?;
    if previous_global.n_items() != m || previous_global.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "previous global is {} x {}, uploads are {m} x {d}",
            previous_global.n_items(),
            previous_global.dim()
        )));
    }
    if coverage.len() != tables.len() || coverage.iter().any(|c| c.len() != m) {
        return Err(Error::ShapeMismatch(
            "coverage flags do not match upload shapes".into(),
        ));
    }
    let mut out = EmbeddingTable::zeros(m, d)?;
    let mut sum = vec![0.0f64; d];
    for item in 0..m {
        sum.fill(0.0);
        let mut count = 0u32;
        for (table, cov) in tables.iter().zip(coverage) {
            if cov[item] {
                for (s, v) in sum.iter_mut().zip(table.row(item)) {
                    *s += v;
                }
                count += 1;
            }
        }
        let row = out.row_mut(item);
        if count == 0 {
            row.copy_from_slice(previous_global.row(item));
        } else {
            for (r, s) in row.iter_mut().zip(&sum) {
                *r = s / f64::from(count);
            }
        }
    }
    Ok(out)
}

/// Literal unweighted mean over all uploaded tables.
pub fn aggregate_plain_mean(tables: &[EmbeddingTable]) -> Result<EmbeddingTable> {
    let (m, d) = check_same_dims(tables)?;
    let mut out = EmbeddingTable::zeros(m, d)?;
    let n = tables.len() as f64;
    for table in tables {
        for (o, v) in out.values_mut().iter_mut().zip(table.values()) {
            *o += v;
        }
    }
    for o in out.values_mut() {
        *o /= n;
    }
    Ok(out)
}

fn check_same_dims(tables: &[EmbeddingTable]) -> Result<(usize, usize)> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidParameter("aggregate needs at least one table".into()))?;
    let (m, d) = (first.n_items(), first.dim());
    for t in tables {
        if t.n_items() != m || t.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "upload is {} x {}, expected {m} x {d}",
                t.n_items(),
                t.dim()
            )));
        }
    }
    Ok((m, d))
}

/// Seeded k-means (k-means++ init, Lloyd iterations, squared-Euclidean
/// distance). Ties in nearest-centroid go to the lowest cluster index; empty
/// clusters are re-seeded with the point farthest from its own centroid, so
/// every cluster id in `[0, k)` ends up populated.
pub fn kmeans(
    global: &EmbeddingTable,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterAssignment> {
    kmeans_with_trace(global, k, seed, max_iters, tol).map(|(a, _)| a)
}

/// As [`kmeans`], also returning the inertia measured at every assignment
/// pass (non-increasing by construction; violating that is a numeric error).
pub fn kmeans_with_trace(
    global: &EmbeddingTable,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterAssignment, Vec<f64>)> {
    let m = global.n_items();
    let d = global.dim();
    if k == 0 || k > m {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must be in [1, {m}]"
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
    }
    if !tol.is_finite() || tol < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "tol must be finite and >= 0, got {tol}"
        )));
    }
    global.check_finite()?;

    let mut rng = derive_rng(seed, &[purpose::KMEANS]);
    let mut centroids = kmeans_pp_init(global, k, &mut rng)?;
    let mut trace = Vec::new();
    let mut labels = vec![0u32; m];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..max_iters {
        let inertia = assign_points(global, &mut centroids, &mut labels)?;
        check_monotone(inertia, prev_inertia)?;
        prev_inertia = inertia;
        trace.push(inertia);

        let new_centroids = cluster_means(global, &labels, k, d)?;
        let shift = max_centroid_shift(&centroids, &new_centroids);
        centroids = new_centroids;
        if shift < tol {
            break;
        }
    }
    // Labels must describe the final centroids, so run one closing pass.
    let inertia = assign_points(global, &mut centroids, &mut labels)?;
    check_monotone(inertia, prev_inertia)?;
    trace.push(inertia);
    Ok((
        ClusterAssignment {
            labels,
            centroids: Some(centroids),
            k,
            inertia,
        },
        trace,
    ))
}

fn kmeans_pp_init<R: Rng>(global: &EmbeddingTable, k: usize, rng: &mut R) -> Result<EmbeddingTable> {
    let m = global.n_items();
    let d = global.dim();
    let mut centroids = EmbeddingTable::zeros(k, d)?;
    let first = rng.gen_range(0..m);
    centroids.row_mut(0).copy_from_slice(global.row(first));
    let mut d2: Vec<f64> = (0..m)
        .map(|i| dist2(global.row(i), global.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // Every point coincides with a chosen center; fall back to uniform.
            rng.gen_range(0..m)
        } else {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.row_mut(c).copy_from_slice(global.row(pick));
        for i in 0..m {
            let dist = dist2(global.row(i), global.row(pick));
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
    }
    Ok(centroids)
}

/// Assigns every point to its nearest centroid (ties -> lowest cluster id),
/// repairs empty clusters, and returns the resulting inertia.
fn assign_points(
    global: &EmbeddingTable,
    centroids: &mut EmbeddingTable,
    labels: &mut [u32],
) -> Result<f64> {
    let m = global.n_items();
    let k = centroids.n_items();
    let mut point_d2 = vec![0.0f64; m];
    let mut counts = vec![0usize; k];
    for i in 0..m {
        let row = global.row(i);
        let mut best = 0u32;
        let mut best_d2 = dist2(row, centroids.row(0));
        for c in 1..k {
            let dist = dist2(row, centroids.row(c));
            if dist < best_d2 {
                best_d2 = dist;
                best = c as u32;
            }
        }
        labels[i] = best;
        point_d2[i] = best_d2;
        counts[best as usize] += 1;
    }
    let mut inertia: f64 = point_d2.iter().sum();
    // Re-seed empty clusters with the farthest point from its centroid,
    // restricted to donor clusters that keep at least one member. Each move
    // zeroes that point's distance, so inertia only decreases.
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        let mut donor_d2 = f64::NEG_INFINITY;
        for i in 0..m {
            if counts[labels[i] as usize] > 1 && point_d2[i] > donor_d2 {
                donor_d2 = point_d2[i];
                donor = Some(i);
            }
        }
        let i = donor.ok_or_else(|| {
            Error::Numeric(format!("cannot repopulate empty cluster {c}"))
        })?;
        counts[labels[i] as usize] -= 1;
        counts[c] += 1;
        labels[i] = c as u32;
        centroids.row_mut(c).copy_from_slice(global.row(i));
        inertia -= point_d2[i];
        point_d2[i] = 0.0;
    }
    if !inertia.is_finite() || inertia < 0.0 {
        return Err(Error::Numeric(format!("inertia degenerated to {inertia}")));
    }
    Ok(inertia)
}

fn cluster_means(
    global: &EmbeddingTable,
    labels: &[u32],
    k: usize,
    d: usize,
) -> Result<EmbeddingTable> {
    let mut sums = EmbeddingTable::zeros(k, d)?;
    let mut counts = vec![0u32; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l as usize] += 1;
        let row = sums.row_mut(l as usize);
        for (s, v) in row.iter_mut().zip(global.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        let n = f64::from(counts[c].max(1));
        for v in sums.row_mut(c) {
            *v /= n;
        }
    }
    Ok(sums)
}

fn max_centroid_shift(old: &EmbeddingTable, new: &EmbeddingTable) -> f64 {
    old.rows()
        .zip(new.rows())
        .map(|(a, b)| dist2(a, b).sqrt())
        .fold(0.0, f64::max)
}

fn check_monotone(inertia: f64, prev: f64) -> Result<()> {
    let slack = 1e-9 * (1.0 + prev.abs());
    if prev.is_finite() && inertia > prev + slack {
        return Err(Error::Numeric(format!(
            "inertia increased across Lloyd iterations: {prev} -> {inertia}"
        )));
    }
    Ok(())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let diff = x - y;
            diff * diff
        })
        .sum()
}

/// i.i.d. uniform labels over `[0, k)` — the control arm that keeps the label
/// broadcast's bytes and shape but destroys its information content.
pub fn random_labels(m: usize, k: usize, seed: u64) -> ClusterAssignment {
    assert!(m >= 1 && k >= 1, "random_labels needs m >= 1 and k >= 1");
    let mut rng = derive_rng(seed, &[purpose::RANDOM_LABELS]);
    let labels = (0..m).map(|_| rng.gen_range(0..k as u32)).collect();
    ClusterAssignment {
        labels,
        centroids: None,
        k,
        inertia: 0.0,
    }
}

/// Byte width of one label on the wire: 1 while `k` fits in a byte, else 2.
pub fn label_bytes_per_item(k: usize) -> u64 {
    if k <= 256 {
        1
    } else {
        2
    }
}

/// Wire form of the broadcast: a length-m array of u8 when `k <= 256`,
/// otherwise of little-endian u16. This byte count is exactly what the
/// communication ledger charges per label download.
pub fn encode_labels(assign: &ClusterAssignment) -> Result<Vec<u8>> {
    assign.check()?;
    if assign.k <= 256 {
        Ok(assign.labels.iter().map(|&l| l as u8).collect())
    } else if assign.k <= 65536 {
        let mut out = Vec::with_capacity(assign.labels.len() * 2);
        for &l in &assign.labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
        Ok(out)
    } else {
        Err(Error::InvalidParameter(format!(
            "k = {} exceeds the 16-bit label wire format",
            assign.k
        )))
    }
}

pub fn decode_labels(bytes: &[u8], m: usize, k: usize) -> Result<Vec<u32>> {
    let width = label_bytes_per_item(k) as usize;
    if bytes.len() != m * width {
        return Err(Error::Format(format!(
            "label payload is {} bytes, expected {} for m = {m}, k = {k}",
            bytes.len(),
            m * width
        )));
    }
    let labels: Vec<u32> = if width == 1 {
        bytes.iter().map(|&b| u32::from(b)).collect()
    } else {
        bytes
            .chunks_exact(2)
            .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect()
    };
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Format(format!("decoded label {bad} >= k = {k}")));
    }
    Ok(labels)
}

/// Diagnostic k x d centroid dump (never part of the broadcast).
pub fn write_centroids_csv<W: Write>(assign: &ClusterAssignment, w: W) -> Result<()> {
    match &assign.centroids {
        Some(c) => c.write_csv(w),
        None => Err(Error::InvalidParameter(
            "assignment has no centroids to dump".into(),
        )),
    }
}

/// Supervised contrastive loss over the pair mask:
///
/// with `z_i = e_i / ||e_i||` (or raw rows when `use_normalized` is off) and
/// `t_ij = (z_i . z_j) / tau`,
///
/// `Omega(i) = (1/n_i) * sum_{j in P(i)} [ t_ij - ln sum_{l != i} exp(t_il) ]`
///
/// for items with `n_i = |P(i)| > 0` positives, else `Omega(i) = 0`, and
///
/// `L = -(tau / tau_base) * (1/m) * sum_i Omega(i)`.
///
/// The log-sum-exp uses per-row max subtraction for stability.
pub fn contrastive_loss(table: &EmbeddingTable, mask: &PairMask, cfg: &ContrastiveConfig) -> Result<f64> {
    contrastive_eval(table, mask, cfg, false).map(|(loss, _)| loss)
}

/// Exact gradient of [`contrastive_loss`] with respect to every embedding
/// row, including the normalization Jacobian when `use_normalized` is on.
pub fn contrastive_gradients(
    table: &EmbeddingTable,
    mask: &PairMask,
    cfg: &ContrastiveConfig,
) -> Result<SparseRows> {
    contrastive_eval(table, mask, cfg, true).map(|(_, grad)| grad.expect("gradient requested"))
}

/// Loss and gradient in one pass (the similarity and softmax work dominates
/// and is shared).
pub fn contrastive_loss_and_gradients(
    table: &EmbeddingTable,
    mask: &PairMask,
    cfg: &ContrastiveConfig,
) -> Result<(f64, SparseRows)> {
    contrastive_eval(table, mask, cfg, true).map(|(loss, grad)| (loss, grad.expect("gradient requested")))
}

fn contrastive_eval(
    table: &EmbeddingTable,
    mask: &PairMask,
    cfg: &ContrastiveConfig,
    want_grad: bool,
) -> Result<(f64, Option<SparseRows>)> {
    cfg.validate()?;
    let m = table.n_items();
    let d = table.dim();
    if m < 2 {
        return Err(Error::InvalidParameter(
            "contrastive term needs at least 2 items".into(),
        ));
    }
    if mask.m() != m {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} items, table has {m}",
            mask.m()
        )));
    }

    // z: similarity-space rows; norms saved for the backward Jacobian.
    let mut z = table.values().to_vec();
    let mut norms = vec![1.0f64; m];
    if cfg.use_normalized {
        for i in 0..m {
            let row = &mut z[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::Numeric(format!(
                    "cannot normalize embedding row {i} with norm {norm}"
                )));
            }
            norms[i] = norm;
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    // Pairwise logits t_ij = (z_i . z_j) / tau, symmetric, diagonal unused.
    let mut t = vec![0.0f64; m * m];
    for i in 0..m {
        let zi = &z[i * d..(i + 1) * d];
        for j in (i + 1)..m {
            let zj = &z[j * d..(j + 1) * d];
            let s: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
            let logit = s / cfg.tau;
            t[i * m + j] = logit;
            t[j * m + i] = logit;
        }
    }

    // Per-row softmax over l != i with max subtraction. `ex` reuses the logit
    // buffer in place: after this loop ex[i*m+j] = exp(t_ij - rowmax_i) with a
    // zero diagonal, and lse[i] = ln sum_{l != i} exp(t_il).
    let mut rowmax = vec![f64::NEG_INFINITY; m];
    for i in 0..m {
        for j in 0..m {
            if j != i && t[i * m + j] > rowmax[i] {
                rowmax[i] = t[i * m + j];
            }
        }
    }
    let mut loss_pairs = 0.0f64; // sum over i of (1/n_i) sum_{j in P(i)} t_ij
    let mut gated_lse_sum = 0.0f64; // sum over gated i of lse_i
    // Pair term first, while `t` still holds the raw logits.
    for members in mask.clusters() {
        if members.len() < 2 {
            continue;
        }
        let n_i = (members.len() - 1) as f64;
        for &i in members {
            let i = i as usize;
            let mut s = 0.0;
            for &j in members {
                let j = j as usize;
                if j != i {
                    s += t[i * m + j];
                }
            }
            loss_pairs += s / n_i;
        }
    }
    let mut ex = t;
    let mut denom = vec![0.0f64; m];
    for i in 0..m {
        let row = &mut ex[i * m..(i + 1) * m];
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j == i {
                *v = 0.0;
            } else {
                *v = (*v - rowmax[i]).exp();
                sum += *v;
            }
        }
        denom[i] = sum;
    }
    for members in mask.clusters() {
        if members.len() < 2 {
            continue;
        }
        for &i in members {
            let i = i as usize;
            gated_lse_sum += rowmax[i] + denom[i].ln();
        }
    }
    // Each gated i subtracts lse_i once per positive, averaged by 1/n_i:
    // that is exactly one lse_i per gated item.
    let sum_omega = loss_pairs - gated_lse_sum;
    let scale = cfg.tau / (cfg.tau_base * m as f64);
    let loss = -scale * sum_omega;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {loss}")));
    }
    if !want_grad {
        return Ok((loss, None));
    }

    // d L / d t_ab = -(tau/tau_base)(1/m) * gate_a * (M_ab / n_a - p_ab)
    // with p_ab = softmax over row a. Through t = s/tau the tau cancels:
    // G_ab = -(1/(tau_base m)) gate_a (M_ab/n_a - p_ab), and
    // grad_z_a = sum_b (G_ab + G_ba) z_b. The mask part telescopes to
    // 2 (cluster_sum_a - z_a) / n_a because n_b = n_a inside a cluster.
    let inv_scale = 1.0 / (cfg.tau_base * m as f64);
    let mut grad_z = vec![0.0f64; m * d];

    // Mask (pull) part.
    for members in mask.clusters() {
        if members.len() < 2 {
            continue;
        }
        let n_i = (members.len() - 1) as f64;
        let mut cluster_sum = vec![0.0f64; d];
        for &i in members {
            let zi = &z[i as usize * d..(i as usize + 1) * d];
            for (s, v) in cluster_sum.iter_mut().zip(zi) {
                *s += v;
            }
        }
        for &i in members {
            let i = i as usize;
            let zi = &z[i * d..(i + 1) * d];
            let g = &mut grad_z[i * d..(i + 1) * d];
            for ((gv, &cs), &zv) in g.iter_mut().zip(&cluster_sum).zip(zi) {
                *gv -= inv_scale * 2.0 * (cs - zv) / n_i;
            }
        }
    }

    // Softmax (push) part: grad_z_a += inv_scale * sum_b w_ab z_b with
    // w_ab = gate_a p_ab + gate_b p_ba. Row sweep covers the first term,
    // column sweep the second; both in fixed index order.
    let gate: Vec<bool> = (0..m).map(|i| mask.n_positives(i as u32) > 0).collect();
    for a in 0..m {
        if !gate[a] {
            continue;
        }
        let coef = inv_scale / denom[a];
        let row = &ex[a * m..(a + 1) * m];
        let g = &mut grad_z[a * d..(a + 1) * d];
        for b in 0..m {
            if b == a {
                continue;
            }
            let w = coef * row[b];
            let zb = &z[b * d..(b + 1) * d];
            for (gv, &zv) in g.iter_mut().zip(zb) {
                *gv += w * zv;
            }
        }
    }
    for b in 0..m {
        if !gate[b] {
            continue;
        }
        let coef = inv_scale / denom[b];
        let row = &ex[b * m..(b + 1) * m];
        let zb: Vec<f64> = z[b * d..(b + 1) * d].to_vec();
        for a in 0..m {
            if a == b {
                continue;
            }
            let w = coef * row[a];
            let g = &mut grad_z[a * d..(a + 1) * d];
            for (gv, &zv) in g.iter_mut().zip(&zb) {
                *gv += w * zv;
            }
        }
    }

    // Back through the normalization: for z = e/||e||,
    // grad_e = (grad_z - (grad_z . z) z) / ||e||.
    let mut values = grad_z;
    if cfg.use_normalized {
        for i in 0..m {
            let zi = &z[i * d..(i + 1) * d];
            let g = &mut values[i * d..(i + 1) * d];
            let proj: f64 = g.iter().zip(zi).map(|(a, b)| a * b).sum();
            for (gv, &zv) in g.iter_mut().zip(zi) {
                *gv = (*gv - proj * zv) / norms[i];
            }
        }
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite contrastive gradient {v}")));
    }
    let items: Vec<u32> = (0..m as u32).collect();
    Ok((loss, Some(SparseRows::from_sorted(d, items, values))))
}
