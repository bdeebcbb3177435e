//! Per-client recommendation model: a private item-embedding table plus a
//! linear score head squashed through a sigmoid, trained with binary
//! cross-entropy over implicit-feedback positives and sampled negatives.
//!
//! Tables are plain row-major `f64` matrices. Gradients over a mini-batch are
//! sparse (only the batch's items have non-zero embedding rows), so they are
//! carried as [`SparseRows`] and applied by one fused [`sgd_step`] that can
//! fold in a second gradient source (the contrastive regularizer) with its
//! own learning rate.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic prefix of the binary embedding-table file format.
pub const TABLE_MAGIC: [u8; 8] = *b"CGFRTBL\0";

/// Loss-side floor keeping `ln` arguments away from zero. Gradients use the
/// exact sigmoid residual and need no clamping.
const PROB_FLOOR: f64 = 1e-12;

/// Dense `m x d` item-embedding matrix, row per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    m: usize,
    d: usize,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(m: usize, d: usize) -> Result<Self> {
        check_dims(m, d)?;
        Ok(Self {
            m,
            d,
            values: vec![0.0; m * d],
        })
    }

    /// Builds a table from row-major values; `values.len()` must equal `m * d`.
    pub fn from_rows(m: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(m, d)?;
        if values.len() != m * d {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a {m} x {d} table, got {}",
                m * d,
                values.len()
            )));
        }
        Ok(Self { m, d, values })
    }

    /// Seeded Gaussian init, entries ~ N(0, scale^2).
    pub fn random<R: Rng>(m: usize, d: usize, scale: f64, rng: &mut R) -> Result<Self> {
        check_dims(m, d)?;
        let normal = gaussian(scale)?;
        let values = (0..m * d).map(|_| normal.sample(rng)).collect();
        Ok(Self { m, d, values })
    }

    pub fn n_items(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Row view; panics if `item >= n_items` (callers validate indices at the
    /// operation boundary, same contract as slice indexing).
    pub fn row(&self, item: usize) -> &[f64] {
        &self.values[item * self.d..(item + 1) * self.d]
    }

    pub fn row_mut(&mut self, item: usize) -> &mut [f64] {
        &mut self.values[item * self.d..(item + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Errors with the offending position if any entry is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (idx, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite table entry {v} at row {}, col {}",
                    idx / self.d,
                    idx % self.d
                )));
            }
        }
        Ok(())
    }

    /// Binary form: 8-byte magic, `m` and `d` as little-endian u32, then
    /// `m * d` row-major f64 little-endian values. Round-trips bitwise.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let m = u32::try_from(self.m)
            .map_err(|_| Error::Format(format!("{} rows do not fit the u32 header", self.m)))?;
        let d = u32::try_from(self.d)
            .map_err(|_| Error::Format(format!("{} cols do not fit the u32 header", self.d)))?;
        w.write_all(&TABLE_MAGIC)?;
        w.write_all(&m.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if magic != TABLE_MAGIC {
            return Err(Error::Format("bad magic; not an embedding-table file".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let m = u32::from_le_bytes(word) as usize;
        read_exact(&mut r, &mut word)?;
        let d = u32::from_le_bytes(word) as usize;
        check_dims(m, d).map_err(|_| Error::Format(format!("bad header dims {m} x {d}")))?;
        let n = m
            .checked_mul(d)
            .ok_or_else(|| Error::Format("header dims overflow".into()))?;
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after table payload".into()));
        }
        let table = Self { m, d, values };
        table.check_finite()?;
        Ok(table)
    }

    /// CSV form for inspection: one row per line, full-precision values that
    /// parse back to the identical bits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut values = Vec::new();
        let mut d = 0usize;
        let mut m = 0usize;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: idx + 1,
                        msg: format!("bad float {tok:?}: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            if m == 0 {
                d = row.len();
            } else if row.len() != d {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("row has {} values, expected {d}", row.len()),
                });
            }
            values.extend(row);
            m += 1;
        }
        let table = Self::from_rows(m, d, values)
            .map_err(|e| Error::Format(format!("empty or malformed CSV table: {e}")))?;
        table.check_finite()?;
        Ok(table)
    }
}

/// Linear score head; the predicted relevance is `sigmoid(w . e_item)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHead {
    weights: Vec<f64>,
}

impl ScoreHead {
    pub fn zeros(d: usize) -> Result<Self> {
        check_dims(1, d)?;
        Ok(Self {
            weights: vec![0.0; d],
        })
    }

    pub fn random<R: Rng>(d: usize, scale: f64, rng: &mut R) -> Result<Self> {
        check_dims(1, d)?;
        let normal = gaussian(scale)?;
        Ok(Self {
            weights: (0..d).map(|_| normal.sample(rng)).collect(),
        })
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("score head must have dim >= 1".into()));
        }
        if let Some(v) = weights.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite head weight {v}")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Mini-batch of (item, label) pairs; `true` marks an observed positive.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    items: Vec<u32>,
    labels: Vec<bool>,
}

impl TrainBatch {
    pub fn new(items: Vec<u32>, labels: Vec<bool>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidParameter("empty training batch".into()));
        }
        if items.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} items but {} labels",
                items.len(),
                labels.len()
            )));
        }
        Ok(Self { items, labels })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, bool)> + '_ {
        self.items.iter().copied().zip(self.labels.iter().copied())
    }

    fn check_items(&self, m: usize) -> Result<()> {
        for &item in &self.items {
            if item as usize >= m {
                return Err(Error::IndexOutOfRange {
                    what: "batch item",
                    index: item as usize,
                    limit: m,
                });
            }
        }
        Ok(())
    }
}

/// Separate step sizes: `eta` for the score head, `eta_prime` for embedding rows.
#[derive(Clone, Copy, Debug)]
pub struct LearningRates {
    pub eta: f64,
    pub eta_prime: f64,
}

impl LearningRates {
    pub fn new(eta: f64, eta_prime: f64) -> Result<Self> {
        for (name, v) in [("eta", eta), ("eta_prime", eta_prime)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "learning rate {name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(Self { eta, eta_prime })
    }
}

/// Sparse set of embedding-row gradients: `items` are strictly increasing,
/// `values` holds one `d`-vector per item in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    d: usize,
    items: Vec<u32>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn empty(d: usize) -> Self {
        Self {
            d,
            items: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from (item, row) pairs; items need not be sorted but must be
    /// unique and rows must all have length `d`.
    pub fn from_pairs(d: usize, mut pairs: Vec<(u32, Vec<f64>)>) -> Result<Self> {
        pairs.sort_by_key(|(item, _)| *item);
        let mut items = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len() * d);
        for (item, row) in pairs {
            if row.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "row for item {item} has dim {}, expected {d}",
                    row.len()
                )));
            }
            if items.last() == Some(&item) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate item {item} in sparse rows"
                )));
            }
            items.push(item);
            values.extend(row);
        }
        Ok(Self { d, items, values })
    }

    pub(crate) fn from_sorted(d: usize, items: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert!(items.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(items.len() * d, values.len());
        Self { d, items, values }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.items
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.d.max(1)))
    }

    pub fn get(&self, item: u32) -> Option<&[f64]> {
        let idx = self.items.binary_search(&item).ok()?;
        Some(&self.values[idx * self.d..(idx + 1) * self.d])
    }

    /// Multiplies every entry in place (used to weight the contrastive term).
    pub fn scaled(mut self, factor: f64) -> Self {
        for v in &mut self.values {
            *v *= factor;
        }
        self
    }

    fn check(&self, d: usize, m: usize, what: &str) -> Result<()> {
        if self.d != d {
            return Err(Error::ShapeMismatch(format!(
                "{what} has dim {}, model has dim {d}",
                self.d
            )));
        }
        if let Some(&item) = self.items.iter().find(|&&i| i as usize >= m) {
            return Err(Error::IndexOutOfRange {
                what: "gradient item",
                index: item as usize,
                limit: m,
            });
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {v} in {what}")));
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Predicted relevance of `item` for this client, `sigmoid(w . e_item)`.
pub fn predict(head: &ScoreHead, table: &EmbeddingTable, item: u32) -> Result<f64> {
    check_model(head, table)?;
    if item as usize >= table.n_items() {
        return Err(Error::IndexOutOfRange {
            what: "item",
            index: item as usize,
            limit: table.n_items(),
        });
    }
    Ok(sigmoid(dot(head.weights(), table.row(item as usize))))
}

/// Unnormalized binary cross-entropy over the batch:
/// `-sum_i [ r_i ln p_i + (1 - r_i) ln (1 - p_i) ]` with log arguments
/// floored at 1e-12 so saturated predictions stay finite.
pub fn bce_loss(head: &ScoreHead, table: &EmbeddingTable, batch: &TrainBatch) -> Result<f64> {
    check_model(head, table)?;
    batch.check_items(table.n_items())?;
    let mut loss = 0.0;
    for (item, positive) in batch.iter() {
        let p = sigmoid(dot(head.weights(), table.row(item as usize)))
            .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss -= if positive { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(loss)
}

/// Exact batch gradients of [`bce_loss`]: per sample the residual is
/// `sigmoid(w . e) - r`, contributing `residual * e` to the head gradient and
/// `residual * w` to that item's embedding row. Rows of items appearing in
/// several samples accumulate in batch order, so the result is deterministic.
pub fn bce_gradients(
    head: &ScoreHead,
    table: &EmbeddingTable,
    batch: &TrainBatch,
) -> Result<(Vec<f64>, SparseRows)> {
    check_model(head, table)?;
    batch.check_items(table.n_items())?;
    let d = table.dim();
    let w = head.weights();
    let mut grad_w = vec![0.0; d];
    let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (item, positive) in batch.iter() {
        let e = table.row(item as usize);
        let residual = sigmoid(dot(w, e)) - f64::from(u8::from(positive));
        for k in 0..d {
            grad_w[k] += residual * e[k];
        }
        let row = acc.entry(item).or_insert_with(|| vec![0.0; d]);
        for k in 0..d {
            row[k] += residual * w[k];
        }
    }
    let mut items = Vec::with_capacity(acc.len());
    let mut values = Vec::with_capacity(acc.len() * d);
    for (item, row) in acc {
        items.push(item);
        values.extend(row);
    }
    Ok((grad_w, SparseRows::from_sorted(d, items, values)))
}

/// Fused SGD update: `w -= eta * grad_w` and, for every item present in
/// either sparse source, `e_item -= eta_prime * (grad_items + extra_items)`.
/// `extra_items` carries the weighted contrastive gradient when clustering
/// labels are available. All inputs are validated finite before any state is
/// touched, and updated rows are re-checked so tables never hold NaN/inf.
pub fn sgd_step(
    head: &mut ScoreHead,
    table: &mut EmbeddingTable,
    grad_w: &[f64],
    grad_items: &SparseRows,
    extra_items: Option<&SparseRows>,
    rates: &LearningRates,
) -> Result<()> {
    check_model(head, table)?;
    let d = table.dim();
    let m = table.n_items();
    if grad_w.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "grad_w has dim {}, model has dim {d}",
            grad_w.len()
        )));
    }
    if let Some(v) = grad_w.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value {v} in grad_w")));
    }
    grad_items.check(d, m, "embedding gradient")?;
    let empty = SparseRows::empty(d);
    let extra = match extra_items {
        Some(s) => {
            s.check(d, m, "extra embedding gradient")?;
            s
        }
        None => &empty,
    };

    for (wk, gk) in head.weights.iter_mut().zip(grad_w) {
        *wk -= rates.eta * gk;
    }
    if let Some(v) = head.weights.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("head weight overflowed to {v}")));
    }

    // Merge the two sorted sparse sources so each touched row is written once.
    let (mut i, mut j) = (0usize, 0usize);
    while i < grad_items.len() || j < extra.len() {
        let ia = grad_items.items.get(i).copied();
        let ib = extra.items.get(j).copied();
        let item = match (ia, ib) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!(),
        };
        let row = table.row_mut(item as usize);
        if ia == Some(item) {
            let g = &grad_items.values[i * d..(i + 1) * d];
            for k in 0..d {
                row[k] -= rates.eta_prime * g[k];
            }
            i += 1;
        }
        if ib == Some(item) {
            let g = &extra.values[j * d..(j + 1) * d];
            for k in 0..d {
                row[k] -= rates.eta_prime * g[k];
            }
            j += 1;
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding row {item} overflowed to {v}"
            )));
        }
    }
    Ok(())
}

fn check_model(head: &ScoreHead, table: &EmbeddingTable) -> Result<()> {
    if head.dim() != table.dim() {
        return Err(Error::ShapeMismatch(format!(
            "head dim {} vs table dim {}",
            head.dim(),
            table.dim()
        )));
    }
    Ok(())
}

fn check_dims(m: usize, d: usize) -> Result<()> {
    if m == 0 || d == 0 {
        return Err(Error::InvalidParameter(format!(
            "table dims must be >= 1, got {m} x {d}"
        )));
    }
    Ok(())
}

fn gaussian(scale: f64) -> Result<Normal<f64>> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "init scale must be finite and > 0, got {scale}"
        )));
    }
    Normal::new(0.0, scale).map_err(|e| Error::InvalidParameter(e.to_string()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated table file".into())
        } else {
            Error::Io(e)
        }
    })
}
