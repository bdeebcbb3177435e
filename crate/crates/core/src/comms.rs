//! Exact communication-byte accounting.
//!
//! The ledger charges logical payload bytes only: an embedding table costs
//! `n_items * d * s_f` and a label vector `n_items * s_i`, with `s_f` the
//! wire float width (4 by default — training happens in f64 but tables ship
//! as float32) and `s_i` the per-label width. Headers and other metadata are
//! excluded so measured totals equal the closed-form predictions to the byte;
//! a separate framing counter keeps the excluded bytes honest.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::label_bytes_per_item;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadKind {
    EmbeddingTable,
    LabelVector,
}

/// Bytes moved during one federation round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundComms {
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

/// Per-round and cumulative transfer totals for one simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    s_f: u64,
    s_i: u64,
    rounds: Vec<RoundComms>,
    current: Option<RoundComms>,
    framing_bytes: u64,
}

impl CommLedger {
    pub fn new(s_f: u64, s_i: u64) -> Result<Self> {
        for (name, v) in [("s_f", s_f), ("s_i", s_i)] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        Ok(Self {
            s_f,
            s_i,
            rounds: Vec::new(),
            current: None,
            framing_bytes: 0,
        })
    }

    pub fn s_f(&self) -> u64 {
        self.s_f
    }

    pub fn s_i(&self) -> u64 {
        self.s_i
    }

    pub fn begin_round(&mut self) -> Result<()> {
        if self.current.is_some() {
            return Err(Error::Config("a ledger round is already open".into()));
        }
        self.current = Some(RoundComms::default());
        Ok(())
    }

    /// Adds one payload to the open round: `n_items * dim * s_f` bytes for an
    /// embedding table, `n_items * s_i` for a label vector (`dim` ignored).
    pub fn record_transfer(
        &mut self,
        direction: Direction,
        kind: PayloadKind,
        n_items: u64,
        dim: u64,
    ) -> Result<()> {
        let bytes = match kind {
            PayloadKind::EmbeddingTable => checked_product(&[n_items, dim, self.s_f])?,
            PayloadKind::LabelVector => checked_product(&[n_items, self.s_i])?,
        };
        let round = self
            .current
            .as_mut()
            .ok_or_else(|| Error::Config("no open ledger round".into()))?;
        let slot = match direction {
            Direction::Up => &mut round.upload_bytes,
            Direction::Down => &mut round.download_bytes,
        };
        *slot = slot
            .checked_add(bytes)
            .ok_or_else(|| Error::Numeric("ledger byte counter overflow".into()))?;
        Ok(())
    }

    /// Metadata bytes (coverage bitmaps, headers) — tracked, never mixed into
    /// payload totals.
    pub fn record_framing(&mut self, bytes: u64) {
        self.framing_bytes = self.framing_bytes.saturating_add(bytes);
    }

    pub fn end_round(&mut self) -> Result<RoundComms> {
        let round = self
            .current
            .take()
            .ok_or_else(|| Error::Config("no open ledger round".into()))?;
        self.rounds.push(round);
        Ok(round)
    }

    pub fn rounds(&self) -> &[RoundComms] {
        &self.rounds
    }

    pub fn total_upload_bytes(&self) -> u64 {
        self.rounds.iter().map(|r| r.upload_bytes).sum()
    }

    pub fn total_download_bytes(&self) -> u64 {
        self.rounds.iter().map(|r| r.download_bytes).sum()
    }

    pub fn framing_bytes(&self) -> u64 {
        self.framing_bytes
    }
}

/// Bytes to broadcast full embedding tables to every participant:
/// `n_participants * m * d * s_f`.
pub fn baseline_download_bytes(n_participants: u64, m: u64, d: u64, s_f: u64) -> Result<u64> {
    check_at_least_one(&[
        ("n_participants", n_participants),
        ("m", m),
        ("d", d),
        ("s_f", s_f),
    ])?;
    checked_product(&[n_participants, m, d, s_f])
}

/// Bytes to broadcast only cluster labels: `n_participants * m * s_i`.
pub fn ours_download_bytes(n_participants: u64, m: u64, s_i: u64) -> Result<u64> {
    check_at_least_one(&[("n_participants", n_participants), ("m", m), ("s_i", s_i)])?;
    checked_product(&[n_participants, m, s_i])
}

/// Download saving of the label broadcast over the table broadcast:
/// `1 - s_i / (d * s_f)`, defined only while that is positive.
pub fn reduction_rate(d: u64, s_f: u64, s_i: u64) -> Result<f64> {
    check_at_least_one(&[("d", d), ("s_f", s_f), ("s_i", s_i)])?;
    let denom = checked_product(&[d, s_f])?;
    if denom <= s_i {
        return Err(Error::InvalidParameter(format!(
            "d * s_f = {denom} must exceed s_i = {s_i} for a positive saving"
        )));
    }
    Ok(1.0 - s_i as f64 / denom as f64)
}

/// Per-label wire width actually charged for a run with `k` clusters: the
/// configured `s_i`, auto-promoted to 2 when the labels no longer fit a byte.
pub fn effective_label_bytes(s_i: u64, k: usize) -> u64 {
    s_i.max(label_bytes_per_item(k))
}

/// One row of the ledger CSV export.
#[derive(Clone, Debug)]
pub struct LedgerCsvRow<'a> {
    pub round: u32,
    pub mode: &'a str,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub baseline_download_bytes: u64,
    pub reduction: f64,
}

pub fn write_ledger_csv<'a, W, I>(mut w: W, rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = LedgerCsvRow<'a>>,
{
    writeln!(
        w,
        "round,mode,upload_bytes,download_bytes,baseline_download_bytes,reduction"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.round, r.mode, r.upload_bytes, r.download_bytes, r.baseline_download_bytes, r.reduction
        )?;
    }
    Ok(())
}

fn checked_product(factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::Numeric("byte count overflows u64".into()))
}

fn check_at_least_one(params: &[(&str, u64)]) -> Result<()> {
    for (name, v) in params {
        if *v == 0 {
            return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_bytes_known_values() {
        assert_eq!(baseline_download_bytes(10, 1682, 32, 4).unwrap(), 2_152_960);
        assert_eq!(baseline_download_bytes(1, 1, 1, 1).unwrap(), 1);
        let single = baseline_download_bytes(7, 100, 16, 4).unwrap();
        let double = baseline_download_bytes(7, 100, 32, 4).unwrap();
        assert_eq!(double, 2 * single);
        assert!(matches!(
            baseline_download_bytes(0, 1, 1, 1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            baseline_download_bytes(u64::MAX, 2, 1, 1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ours_bytes_known_values() {
        assert_eq!(ours_download_bytes(10, 1682, 1).unwrap(), 16_820);
        assert_eq!(ours_download_bytes(1, 1, 1).unwrap(), 1);
        assert!(ours_download_bytes(1, 0, 1).is_err());
    }

    #[test]
    fn reduction_rate_known_values() {
        // 1 - 1/128 exactly.
        assert_eq!(reduction_rate(32, 4, 1).unwrap(), 0.992_187_5);
        assert!(matches!(
            reduction_rate(1, 1, 1),
            Err(Error::InvalidParameter(_))
        ));
        let mut prev = 0.0;
        for d in [2u64, 4, 8, 16, 32] {
            let r = reduction_rate(d, 4, 1).unwrap();
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn record_transfer_charges_formula_bytes() {
        let mut ledger = CommLedger::new(4, 1).unwrap();
        ledger.begin_round().unwrap();
        // labels_only round with 5 participants, m = 100.
        for _ in 0..5 {
            ledger
                .record_transfer(Direction::Down, PayloadKind::LabelVector, 100, 1)
                .unwrap();
        }
        let round = ledger.end_round().unwrap();
        assert_eq!(round.download_bytes, 500);

        // embeddings_only round, d = 8.
        ledger.begin_round().unwrap();
        for _ in 0..5 {
            ledger
                .record_transfer(Direction::Down, PayloadKind::EmbeddingTable, 100, 8)
                .unwrap();
        }
        assert_eq!(ledger.end_round().unwrap().download_bytes, 16_000);

        // embeddings_and_labels round: strictly additive.
        ledger.begin_round().unwrap();
        for _ in 0..5 {
            ledger
                .record_transfer(Direction::Down, PayloadKind::EmbeddingTable, 100, 8)
                .unwrap();
            ledger
                .record_transfer(Direction::Down, PayloadKind::LabelVector, 100, 1)
                .unwrap();
        }
        assert_eq!(ledger.end_round().unwrap().download_bytes, 16_500);
        assert_eq!(ledger.total_download_bytes(), 33_000);
        assert_eq!(ledger.total_upload_bytes(), 0);
    }

    #[test]
    fn uploads_and_framing_are_separate() {
        let mut ledger = CommLedger::new(4, 1).unwrap();
        ledger.begin_round().unwrap();
        ledger
            .record_transfer(Direction::Up, PayloadKind::EmbeddingTable, 10, 2)
            .unwrap();
        ledger.record_framing(13);
        let round = ledger.end_round().unwrap();
        assert_eq!(round.upload_bytes, 80);
        assert_eq!(round.download_bytes, 0);
        assert_eq!(ledger.framing_bytes(), 13);
        assert_eq!(ledger.total_upload_bytes(), 80);
    }

    #[test]
    fn ledger_round_lifecycle_is_enforced() {
        let mut ledger = CommLedger::new(4, 1).unwrap();
        assert!(ledger
            .record_transfer(Direction::Up, PayloadKind::LabelVector, 1, 1)
            .is_err());
        assert!(ledger.end_round().is_err());
        ledger.begin_round().unwrap();
        assert!(ledger.begin_round().is_err());
    }

    #[test]
    fn label_width_promotes_past_256_clusters() {
        assert_eq!(effective_label_bytes(1, 10), 1);
        assert_eq!(effective_label_bytes(1, 256), 1);
        assert_eq!(effective_label_bytes(1, 257), 2);
        assert_eq!(effective_label_bytes(4, 257), 4);
    }

    #[test]
    fn csv_export_shape() {
        let rows = vec![LedgerCsvRow {
            round: 1,
            mode: "labels_only",
            upload_bytes: 100,
            download_bytes: 10,
            baseline_download_bytes: 1280,
            reduction: 0.9921875,
        }];
        let mut buf = Vec::new();
        write_ledger_csv(&mut buf, rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,mode,upload_bytes,download_bytes,baseline_download_bytes,reduction"
        );
        assert_eq!(lines.next().unwrap(), "1,labels_only,100,10,1280,0.9921875");
    }
}
