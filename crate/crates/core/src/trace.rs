//! Line-delimited event trace.
//!
//! One JSON object per line, fields in this order:
//!
//! | field          | meaning                                                        |
//! |----------------|----------------------------------------------------------------|
//! | `time`         | simulation time, seconds                                       |
//! | `seq`          | trace line number, strictly increasing from 0                  |
//! | `kind`         | e.g. `event.round_boundary`, `tx.final_ch`, `rx.data`, `debit.drain` |
//! | `src`          | originating node id or `null`                                  |
//! | `dst`          | destination node id, `"broadcast"`, or `null`                  |
//! | `outcome`      | `ok`, `lost_range`, `lost_channel`, `lost_dead`, `died`, `-`   |
//! | `energy_delta` | energy debited by this line, integer femtojoules               |
//!
//! Every nonzero ledger debit appears on exactly one line.

use std::io::{self, Write};

use serde::ser::{Serialize, Serializer};
use serde::Serialize as DeriveSerialize;

use crate::protocol::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    None,
    Node(NodeId),
    Broadcast,
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Endpoint::None => s.serialize_none(),
            Endpoint::Node(id) => s.serialize_u32(id.0),
            Endpoint::Broadcast => s.serialize_str("broadcast"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, DeriveSerialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    LostRange,
    LostChannel,
    LostDead,
    Died,
    #[serde(rename = "-")]
    None,
}

#[derive(Debug, Clone, PartialEq, DeriveSerialize)]
pub struct TraceRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: String,
    pub src: Option<NodeId>,
    pub dst: Endpoint,
    pub outcome: Outcome,
    pub energy_delta: u64,
}

/// Collects trace lines. Totals are kept even when recording is off.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    enabled: bool,
    records: Vec<TraceRecord>,
    next_seq: u64,
    energy_total: u128,
    debit_lines: u64,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, time: f64, kind: impl Into<String>, src: Option<NodeId>, dst: Endpoint, outcome: Outcome, energy_delta: u64) {
        let seq = self.next_seq;
        self.next_seq += 1;
        if energy_delta > 0 {
            self.energy_total += energy_delta as u128;
            self.debit_lines += 1;
        }
        if self.enabled {
            self.records.push(TraceRecord {
                time,
                seq,
                kind: kind.into(),
                src,
                dst,
                outcome,
                energy_delta,
            });
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> u64 {
        self.next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.next_seq == 0
    }

    /// Sum of `energy_delta` over all lines, femtojoules.
    pub fn energy_total_fj(&self) -> u128 {
        self.energy_total
    }

    /// Number of lines carrying a nonzero debit.
    pub fn debit_lines(&self) -> u64 {
        self.debit_lines
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_is_fixed() {
        let mut t = Trace::new(true);
        t.push(0.5, "tx.final_ch", Some(NodeId(3)), Endpoint::Broadcast, Outcome::Ok, 42);
        t.push(0.75, "event.round_boundary", None, Endpoint::None, Outcome::None, 0);
        let mut out = Vec::new();
        t.write_jsonl(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"time\":0.5,\"seq\":0,\"kind\":\"tx.final_ch\",\"src\":3,\"dst\":\"broadcast\",\"outcome\":\"ok\",\"energy_delta\":42}\n\
             {\"time\":0.75,\"seq\":1,\"kind\":\"event.round_boundary\",\"src\":null,\"dst\":null,\"outcome\":\"-\",\"energy_delta\":0}\n"
        );
        assert_eq!(t.energy_total_fj(), 42);
        assert_eq!(t.debit_lines(), 1);
    }

    #[test]
    fn disabled_trace_still_counts() {
        let mut t = Trace::new(false);
        t.push(0.0, "rx.data", Some(NodeId(1)), Endpoint::Node(NodeId(2)), Outcome::Ok, 7);
        assert!(t.records().is_empty());
        assert_eq!(t.len(), 1);
        assert_eq!(t.energy_total_fj(), 7);
    }
}
