//! Append-only run record, serialized as NDJSON (one record per line).
//!
//! Every line carries `sim_time`, `actor`, `action`, `tx_hash`,
//! `event_kind` and `outcome`. Block records additionally embed the full
//! block with receipts and events, and the first record embeds the public
//! genesis state; together they are enough to replay every balance without
//! touching the simulator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::caststore::{ContentId, ContentKind};
use crate::ledger::{Allocation, Block, Ledger};
use crate::symcrypto::digest;
use crate::types::{Address, EventKind, GasSchedule, TxHash};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("malformed trace at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

fn malformed(line: usize, reason: impl Into<String>) -> TraceError {
    TraceError::Malformed {
        line,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Ledger,
    Store,
    Author,
    Affiliate(u32),
    Victim(u32),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Ledger => f.write_str("ledger"),
            Actor::Store => f.write_str("store"),
            Actor::Author => f.write_str("author"),
            Actor::Affiliate(i) => write!(f, "affiliate:{i}"),
            Actor::Victim(i) => write!(f, "victim:{i}"),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let indexed = |rest: &str| {
            rest.parse::<u32>()
                .map_err(|e| format!("bad actor index in {s:?}: {e}"))
        };
        match s {
            "ledger" => Ok(Actor::Ledger),
            "store" => Ok(Actor::Store),
            "author" => Ok(Actor::Author),
            _ => {
                if let Some(rest) = s.strip_prefix("affiliate:") {
                    indexed(rest).map(Actor::Affiliate)
                } else if let Some(rest) = s.strip_prefix("victim:") {
                    indexed(rest).map(Actor::Victim)
                } else {
                    Err(format!("unknown actor {s:?}"))
                }
            }
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What an actor did. Every action is against the ledger, the content store
/// or the actor's own local state; there is no actor-to-actor channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Setup,
    MineBlock,
    Event,
    SubmitTx,
    Publish,
    Retrieve,
    Depart,
    Poll,
    Defer,
    Infect,
    ReadKey,
    Recover,
    Abandon,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupInfo {
    pub seed: u64,
    pub block_mean_s: f64,
    pub gas_schedule: GasSchedule,
    pub miner_sink: Address,
    pub genesis: Vec<Allocation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detail {
    Setup(SetupInfo),
    Block(Block),
    Content { id: ContentId, kind: ContentKind },
    Finish { blocks: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    /// Simulated seconds.
    pub sim_time: f64,
    pub actor: Actor,
    pub action: Action,
    pub tx_hash: Option<TxHash>,
    pub event_kind: Option<EventKind>,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Detail>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        time_ms: u64,
        actor: Actor,
        action: Action,
        tx_hash: Option<TxHash>,
        event_kind: Option<EventKind>,
        outcome: impl Into<String>,
        detail: Option<Detail>,
    ) {
        let seq = self.records.len() as u64;
        if let Some(last) = self.records.last() {
            debug_assert!(
                last.sim_time <= time_ms as f64 / 1000.0,
                "trace time went backwards"
            );
        }
        self.records.push(TraceRecord {
            seq,
            sim_time: time_ms as f64 / 1000.0,
            actor,
            action,
            tx_hash,
            event_kind,
            outcome: outcome.into(),
            detail,
        });
    }

    /// Appends a block record followed by one record per event.
    pub fn push_block(&mut self, block: &Block) {
        let events = block.receipts.iter().flat_map(|r| r.events.iter());
        let n_events = events.clone().count();
        self.push(
            block.timestamp_ms,
            Actor::Ledger,
            Action::MineBlock,
            None,
            None,
            format!(
                "block {} with {} txs, {} events",
                block.number,
                block.receipts.len(),
                n_events
            ),
            Some(Detail::Block(block.clone())),
        );
        for ev in events {
            self.push(
                block.timestamp_ms,
                Actor::Ledger,
                Action::Event,
                Some(ev.tx_hash),
                Some(ev.kind),
                format!("block {} index {}", ev.block_number, ev.index),
                None,
            );
        }
    }

    pub fn setup(&self) -> Option<&SetupInfo> {
        self.records.iter().find_map(|r| match &r.detail {
            Some(Detail::Setup(s)) => Some(s),
            _ => None,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.records.iter().filter_map(|r| match &r.detail {
            Some(Detail::Block(b)) => Some(b),
            _ => None,
        })
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("trace records serialize");
            out.push(b'\n');
        }
        out
    }

    /// SHA-256 of the NDJSON form.
    pub fn digest(&self) -> [u8; 32] {
        digest(&self.to_ndjson())
    }

    /// Parses and checks structure: a leading setup record, consecutive
    /// sequence numbers, non-decreasing time and a closing finish record.
    pub fn from_ndjson(text: &str) -> Result<Trace, TraceError> {
        let mut records: Vec<TraceRecord> = Vec::new();
        let mut last_line = 0;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            if line.trim().is_empty() {
                return Err(malformed(line_no, "empty line"));
            }
            let rec: TraceRecord =
                serde_json::from_str(line).map_err(|e| malformed(line_no, e.to_string()))?;
            if rec.seq != records.len() as u64 {
                return Err(malformed(
                    line_no,
                    format!("sequence {} where {} expected", rec.seq, records.len()),
                ));
            }
            if let Some(prev) = records.last() {
                if rec.sim_time < prev.sim_time {
                    return Err(malformed(line_no, "time goes backwards"));
                }
                if prev.action == Action::Finish {
                    return Err(malformed(line_no, "record after finish"));
                }
            } else if rec.action != Action::Setup || !matches!(rec.detail, Some(Detail::Setup(_))) {
                return Err(malformed(line_no, "first record must be setup"));
            }
            records.push(rec);
        }
        match records.last() {
            Some(r) if r.action == Action::Finish => Ok(Trace { records }),
            _ => Err(malformed(last_line + 1, "truncated: missing finish record")),
        }
    }

    pub fn finish(&mut self, time_ms: u64, blocks: u64) {
        self.push(
            time_ms,
            Actor::Ledger,
            Action::Finish,
            None,
            None,
            "ok",
            Some(Detail::Finish { blocks }),
        );
    }
}

/// Public trace of a ledger driven by hand: setup, every mined block, finish.
pub fn ledger_trace(ledger: &Ledger, seed: u64) -> Trace {
    let mut t = Trace::new();
    t.push(
        0,
        Actor::Ledger,
        Action::Setup,
        None,
        None,
        "ok",
        Some(Detail::Setup(SetupInfo {
            seed,
            block_mean_s: ledger.config().block_mean_s,
            gas_schedule: *ledger.gas_schedule(),
            miner_sink: ledger.miner_sink(),
            genesis: ledger.genesis().to_vec(),
        })),
    );
    for b in ledger.blocks().iter().skip(1) {
        t.push_block(b);
    }
    t.finish(ledger.head().timestamp_ms, ledger.head().number);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{LedgerConfig, Transaction};
    use crate::types::Wei;

    fn sample_trace() -> Trace {
        let mut l = Ledger::new(LedgerConfig::default(), 4).unwrap();
        let a = l.create_account(b"a", Wei(100)).unwrap();
        let b = l.create_account(b"b", Wei(0)).unwrap();
        l.submit_tx(Transaction::transfer(a, 0, b, Wei(3), Wei::ZERO))
            .unwrap();
        l.mine_next_block();
        l.mine_next_block();
        ledger_trace(&l, 4)
    }

    #[test]
    fn actor_strings_round_trip() {
        for a in [
            Actor::Ledger,
            Actor::Store,
            Actor::Author,
            Actor::Affiliate(3),
            Actor::Victim(12),
        ] {
            assert_eq!(a.to_string().parse::<Actor>().unwrap(), a);
        }
        assert!("victim:x".parse::<Actor>().is_err());
        assert!("mallory".parse::<Actor>().is_err());
    }

    #[test]
    fn ndjson_round_trips_and_is_stable() {
        let t = sample_trace();
        let text = String::from_utf8(t.to_ndjson()).unwrap();
        let back = Trace::from_ndjson(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_ndjson(), t.to_ndjson());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for field in [
            "sim_time",
            "actor",
            "action",
            "tx_hash",
            "event_kind",
            "outcome",
        ] {
            assert!(first.get(field).is_some(), "missing {field}");
        }
    }

    #[test]
    fn truncation_is_reported_with_line_number() {
        let text = String::from_utf8(sample_trace().to_ndjson()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Drop the finish record: detected one past the last line.
        let cut = lines[..lines.len() - 1].join("\n");
        assert_eq!(
            Trace::from_ndjson(&cut),
            Err(malformed(lines.len(), "truncated: missing finish record"))
        );
        // Cut mid-record: the partial line is reported.
        let partial = format!("{}\n{}", lines[0], &lines[1][..lines[1].len() / 2]);
        match Trace::from_ndjson(&partial) {
            Err(TraceError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_order_sequence() {
        let text = String::from_utf8(sample_trace().to_ndjson()).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        assert!(matches!(
            Trace::from_ndjson(&lines.join("\n")),
            Err(TraceError::Malformed { line: 2, .. })
        ));
    }
}
