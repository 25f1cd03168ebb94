//! Observer-side analysis of a run. Everything here works from the public
//! trace alone: the transaction graph, the cost model, affiliate revenue and
//! protocol milestones.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::escrow::{function, SecretPayload};
use crate::ledger::{Block, Event, TxTarget};
use crate::trace::{Trace, TraceError};
use crate::types::{Address, ContractId, EventKind, Gas, GasSchedule, SampleId, TxHash, Wei};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForensicsError {
    #[error(transparent)]
    MalformedTrace(#[from] TraceError),
    #[error("trace has no setup record")]
    NoSetup,
    #[error("trace contains no successful deployment")]
    NoDeployment,
    #[error("block {got} follows block {expected_prev}")]
    BlockGap { expected_prev: u64, got: u64 },
    #[error("balance of {address} goes negative in block {block}")]
    NegativeBalance { block: u64, address: Address },
    #[error("total supply changes in block {block}")]
    SupplyChanged { block: u64 },
    #[error("escrow balance of {contract} disagrees with its unsplit payments in block {block}")]
    EscrowMismatch { block: u64, contract: ContractId },
    #[error("split in block {block} does not add up to the paid amount")]
    BadSplit { block: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Author,
    Affiliate,
    Victim,
    Contract,
    MinerSink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeKind {
    Transfer,
    Deploy {
        contract: Option<ContractId>,
    },
    Call {
        function: String,
    },
    /// Contract payout produced by a call.
    Payout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Address,
    pub to: Option<Address>,
    pub tx_hash: TxHash,
    pub block: u64,
    pub kind: EdgeKind,
    pub value: Wei,
    pub fee: Wei,
    pub gas_used: Gas,
    pub succeeded: bool,
    /// Events emitted by the transaction; empty on payout edges.
    pub events: Vec<Event>,
}

impl Edge {
    pub fn is_primary(&self) -> bool {
        self.kind != EdgeKind::Payout
    }
}

/// Balances reconstructed from the trace, checked block by block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    pub genesis: BTreeMap<Address, Wei>,
    pub balances: BTreeMap<Address, Wei>,
    pub fees_paid: BTreeMap<Address, Wei>,
    pub total_supply: Wei,
    pub blocks: u64,
}

impl Replay {
    pub fn balance(&self, a: &Address) -> Wei {
        self.balances.get(a).copied().unwrap_or_default()
    }

    /// Final minus genesis balance; negative deltas come back as `(false, magnitude)`.
    pub fn delta(&self, a: &Address) -> (bool, Wei) {
        let start = self.genesis.get(a).copied().unwrap_or_default();
        let end = self.balance(a);
        if end >= start {
            (true, Wei(end.0 - start.0))
        } else {
            (false, Wei(start.0 - end.0))
        }
    }
}

fn credit(balances: &mut BTreeMap<Address, Wei>, a: Address, w: Wei) {
    let b = balances.entry(a).or_default();
    *b = b.checked_add(w).expect("bounded by supply");
}

fn debit(
    balances: &mut BTreeMap<Address, Wei>,
    a: Address,
    w: Wei,
    block: u64,
) -> Result<(), ForensicsError> {
    let b = balances.entry(a).or_default();
    *b = b
        .checked_sub(w)
        .ok_or(ForensicsError::NegativeBalance { block, address: a })?;
    Ok(())
}

/// Replays every balance from genesis through the trace's blocks, checking
/// supply conservation, split arithmetic and the escrow balance after each
/// block.
pub fn replay(trace: &Trace) -> Result<Replay, ForensicsError> {
    let setup = trace.setup().ok_or(ForensicsError::NoSetup)?;
    let mut balances: BTreeMap<Address, Wei> = BTreeMap::new();
    for a in &setup.genesis {
        credit(&mut balances, a.address, a.balance);
    }
    balances.entry(setup.miner_sink).or_default();
    let genesis = balances.clone();
    let supply: Wei = genesis.values().copied().sum();
    let mut fees_paid: BTreeMap<Address, Wei> = BTreeMap::new();
    let mut unsplit: BTreeMap<ContractId, Wei> = BTreeMap::new();
    let mut prev = 0u64;
    for block in trace.blocks() {
        if block.number != prev + 1 {
            return Err(ForensicsError::BlockGap {
                expected_prev: prev,
                got: block.number,
            });
        }
        prev = block.number;
        apply_block(
            block,
            setup.miner_sink,
            &mut balances,
            &mut fees_paid,
            &mut unsplit,
        )?;
        let total: Wei = balances.values().copied().sum();
        if total != supply {
            return Err(ForensicsError::SupplyChanged {
                block: block.number,
            });
        }
        for (contract, owed) in &unsplit {
            let held = balances
                .get(&contract.address())
                .copied()
                .unwrap_or_default();
            if held != *owed {
                return Err(ForensicsError::EscrowMismatch {
                    block: block.number,
                    contract: *contract,
                });
            }
        }
    }
    Ok(Replay {
        genesis,
        balances,
        fees_paid,
        total_supply: supply,
        blocks: prev,
    })
}

fn apply_block(
    block: &Block,
    sink: Address,
    balances: &mut BTreeMap<Address, Wei>,
    fees_paid: &mut BTreeMap<Address, Wei>,
    unsplit: &mut BTreeMap<ContractId, Wei>,
) -> Result<(), ForensicsError> {
    let n = block.number;
    for r in &block.receipts {
        let sender = r.tx.sender;
        debit(balances, sender, r.fee, n)?;
        credit(balances, sink, r.fee);
        credit(fees_paid, sender, r.fee);
        if let Some(c) = r.created_contract {
            unsplit.entry(c).or_default();
            balances.entry(c.address()).or_default();
        }
        if !r.succeeded() {
            continue;
        }
        let to = match &r.tx.target {
            TxTarget::Transfer { to } => Some(*to),
            TxTarget::ContractCall { contract, .. } => Some(contract.address()),
            TxTarget::Deploy { .. } => None,
        };
        if let Some(to) = to {
            debit(balances, sender, r.tx.value, n)?;
            credit(balances, to, r.tx.value);
        }
        if let TxTarget::ContractCall { contract, .. } = &r.tx.target {
            for p in &r.payouts {
                debit(balances, contract.address(), p.amount, n)?;
                credit(balances, p.to, p.amount);
            }
            for ev in &r.events {
                let owed = unsplit.entry(*contract).or_default();
                match ev.kind {
                    EventKind::RansomPaid => {
                        let amount = ev.attributes.wei("amount").unwrap_or_default();
                        *owed = owed.checked_add(amount).expect("bounded by supply");
                    }
                    EventKind::RansomSplit => {
                        let a = ev.attributes.wei("affiliate_amount").unwrap_or_default();
                        let b = ev.attributes.wei("author_amount").unwrap_or_default();
                        let amount = a
                            .checked_add(b)
                            .ok_or(ForensicsError::BadSplit { block: n })?;
                        let paid_out: Wei = r.payouts.iter().map(|p| p.amount).sum();
                        if paid_out != amount {
                            return Err(ForensicsError::BadSplit { block: n });
                        }
                        *owed = owed
                            .checked_sub(amount)
                            .ok_or(ForensicsError::BadSplit { block: n })?;
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionGraph {
    pub nodes: BTreeMap<Address, BTreeSet<Role>>,
    pub edges: Vec<Edge>,
    /// Deployer of each successfully created contract.
    pub contracts: BTreeMap<ContractId, Address>,
    pub gas_schedule: GasSchedule,
    pub miner_sink: Address,
    pub replay: Replay,
}

impl TransactionGraph {
    pub fn with_role(&self, role: Role) -> BTreeSet<Address> {
        self.nodes
            .iter()
            .filter(|(_, r)| r.contains(&role))
            .map(|(a, _)| *a)
            .collect()
    }

    pub fn primary_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.is_primary())
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.edges.iter().flat_map(|e| e.events.iter())
    }

    pub fn count_events(&self, kind: EventKind) -> u64 {
        self.events().filter(|e| e.kind == kind).count() as u64
    }

    /// The first deployer; the campaign author.
    pub fn author(&self) -> Option<Address> {
        self.contracts.values().next().copied()
    }
}

/// Builds the graph from the trace. Roles are structural: deployers are
/// authors, successful registrants are affiliates, successful payers are
/// victims.
pub fn build_graph(trace: &Trace) -> Result<TransactionGraph, ForensicsError> {
    let replay = replay(trace)?;
    let setup = trace.setup().ok_or(ForensicsError::NoSetup)?;
    let mut nodes: BTreeMap<Address, BTreeSet<Role>> = BTreeMap::new();
    nodes
        .entry(setup.miner_sink)
        .or_default()
        .insert(Role::MinerSink);
    let mut edges = Vec::new();
    let mut contracts = BTreeMap::new();
    for block in trace.blocks() {
        for r in &block.receipts {
            let sender = r.tx.sender;
            let ok = r.succeeded();
            nodes.entry(sender).or_default();
            let (to, kind) = match &r.tx.target {
                TxTarget::Transfer { to } => (Some(*to), EdgeKind::Transfer),
                TxTarget::Deploy { .. } => {
                    if let Some(c) = r.created_contract {
                        contracts.insert(c, sender);
                        nodes.entry(sender).or_default().insert(Role::Author);
                        nodes.entry(c.address()).or_default().insert(Role::Contract);
                    }
                    (
                        r.created_contract.map(ContractId::address),
                        EdgeKind::Deploy {
                            contract: r.created_contract,
                        },
                    )
                }
                TxTarget::ContractCall {
                    contract, function, ..
                } => {
                    if ok {
                        let role = match function.as_str() {
                            function::REGISTER_AFFILIATE => Some(Role::Affiliate),
                            function::PAY_RANSOM => Some(Role::Victim),
                            _ => None,
                        };
                        if let Some(role) = role {
                            nodes.entry(sender).or_default().insert(role);
                        }
                    }
                    (
                        Some(contract.address()),
                        EdgeKind::Call {
                            function: function.clone(),
                        },
                    )
                }
            };
            if let Some(to) = to {
                nodes.entry(to).or_default();
            }
            edges.push(Edge {
                from: sender,
                to,
                tx_hash: r.tx_hash,
                block: block.number,
                kind,
                value: if ok { r.tx.value } else { Wei::ZERO },
                fee: r.fee,
                gas_used: r.gas_used,
                succeeded: ok,
                events: r.events.clone(),
            });
            if let (TxTarget::ContractCall { contract, .. }, true) = (&r.tx.target, ok) {
                for p in &r.payouts {
                    nodes.entry(p.to).or_default();
                    edges.push(Edge {
                        from: contract.address(),
                        to: Some(p.to),
                        tx_hash: r.tx_hash,
                        block: block.number,
                        kind: EdgeKind::Payout,
                        value: p.amount,
                        fee: Wei::ZERO,
                        gas_used: 0,
                        succeeded: true,
                        events: Vec::new(),
                    });
                }
            }
        }
    }
    Ok(TransactionGraph {
        nodes,
        edges,
        contracts,
        gas_schedule: setup.gas_schedule,
        miner_sink: setup.miner_sink,
        replay,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub actor: String,
    pub operation: String,
    pub gas: Gas,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rho: u64,
    pub delta: u64,
    pub mu: u64,
    pub per_op_gas: GasSchedule,
    /// `deploy + set_pk*rho + set_sk*delta + split*mu`.
    pub total_gas: Gas,
    /// Gas actually charged to the author for the same operation kinds.
    pub metered_author_gas: Gas,
    pub gas_price: Wei,
    pub fiat_rate: f64,
    pub total_wei: Wei,
    pub total_ether: f64,
    pub total_fiat: f64,
    /// Gas borne by affiliates and victims, not part of `total_gas`.
    pub counterparty: Vec<CostLine>,
}

impl CostReport {
    /// One row per schedule entry: actor, operation, gas.
    pub fn table(&self) -> Vec<CostLine> {
        let s = &self.per_op_gas;
        let row = |actor: &str, op: &str, gas: Gas, count: u64| CostLine {
            actor: actor.to_owned(),
            operation: op.to_owned(),
            gas,
            count,
        };
        let count = |op: &str| {
            self.counterparty
                .iter()
                .find(|l| l.operation == op)
                .map_or(0, |l| l.count)
        };
        vec![
            row("Author", "deploy", s.deploy, 1),
            row("Author", function::SET_SAMPLE_PK, s.set_pk, self.rho),
            row("Author", function::SET_SAMPLE_SK, s.set_sk, self.delta),
            row("Author", function::SPLIT_RANSOM, s.split, self.mu),
            row(
                "Affiliate",
                function::REGISTER_AFFILIATE,
                s.register,
                count(function::REGISTER_AFFILIATE),
            ),
            row(
                "Affiliate",
                function::REQUEST_SAMPLE_KEY,
                s.request_key,
                count(function::REQUEST_SAMPLE_KEY),
            ),
            row(
                "Victim",
                function::PAY_RANSOM,
                s.pay,
                count(function::PAY_RANSOM),
            ),
        ]
    }
}

pub fn cost_report(
    graph: &TransactionGraph,
    gas_price: Wei,
    fiat_rate: f64,
) -> Result<CostReport, ForensicsError> {
    let author = graph.author().ok_or(ForensicsError::NoDeployment)?;
    let s = graph.gas_schedule;
    let rho = graph.count_events(EventKind::AffiliateRegistered);
    let delta = graph.count_events(EventKind::SampleSecretPublished);
    let mu = graph.count_events(EventKind::RansomSplit);
    let total_gas = s.deploy + s.set_pk * rho + s.set_sk * delta + s.split * mu;
    let metered_author_gas = graph
        .primary_edges()
        .filter(|e| e.from == author)
        .filter(|e| match &e.kind {
            EdgeKind::Deploy { .. } => true,
            EdgeKind::Call { function: f } => matches!(
                f.as_str(),
                function::SET_SAMPLE_PK | function::SET_SAMPLE_SK | function::SPLIT_RANSOM
            ),
            _ => false,
        })
        .map(|e| e.gas_used)
        .sum();
    let total_wei = gas_price.fee_for(total_gas).expect("bounded gas price");
    let total_ether = total_wei.as_ether_f64();
    let requests = graph.count_events(EventKind::SampleKeyRequested);
    let payments = graph.count_events(EventKind::RansomPaid);
    let line = |actor: &str, op: &str, gas: Gas, count: u64| CostLine {
        actor: actor.to_owned(),
        operation: op.to_owned(),
        gas: gas * count,
        count,
    };
    Ok(CostReport {
        rho,
        delta,
        mu,
        per_op_gas: s,
        total_gas,
        metered_author_gas,
        gas_price,
        fiat_rate,
        total_wei,
        total_ether,
        total_fiat: total_ether * fiat_rate,
        counterparty: vec![
            line("Affiliate", function::REGISTER_AFFILIATE, s.register, rho),
            line(
                "Affiliate",
                function::REQUEST_SAMPLE_KEY,
                s.request_key,
                requests,
            ),
            line("Victim", function::PAY_RANSOM, s.pay, payments),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffiliateRevenue {
    pub address: Address,
    pub registrations: u32,
    pub samples: u32,
    pub payments: u32,
    pub earned: Wei,
    /// Gas fees the affiliate paid, for reconciling against balances.
    pub fees_paid: Wei,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevenueReport {
    pub affiliates: Vec<AffiliateRevenue>,
    pub author: Option<Address>,
    pub author_earned: Wei,
    pub total_paid: Wei,
    pub total_split: Wei,
}

impl RevenueReport {
    /// Author plus affiliate earnings equal the split total.
    pub fn is_conserved(&self) -> bool {
        let affiliates: Wei = self.affiliates.iter().map(|a| a.earned).sum();
        affiliates.checked_add(self.author_earned) == Some(self.total_split)
    }

    pub fn affiliate(&self, a: &Address) -> Option<&AffiliateRevenue> {
        self.affiliates.iter().find(|r| r.address == *a)
    }
}

pub fn revenue_report(graph: &TransactionGraph) -> RevenueReport {
    let mut per: BTreeMap<Address, AffiliateRevenue> = BTreeMap::new();
    let fees = |a: &Address| graph.replay.fees_paid.get(a).copied().unwrap_or_default();
    let mut author_earned = Wei::ZERO;
    let mut total_paid = Wei::ZERO;
    let mut total_split = Wei::ZERO;
    for ev in graph.events() {
        let attrs = &ev.attributes;
        let Some(affiliate) = attrs.address("affiliate") else {
            if ev.kind == EventKind::RansomPaid {
                total_paid = total_paid
                    .checked_add(attrs.wei("amount").unwrap_or_default())
                    .expect("bounded by supply");
            }
            continue;
        };
        let rec = per.entry(affiliate).or_insert_with(|| AffiliateRevenue {
            address: affiliate,
            registrations: 0,
            samples: 0,
            payments: 0,
            earned: Wei::ZERO,
            fees_paid: fees(&affiliate),
        });
        match ev.kind {
            EventKind::AffiliateRegistered => rec.registrations += 1,
            EventKind::SampleKeyRequested => rec.samples += 1,
            EventKind::RansomSplit => {
                let a = attrs.wei("affiliate_amount").unwrap_or_default();
                let b = attrs.wei("author_amount").unwrap_or_default();
                rec.payments += 1;
                rec.earned = rec.earned.checked_add(a).expect("bounded by supply");
                author_earned = author_earned.checked_add(b).expect("bounded by supply");
                total_split = total_split
                    .checked_add(a)
                    .and_then(|t| t.checked_add(b))
                    .expect("bounded by supply");
            }
            _ => {}
        }
    }
    let report = RevenueReport {
        affiliates: per.into_values().collect(),
        author: graph.author(),
        author_earned,
        total_paid,
        total_split,
    };
    debug_assert!(report.is_conserved());
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FindingKind {
    NewAffiliate,
    NewSample,
    PaymentObserved,
    SecretReleased,
}

impl FindingKind {
    pub fn for_event(kind: EventKind) -> Option<Self> {
        match kind {
            EventKind::AffiliateRegistered => Some(FindingKind::NewAffiliate),
            EventKind::SampleKeyRequested => Some(FindingKind::NewSample),
            EventKind::RansomPaid => Some(FindingKind::PaymentObserved),
            EventKind::SampleSecretPublished => Some(FindingKind::SecretReleased),
            EventKind::SampleKeyPublished | EventKind::RansomSplit => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub block: u64,
    pub tx_hash: TxHash,
    pub contract: ContractId,
    pub affiliate: Option<Address>,
    pub sample_id: Option<SampleId>,
    pub payer: Option<Address>,
    pub amount: Option<Wei>,
    /// Hex of the released secret key when it was published in the clear.
    pub secret_key: Option<String>,
    /// The released payload was sealed to the payer and is unreadable here.
    pub opaque: bool,
}

/// Findings in chain order, one per milestone event.
pub fn detect_milestones(trace: &Trace) -> Vec<Finding> {
    let mut out = Vec::new();
    for block in trace.blocks() {
        for ev in block.receipts.iter().flat_map(|r| &r.events) {
            let Some(kind) = FindingKind::for_event(ev.kind) else {
                continue;
            };
            let attrs = &ev.attributes;
            let payload = attrs
                .get("secret")
                .and_then(|b| SecretPayload::from_bytes(b).ok());
            out.push(Finding {
                kind,
                block: ev.block_number,
                tx_hash: ev.tx_hash,
                contract: ev.contract,
                affiliate: attrs.address("affiliate"),
                sample_id: attrs.sample_id("sample_id"),
                payer: attrs.address("payer"),
                amount: attrs.wei("amount"),
                secret_key: match &payload {
                    Some(SecretPayload::Clear(sk)) => Some(sk.to_hex()),
                    _ => None,
                },
                opaque: matches!(payload, Some(SecretPayload::Sealed(_))),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForensicReport {
    pub cost: CostReport,
    pub revenue: RevenueReport,
    pub findings: Vec<Finding>,
}

/// Parses nothing and trusts nothing beyond the trace itself.
pub fn analyze(
    trace: &Trace,
    gas_price: Wei,
    fiat_rate: f64,
) -> Result<ForensicReport, ForensicsError> {
    let graph = build_graph(trace)?;
    Ok(ForensicReport {
        cost: cost_report(&graph, gas_price, fiat_rate)?,
        revenue: revenue_report(&graph),
        findings: detect_milestones(trace),
    })
}

/// `Actor,Operation,Cost in gas,Count` rows mirroring the schedule.
pub fn cost_table_csv(report: &CostReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["Actor", "Operation", "Cost in gas", "Count"])
        .expect("in-memory write");
    for l in report.table() {
        w.write_record([l.actor, l.operation, l.gas.to_string(), l.count.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// One row per affiliate.
pub fn affiliates_csv(report: &RevenueReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "affiliate",
        "registrations",
        "samples",
        "payments",
        "earned_wei",
        "fees_paid_wei",
    ])
    .expect("in-memory write");
    for a in &report.affiliates {
        w.write_record([
            a.address.to_hex(),
            a.registrations.to_string(),
            a.samples.to_string(),
            a.payments.to_string(),
            a.earned.0.to_string(),
            a.fees_paid.0.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn findings_csv(findings: &[Finding]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "kind",
        "block",
        "tx_hash",
        "affiliate",
        "sample_id",
        "amount_wei",
        "opaque",
    ])
    .expect("in-memory write");
    let hex_or_empty = |o: Option<String>| o.unwrap_or_default();
    for f in findings {
        w.write_record([
            format!("{:?}", f.kind),
            f.block.to_string(),
            f.tx_hash.to_hex(),
            hex_or_empty(f.affiliate.map(|a| a.to_hex())),
            hex_or_empty(f.sample_id.map(|s| s.to_hex())),
            f.amount.map(|a| a.0.to_string()).unwrap_or_default(),
            f.opaque.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}
