//! Scenario engine: a discrete-event loop that drives the author responder,
//! affiliates and victims against the ledger, the escrow contract and the
//! content store, recording everything into a [`Trace`].
//!
//! Agents never talk to each other. The author reacts only to contract
//! events it reads at poll ticks; affiliates and victims learn everything
//! from pages in the content store and from contract reads.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caststore::{Availability, ChurnParams, ContentId, ContentKind, ContentStore, NodeId};
use crate::codec::{Decoder, Encoder};
use crate::escrow::{DeployArgs, EscrowCall, EscrowError, SecretPayload};
use crate::ledger::{Event, EventCursor, Ledger, LedgerConfig, RevertReason, Transaction};
use crate::symcrypto::{
    domain_digest, kdf_keypair, lock, open, seal, unlock, AsymCiphertext, PublicKey, SecretKey,
    SymCiphertext, SymKey,
};
use crate::trace::{Action, Actor, Detail, SetupInfo, Trace};
use crate::types::{Address, ContractId, EventKind, GasSchedule, SampleId, TxHash, Wei};

/// Simulated processing time charged per author poll that had work to do.
pub const AUTHOR_SESSION_MS: u64 = 1_000;
pub const BACKOFF_BASE_S: u64 = 60;
pub const BACKOFF_CAP_S: u64 = 3_600;

const MAX_RANSOM: Wei = Wei(1_000_000_000_000_000_000_000_000_000);
const MAX_GAS_PRICE: Wei = Wei(1_000_000_000_000_000);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn default_warmup() -> u32 {
    1
}

fn default_join_window() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_affiliates: u32,
    pub samples_per_affiliate: u32,
    pub victims_per_sample: u32,
    pub pay_probability: f64,
    pub ransom_amount: Wei,
    pub affiliate_share_bp: u64,
    pub gas_price: Wei,
    /// `None` falls back to [`GasSchedule::default`].
    #[serde(default)]
    pub gas_schedule: Option<GasSchedule>,
    pub block_mean_s: f64,
    /// Churn of the storage nodes; `None` keeps them online.
    #[serde(default)]
    pub churn: Option<ChurnParams>,
    pub n_store_nodes: u32,
    pub author_poll_blocks: u64,
    pub encrypt_onchain_payloads: bool,
    pub duration_blocks: u64,
    /// Split before publishing the secret instead of after.
    #[serde(default)]
    pub split_before_secret: bool,
    /// Storage nodes that fetch both pages right after publication.
    #[serde(default = "default_warmup")]
    pub warmup_retrievals: u32,
    /// The author's node leaves the store for good once this block is mined.
    #[serde(default)]
    pub publisher_departs_after_block: Option<u64>,
    /// The first N paying victims send one wei short on their first try.
    #[serde(default)]
    pub underpaying_victims: u32,
    /// Affiliates join uniformly within this many seconds after deployment.
    #[serde(default = "default_join_window")]
    pub affiliate_join_window_s: f64,
    /// Unpinned copies per storage node; `None` is unbounded.
    #[serde(default)]
    pub cache_capacity: Option<usize>,
}

impl Default for ScenarioConfig {
    /// The reference campaign: 100 affiliates, one sample and one paying
    /// victim each.
    fn default() -> Self {
        Self {
            seed: 1,
            n_affiliates: 100,
            samples_per_affiliate: 1,
            victims_per_sample: 1,
            pay_probability: 1.0,
            ransom_amount: Wei::ETHER,
            affiliate_share_bp: 3_000,
            gas_price: Wei::GWEI,
            gas_schedule: None,
            block_mean_s: 13.0,
            churn: Some(ChurnParams {
                mean_online_s: 3_600.0,
                mean_offline_s: 600.0,
            }),
            n_store_nodes: 16,
            author_poll_blocks: 1,
            encrypt_onchain_payloads: false,
            duration_blocks: 400,
            split_before_secret: false,
            warmup_retrievals: 1,
            publisher_departs_after_block: None,
            underpaying_victims: 0,
            affiliate_join_window_s: 600.0,
            cache_capacity: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.pay_probability) {
            return Err(invalid(
                "pay_probability",
                format!("{} is outside [0, 1]", self.pay_probability),
            ));
        }
        if self.ransom_amount == Wei::ZERO || self.ransom_amount > MAX_RANSOM {
            return Err(invalid(
                "ransom_amount",
                format!("must be in 1..={}", MAX_RANSOM.0),
            ));
        }
        if self.affiliate_share_bp > 10_000 {
            return Err(invalid("affiliate_share_bp", "must be at most 10000"));
        }
        if self.gas_price > MAX_GAS_PRICE {
            return Err(invalid(
                "gas_price",
                format!("must be at most {}", MAX_GAS_PRICE.0),
            ));
        }
        if let Some(s) = &self.gas_schedule {
            if let Some(name) = s.first_non_positive() {
                return Err(invalid(
                    "gas_schedule",
                    format!("entry {name} must be positive"),
                ));
            }
        }
        if !(self.block_mean_s.is_finite() && self.block_mean_s > 0.0) {
            return Err(invalid("block_mean_s", "must be positive and finite"));
        }
        if let Some(c) = &self.churn {
            c.validate().map_err(|e| invalid("churn", e.to_string()))?;
        }
        if self.author_poll_blocks == 0 {
            return Err(invalid("author_poll_blocks", "must be at least 1"));
        }
        if self.duration_blocks == 0 {
            return Err(invalid("duration_blocks", "must be at least 1"));
        }
        if self.warmup_retrievals > self.n_store_nodes {
            return Err(invalid("warmup_retrievals", "exceeds n_store_nodes"));
        }
        if !(self.affiliate_join_window_s.is_finite() && self.affiliate_join_window_s >= 0.0) {
            return Err(invalid(
                "affiliate_join_window_s",
                "must be non-negative and finite",
            ));
        }
        if self.total_victims().is_none() {
            return Err(invalid(
                "victims_per_sample",
                "total victim count overflows",
            ));
        }
        Ok(())
    }

    pub fn effective_gas_schedule(&self) -> GasSchedule {
        self.gas_schedule.unwrap_or_default()
    }

    pub fn total_samples(&self) -> Option<u32> {
        self.n_affiliates.checked_mul(self.samples_per_affiliate)
    }

    pub fn total_victims(&self) -> Option<u32> {
        self.total_samples()?.checked_mul(self.victims_per_sample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scheduled {
    MineBlock,
    AffiliateStep(u32),
    Infect(u32),
    VictimStep(u32),
}

/// Pending simulated events ordered by time, then by insertion.
#[derive(Debug, Clone, Default)]
pub struct ScenarioClock {
    now_ms: u64,
    seq: u64,
    pending: BinaryHeap<Reverse<(u64, u64, Scheduled)>>,
}

impl ScenarioClock {
    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Times in the past are clamped to now.
    pub fn schedule(&mut self, at_ms: u64, ev: Scheduled) {
        let at = at_ms.max(self.now_ms);
        self.pending.push(Reverse((at, self.seq, ev)));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(u64, Scheduled)> {
        let Reverse((at, _, ev)) = self.pending.pop()?;
        self.now_ms = at;
        Some((at, ev))
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimPhase {
    Infected,
    Paid,
    Recovered,
    Abandoned,
}

/// What the victim's machine holds after infection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimState {
    pub victim: Address,
    pub sample_id: SampleId,
    pub key_temp: SymKey,
    pub locked_asset: SymCiphertext,
    pub sealed_key: AsymCiphertext,
    pub phase: VictimPhase,
}

/// The author's event-driven responder. It holds no per-sample state: every
/// keypair is re-derived from the sample id.
#[derive(Debug, Clone)]
pub struct AuthorResponder {
    pub address: Address,
    pub contract: ContractId,
    pub cursor: EventCursor,
    pub gas_price: Wei,
    pub split_before_secret: bool,
}

impl AuthorResponder {
    pub fn filter() -> BTreeSet<EventKind> {
        [EventKind::SampleKeyRequested, EventKind::RansomPaid].into()
    }

    /// Turns a batch of new events into transactions, nonces from `nonce` on.
    pub fn author_step(&mut self, events: &[Event], mut nonce: u64) -> Vec<Transaction> {
        let mut txs = Vec::new();
        let mut push = |call: EscrowCall, txs: &mut Vec<Transaction>| {
            txs.push(Transaction::call(
                self.address,
                nonce,
                self.contract,
                &call,
                Wei::ZERO,
                self.gas_price,
            ));
            nonce += 1;
        };
        for ev in events {
            if let Some(last) = self.cursor.0 {
                debug_assert!(ev.pos() > last, "event replayed");
            }
            self.cursor = EventCursor::after(ev);
            if ev.contract != self.contract {
                continue;
            }
            let Some(sample_id) = ev.attributes.sample_id("sample_id") else {
                continue;
            };
            let (sk, pk) = kdf_keypair(&sample_id.0).expect("sample ids are 32 bytes");
            match ev.kind {
                EventKind::SampleKeyRequested => {
                    push(EscrowCall::SetSamplePk { sample_id, pk }, &mut txs);
                }
                EventKind::RansomPaid => {
                    let payload = match ev
                        .attributes
                        .get("recipient_pk")
                        .and_then(PublicKey::from_slice)
                    {
                        Some(rpk) => SecretPayload::Sealed(seal(&rpk, &sk.0)),
                        None => SecretPayload::Clear(sk),
                    };
                    let release = EscrowCall::SetSampleSk { sample_id, payload };
                    let split = EscrowCall::SplitRansom { sample_id };
                    if self.split_before_secret {
                        push(split, &mut txs);
                        push(release, &mut txs);
                    } else {
                        push(release, &mut txs);
                        push(split, &mut txs);
                    }
                }
                _ => {}
            }
        }
        txs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorStats {
    pub polls: u64,
    /// Polls that found events and therefore took the author online.
    pub sessions: u64,
    pub online_ms: u64,
    pub txs_sent: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffiliateReport {
    pub index: u32,
    pub address: Address,
    pub registered: bool,
    pub samples: Vec<SampleId>,
    pub deferrals: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VictimReport {
    pub index: u32,
    pub address: Address,
    pub affiliate: u32,
    pub sample_id: Option<SampleId>,
    pub will_pay: Option<bool>,
    /// `None` when the victim was never infected.
    pub phase: Option<VictimPhase>,
    pub pay_attempts: u32,
    pub reverted_payments: u32,
    pub recovered_at_block: Option<u64>,
    /// Successful unlocks of the victim's asset.
    pub unlocks: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageAvailability {
    pub block: u64,
    pub registration: Availability,
    pub payment: Availability,
}

/// Everything a run produced: the public trace plus the simulator's ground
/// truth, kept for cross-checking.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub trace: Trace,
    pub ledger: Ledger,
    pub store: ContentStore,
    pub contract: ContractId,
    pub author: Address,
    pub author_node: NodeId,
    pub registration_page: ContentId,
    pub payment_page: ContentId,
    pub author_stats: AuthorStats,
    pub affiliates: Vec<AffiliateReport>,
    pub victims: Vec<VictimReport>,
    pub victim_states: Vec<Option<VictimState>>,
    pub page_availability: Vec<PageAvailability>,
}

impl ScenarioRun {
    pub fn recovered(&self) -> usize {
        self.victims
            .iter()
            .filter(|v| v.phase == Some(VictimPhase::Recovered))
            .count()
    }

    pub fn end_time_ms(&self) -> u64 {
        self.ledger.head().timestamp_ms
    }
}

/// Runs the scenario and returns its trace.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Trace, ConfigError> {
    Ok(simulate(config)?.trace)
}

/// Runs the scenario keeping the ground truth alongside the trace.
pub fn simulate(config: &ScenarioConfig) -> Result<ScenarioRun, ConfigError> {
    config.validate()?;
    let mut sim = Sim::setup(config.clone())?;
    sim.run();
    Ok(sim.finish())
}

/// Derives an independent stream seed for one subsystem.
fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut input = seed.to_be_bytes().to_vec();
    input.extend_from_slice(label.as_bytes());
    let d = domain_digest(b"seed", &input);
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

fn registration_page_bytes(contract: ContractId) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("registration").u64(contract.0);
    enc.finish()
}

fn payment_page_bytes(contract: ContractId, ransom: Wei) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("payment").u64(contract.0).u128(ransom.0);
    enc.finish()
}

fn parse_page(bytes: &[u8], expect: &str) -> Option<(ContractId, Option<Wei>)> {
    let mut dec = Decoder::new(bytes);
    if dec.string().ok()? != expect {
        return None;
    }
    let contract = ContractId(dec.u64().ok()?);
    let ransom = if expect == "payment" {
        Some(Wei(dec.u128().ok()?))
    } else {
        None
    };
    dec.finish().ok()?;
    Some((contract, ransom))
}

fn sample_descriptor_bytes(contract: ContractId, sample_id: &SampleId) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str("sample").u64(contract.0).bytes(&sample_id.0);
    enc.finish()
}

fn backoff_ms(attempt: u32) -> u64 {
    let s = BACKOFF_BASE_S.saturating_mul(1u64 << attempt.min(16));
    s.min(BACKOFF_CAP_S) * 1_000
}

fn revert_label(r: &RevertReason) -> String {
    match r {
        RevertReason::Escrow(e) => format!("reverted: {e:?}"),
        other => format!("reverted: {other:?}"),
    }
}

struct Affiliate {
    address: Address,
    node: NodeId,
    samples: Vec<SampleId>,
    deferrals: u32,
    done: bool,
}

struct Victim {
    address: Address,
    node: NodeId,
    affiliate: u32,
    sample_id: Option<SampleId>,
    will_pay: Option<bool>,
    state: Option<VictimState>,
    /// Victim-held key for sealed delivery.
    delivery_sk: Option<SecretKey>,
    pending_payment: Option<TxHash>,
    page_attempts: u32,
    pay_attempts: u32,
    reverted_payments: u32,
    underpay_next: bool,
    recovered_at_block: Option<u64>,
    unlocks: u32,
}

struct Sim {
    cfg: ScenarioConfig,
    ledger: Ledger,
    store: ContentStore,
    clock: ScenarioClock,
    trace: Trace,
    rng: ChaCha8Rng,
    author: AuthorResponder,
    author_node: NodeId,
    registration_page: ContentId,
    payment_page: ContentId,
    affiliates: Vec<Affiliate>,
    victims: Vec<Victim>,
    stats: AuthorStats,
    page_availability: Vec<PageAvailability>,
    underpay_budget: u32,
}

impl Sim {
    fn setup(cfg: ScenarioConfig) -> Result<Self, ConfigError> {
        let schedule = cfg.effective_gas_schedule();
        let ledger_cfg = LedgerConfig {
            block_mean_s: cfg.block_mean_s,
            gas_schedule: schedule,
        };
        let mut ledger = Ledger::new(ledger_cfg, sub_seed(cfg.seed, "ledger"))
            .map_err(|e| invalid("block_mean_s", e.to_string()))?;
        let mut store = ContentStore::new(sub_seed(cfg.seed, "store"), cfg.cache_capacity);
        let rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "agents"));

        let n_samples = u128::from(cfg.total_samples().expect("validated"));
        let fee = |gas: u64| cfg.gas_price.fee_for(gas).expect("bounded gas price");
        let overflow = || invalid("ransom_amount", "funding overflows");
        // Generous gas budgets; only the ransom itself is tight.
        let author_fund = fee(schedule.deploy)
            .checked_add(
                fee(schedule.set_pk + schedule.set_sk + schedule.split)
                    .checked_mul(2 * n_samples.max(1))
                    .ok_or_else(overflow)?,
            )
            .ok_or_else(overflow)?;
        let affiliate_fund = fee(schedule.register)
            .checked_add(
                fee(schedule.request_key)
                    .checked_mul(u128::from(cfg.samples_per_affiliate))
                    .ok_or_else(overflow)?,
            )
            .and_then(|w| w.checked_mul(2))
            .ok_or_else(overflow)?;
        let victim_fund = cfg
            .ransom_amount
            .checked_add(fee(schedule.pay).checked_mul(4).ok_or_else(overflow)?)
            .ok_or_else(overflow)?;

        let author_addr = ledger
            .create_account(b"author", author_fund)
            .expect("fresh ledger");
        let author_node = store
            .add_node(b"author", ChurnParams::DISABLED)
            .expect("valid churn");
        let store_churn = cfg.churn.unwrap_or(ChurnParams::DISABLED);
        let mut store_nodes = Vec::new();
        for i in 0..cfg.n_store_nodes {
            store_nodes.push(
                store
                    .add_node(format!("store-{i}").as_bytes(), store_churn)
                    .map_err(|e| invalid("churn", e.to_string()))?,
            );
        }
        let mut affiliates = Vec::new();
        for i in 0..cfg.n_affiliates {
            let seed = format!("affiliate-{i}");
            let address = ledger
                .create_account(seed.as_bytes(), affiliate_fund)
                .map_err(|e| invalid("n_affiliates", e.to_string()))?;
            let node = store
                .add_node(seed.as_bytes(), ChurnParams::DISABLED)
                .expect("valid churn");
            affiliates.push(Affiliate {
                address,
                node,
                samples: Vec::new(),
                deferrals: 0,
                done: false,
            });
        }
        let per_affiliate = cfg.samples_per_affiliate * cfg.victims_per_sample;
        let mut victims = Vec::new();
        for v in 0..cfg.total_victims().expect("validated") {
            let seed = format!("victim-{v}");
            let address = ledger
                .create_account(seed.as_bytes(), victim_fund)
                .map_err(|e| invalid("victims_per_sample", e.to_string()))?;
            let node = store
                .add_node(seed.as_bytes(), ChurnParams::DISABLED)
                .expect("valid churn");
            victims.push(Victim {
                address,
                node,
                affiliate: v / per_affiliate,
                sample_id: None,
                will_pay: None,
                state: None,
                delivery_sk: None,
                pending_payment: None,
                page_attempts: 0,
                pay_attempts: 0,
                reverted_payments: 0,
                underpay_next: false,
                recovered_at_block: None,
                unlocks: 0,
            });
        }

        let mut trace = Trace::new();
        trace.push(
            0,
            Actor::Ledger,
            Action::Setup,
            None,
            None,
            if cfg.gas_schedule.is_none() {
                "ok (default gas schedule)"
            } else {
                "ok"
            },
            Some(Detail::Setup(SetupInfo {
                seed: cfg.seed,
                block_mean_s: cfg.block_mean_s,
                gas_schedule: schedule,
                miner_sink: ledger.miner_sink(),
                genesis: ledger.genesis().to_vec(),
            })),
        );

        // Deployment and page publication at t = 0.
        let contract = ledger.next_contract_id();
        let deploy = Transaction::deploy(
            author_addr,
            0,
            &DeployArgs {
                ransom_amount: cfg.ransom_amount,
                affiliate_share_bp: cfg.affiliate_share_bp,
                encrypted_delivery: cfg.encrypt_onchain_payloads,
            },
            cfg.gas_price,
        );
        let deploy_hash = ledger.submit_tx(deploy).expect("author account exists");
        trace.push(
            0,
            Actor::Author,
            Action::SubmitTx,
            Some(deploy_hash),
            None,
            "deploy",
            None,
        );

        let mut pages = Vec::new();
        for (kind, bytes) in [
            (
                ContentKind::RegistrationPage,
                registration_page_bytes(contract),
            ),
            (
                ContentKind::PaymentPage,
                payment_page_bytes(contract, cfg.ransom_amount),
            ),
        ] {
            let id = store
                .publish(&author_node, kind, bytes, true)
                .expect("author node online at start");
            trace.push(
                0,
                Actor::Author,
                Action::Publish,
                None,
                None,
                "ok",
                Some(Detail::Content { id, kind }),
            );
            pages.push((id, kind));
        }
        for node in store_nodes.iter().take(cfg.warmup_retrievals as usize) {
            for &(id, kind) in &pages {
                let outcome = match store.retrieve(node, &id) {
                    Ok(_) => "ok".to_owned(),
                    Err(e) => e.to_string(),
                };
                trace.push(
                    0,
                    Actor::Store,
                    Action::Retrieve,
                    None,
                    None,
                    outcome,
                    Some(Detail::Content { id, kind }),
                );
            }
        }

        let mut clock = ScenarioClock::default();
        clock.schedule(ledger.next_block_time_ms(), Scheduled::MineBlock);

        Ok(Self {
            underpay_budget: cfg.underpaying_victims,
            author: AuthorResponder {
                address: author_addr,
                contract,
                cursor: EventCursor::GENESIS,
                gas_price: cfg.gas_price,
                split_before_secret: cfg.split_before_secret,
            },
            cfg,
            ledger,
            store,
            clock,
            trace,
            rng,
            author_node,
            registration_page: pages[0].0,
            payment_page: pages[1].0,
            affiliates,
            victims,
            stats: AuthorStats::default(),
            page_availability: Vec::new(),
        })
    }

    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    fn next_block_ms(&self) -> u64 {
        self.ledger.next_block_time_ms()
    }

    fn run(&mut self) {
        while self.step() {}
    }

    /// Processes the next scheduled event. Returns false when the run is over.
    fn step(&mut self) -> bool {
        let Some((t, ev)) = self.clock.pop() else {
            return false;
        };
        self.store.advance_to(t);
        match ev {
            Scheduled::MineBlock => return !self.mine(),
            Scheduled::AffiliateStep(i) => self.affiliate_step(i),
            Scheduled::Infect(v) => self.infect(v),
            Scheduled::VictimStep(v) => self.victim_step(v),
        }
        true
    }

    /// Mines one block and runs the block-driven duties. Returns true once
    /// the run is over.
    fn mine(&mut self) -> bool {
        let block = self.ledger.mine_next_block().clone();
        self.trace.push_block(&block);
        debug!("mined block {} at {} ms", block.number, block.timestamp_ms);

        if self.cfg.publisher_departs_after_block == Some(block.number) {
            self.store
                .depart(&self.author_node)
                .expect("author node exists");
            self.trace.push(
                block.timestamp_ms,
                Actor::Author,
                Action::Depart,
                None,
                None,
                "ok",
                None,
            );
        }
        self.page_availability.push(PageAvailability {
            block: block.number,
            registration: self.store.availability(&self.registration_page),
            payment: self.store.availability(&self.payment_page),
        });
        if block.number == 1 {
            let window_ms = (self.cfg.affiliate_join_window_s * 1000.0).round() as u64;
            for i in 0..self.affiliates.len() as u32 {
                let at = block.timestamp_ms + self.rng.random_range(0..=window_ms);
                self.clock.schedule(at, Scheduled::AffiliateStep(i));
            }
        }
        if block.number.is_multiple_of(self.cfg.author_poll_blocks) {
            self.author_poll(block.timestamp_ms);
        }
        if block.number >= self.cfg.duration_blocks {
            return true;
        }
        self.clock
            .schedule(self.next_block_ms(), Scheduled::MineBlock);
        false
    }

    fn author_poll(&mut self, now: u64) {
        self.stats.polls += 1;
        let filter = AuthorResponder::filter();
        let events = self
            .ledger
            .events_since(self.author.cursor, Some(&filter))
            .expect("cursor never passes head");
        if events.is_empty() {
            return;
        }
        self.stats.sessions += 1;
        self.stats.online_ms += AUTHOR_SESSION_MS;
        let nonce = self
            .ledger
            .next_nonce(&self.author.address)
            .expect("author exists");
        let txs = self.author.author_step(&events, nonce);
        self.trace.push(
            now,
            Actor::Author,
            Action::Poll,
            None,
            None,
            format!("{} events, {} txs", events.len(), txs.len()),
            None,
        );
        for tx in txs {
            let function = tx.function().unwrap_or("").to_owned();
            let h = self.ledger.submit_tx(tx).expect("author nonce tracked");
            self.stats.txs_sent += 1;
            self.trace.push(
                now,
                Actor::Author,
                Action::SubmitTx,
                Some(h),
                None,
                function,
                None,
            );
        }
    }

    fn affiliate_step(&mut self, i: u32) {
        let now = self.now();
        let actor = Actor::Affiliate(i);
        let (node, address) = {
            let a = &self.affiliates[i as usize];
            if a.done {
                return;
            }
            (a.node, a.address)
        };
        let page = self.registration_page;
        let contract = match self.store.retrieve(&node, &page) {
            Ok(bytes) => parse_page(&bytes, "registration").map(|(c, _)| c),
            Err(e) => {
                let a = &mut self.affiliates[i as usize];
                let wait = backoff_ms(a.deferrals);
                a.deferrals += 1;
                self.trace.push(
                    now,
                    actor,
                    Action::Defer,
                    None,
                    None,
                    format!("registration page: {e}"),
                    Some(Detail::Content {
                        id: page,
                        kind: ContentKind::RegistrationPage,
                    }),
                );
                self.clock.schedule(now + wait, Scheduled::AffiliateStep(i));
                return;
            }
        };
        self.trace.push(
            now,
            actor,
            Action::Retrieve,
            None,
            None,
            "ok",
            Some(Detail::Content {
                id: page,
                kind: ContentKind::RegistrationPage,
            }),
        );
        let Some(contract) = contract else {
            self.affiliates[i as usize].done = true;
            return;
        };
        let registered = self
            .ledger
            .contract(contract)
            .map(|c| c.state.is_registered(&address))
            .unwrap_or(false);
        let mut nonce = self.ledger.next_nonce(&address).expect("affiliate exists");
        if !registered {
            let tx = Transaction::call(
                address,
                nonce,
                contract,
                &EscrowCall::RegisterAffiliate,
                Wei::ZERO,
                self.cfg.gas_price,
            );
            let h = self.ledger.submit_tx(tx).expect("nonce tracked");
            nonce += 1;
            self.trace.push(
                now,
                actor,
                Action::SubmitTx,
                Some(h),
                None,
                "register_affiliate",
                None,
            );
        }
        let per_sample = self.cfg.victims_per_sample;
        for s in 0..self.cfg.samples_per_affiliate {
            let tx = Transaction::call(
                address,
                nonce,
                contract,
                &EscrowCall::RequestSampleKey,
                Wei::ZERO,
                self.cfg.gas_price,
            );
            let h = self.ledger.submit_tx(tx).expect("nonce tracked");
            nonce += 1;
            self.trace.push(
                now,
                actor,
                Action::SubmitTx,
                Some(h),
                None,
                "request_sample_key",
                None,
            );
            let sample_id = SampleId::from(h);
            let kind = ContentKind::SampleDescriptor;
            let id = self
                .store
                .publish(
                    &node,
                    kind,
                    sample_descriptor_bytes(contract, &sample_id),
                    true,
                )
                .expect("affiliate node online");
            self.trace.push(
                now,
                actor,
                Action::Publish,
                None,
                None,
                "ok",
                Some(Detail::Content { id, kind }),
            );
            self.affiliates[i as usize].samples.push(sample_id);

            let base = (i * self.cfg.samples_per_affiliate + s) * per_sample;
            let mean_ms = (self.cfg.block_mean_s * 1000.0) as u64;
            for v in base..base + per_sample {
                self.victims[v as usize].sample_id = Some(sample_id);
                let at = now + self.rng.random_range(mean_ms..=5 * mean_ms);
                self.clock.schedule(at, Scheduled::Infect(v));
            }
        }
        self.affiliates[i as usize].done = true;
    }

    fn current_contract(&self) -> ContractId {
        self.author.contract
    }

    fn infect(&mut self, v: u32) {
        let now = self.now();
        let actor = Actor::Victim(v);
        let sample_id = self.victims[v as usize]
            .sample_id
            .expect("assigned before infection");
        let pk = self
            .ledger
            .contract(self.current_contract())
            .map_err(|_| EscrowError::UnknownSample)
            .and_then(|c| c.state.get_sample_pk(&sample_id));
        let pk = match pk {
            Ok(pk) => pk,
            Err(e) => {
                self.trace.push(
                    now,
                    actor,
                    Action::Defer,
                    None,
                    None,
                    format!("sample pk: {e:?}"),
                    None,
                );
                let at = self.next_block_ms();
                self.clock.schedule(at, Scheduled::Infect(v));
                return;
            }
        };
        let key_temp = SymKey::random(&mut self.rng);
        let mut asset = format!("victim-{v}-files:").into_bytes();
        asset.extend_from_slice(&self.rng.random::<[u8; 16]>());
        let locked_asset = lock(&key_temp, &asset);
        let sealed_key = seal(&pk, &key_temp.0);
        let will_pay = self.rng.random_bool(self.cfg.pay_probability);
        let victim = &mut self.victims[v as usize];
        victim.state = Some(VictimState {
            victim: victim.address,
            sample_id,
            key_temp,
            locked_asset,
            sealed_key,
            phase: VictimPhase::Infected,
        });
        victim.will_pay = Some(will_pay);
        if will_pay && self.underpay_budget > 0 {
            self.underpay_budget -= 1;
            victim.underpay_next = true;
        }
        self.trace.push(
            now,
            actor,
            Action::Infect,
            None,
            None,
            if will_pay { "will pay" } else { "will not pay" },
            None,
        );
        if will_pay {
            self.clock.schedule(now, Scheduled::VictimStep(v));
        }
    }

    fn victim_step(&mut self, v: u32) {
        let phase = self.victims[v as usize]
            .state
            .as_ref()
            .map(|s| s.phase)
            .expect("only infected victims step");
        match phase {
            VictimPhase::Infected => {
                if self.victims[v as usize].pending_payment.is_some() {
                    self.check_payment(v);
                } else {
                    self.pay(v);
                }
            }
            VictimPhase::Paid => self.recover(v),
            VictimPhase::Recovered | VictimPhase::Abandoned => {}
        }
    }

    fn pay(&mut self, v: u32) {
        let now = self.now();
        let actor = Actor::Victim(v);
        let node = self.victims[v as usize].node;
        let page = self.payment_page;
        let info = match self.store.retrieve(&node, &page) {
            Ok(bytes) => parse_page(&bytes, "payment"),
            Err(e) => {
                let victim = &mut self.victims[v as usize];
                let wait = backoff_ms(victim.page_attempts);
                victim.page_attempts += 1;
                self.trace.push(
                    now,
                    actor,
                    Action::Defer,
                    None,
                    None,
                    format!("payment page: {e}"),
                    Some(Detail::Content {
                        id: page,
                        kind: ContentKind::PaymentPage,
                    }),
                );
                self.clock.schedule(now + wait, Scheduled::VictimStep(v));
                return;
            }
        };
        self.trace.push(
            now,
            actor,
            Action::Retrieve,
            None,
            None,
            "ok",
            Some(Detail::Content {
                id: page,
                kind: ContentKind::PaymentPage,
            }),
        );
        let Some((contract, Some(ransom))) = info else {
            return;
        };
        // The ransom note shows the sample public key; the page maps it to the sample.
        let state = self.victims[v as usize].state.as_ref().expect("infected");
        let pk = state.sealed_key.pk_tag;
        let Some(sample_id) = self
            .ledger
            .contract(contract)
            .ok()
            .and_then(|c| c.state.sample_for_pk(&pk))
        else {
            return;
        };
        let recipient_pk = if self.cfg.encrypt_onchain_payloads {
            let sk = self.victims[v as usize]
                .delivery_sk
                .get_or_insert_with(|| SecretKey::random(&mut self.rng));
            Some(sk.public_key())
        } else {
            None
        };
        let victim = &mut self.victims[v as usize];
        let value = if victim.underpay_next {
            victim.underpay_next = false;
            Wei(ransom.0 - 1)
        } else {
            ransom
        };
        let nonce = self
            .ledger
            .next_nonce(&victim.address)
            .expect("victim exists");
        let tx = Transaction::call(
            victim.address,
            nonce,
            contract,
            &EscrowCall::PayRansom {
                sample_id,
                recipient_pk,
            },
            value,
            self.cfg.gas_price,
        );
        let h = self.ledger.submit_tx(tx).expect("nonce tracked");
        victim.pending_payment = Some(h);
        victim.pay_attempts += 1;
        self.trace.push(
            now,
            actor,
            Action::SubmitTx,
            Some(h),
            None,
            "pay_ransom",
            None,
        );
        let at = self.next_block_ms();
        self.clock.schedule(at, Scheduled::VictimStep(v));
    }

    fn check_payment(&mut self, v: u32) {
        let now = self.now();
        let h = self.victims[v as usize].pending_payment.expect("pending");
        let Some(receipt) = self.ledger.receipt(&h) else {
            let at = self.next_block_ms();
            self.clock.schedule(at, Scheduled::VictimStep(v));
            return;
        };
        let victim = &mut self.victims[v as usize];
        victim.pending_payment = None;
        let outcome = match receipt.revert_reason() {
            None => Some("payment confirmed"),
            // One payment per sample: a co-infected victim paid first.
            Some(RevertReason::Escrow(EscrowError::AlreadyPaid)) => {
                victim.reverted_payments += 1;
                Some("sample already paid")
            }
            Some(_) => None,
        };
        match (outcome, receipt.revert_reason()) {
            (Some(label), _) => {
                victim.state.as_mut().expect("infected").phase = VictimPhase::Paid;
                self.trace.push(
                    now,
                    Actor::Victim(v),
                    Action::ReadKey,
                    Some(h),
                    None,
                    label,
                    None,
                );
                let at = self.next_block_ms();
                self.clock.schedule(at, Scheduled::VictimStep(v));
            }
            (None, r) => {
                victim.reverted_payments += 1;
                let label = revert_label(r.expect("reverted"));
                self.trace.push(
                    now,
                    Actor::Victim(v),
                    Action::ReadKey,
                    Some(h),
                    None,
                    label,
                    None,
                );
                self.clock.schedule(now, Scheduled::VictimStep(v));
            }
        }
    }

    fn recover(&mut self, v: u32) {
        let now = self.now();
        let actor = Actor::Victim(v);
        let contract = self.current_contract();
        let (sample_id, sealed_key, locked_asset) = {
            let s = self.victims[v as usize].state.as_ref().expect("infected");
            (s.sample_id, s.sealed_key.clone(), s.locked_asset.clone())
        };
        let payload = self
            .ledger
            .contract(contract)
            .ok()
            .and_then(|c| c.state.get_sample_sk(&sample_id).ok().cloned());
        let Some(payload) = payload else {
            let at = self.next_block_ms();
            self.clock.schedule(at, Scheduled::VictimStep(v));
            return;
        };
        let victim = &mut self.victims[v as usize];
        let sk = match payload {
            SecretPayload::Clear(sk) => Some(sk),
            SecretPayload::Sealed(ct) => victim
                .delivery_sk
                .as_ref()
                .and_then(|dk| open(dk, &ct).ok())
                .and_then(|b| SecretKey::from_slice(&b)),
        };
        let recovered = sk
            .and_then(|sk| open(&sk, &sealed_key).ok())
            .and_then(|b| SymKey::from_slice(&b))
            .and_then(|k| unlock(&k, &locked_asset).ok());
        match recovered {
            Some(_) => {
                victim.unlocks += 1;
                victim.recovered_at_block = Some(self.ledger.head().number);
                victim.state.as_mut().expect("infected").phase = VictimPhase::Recovered;
                self.trace
                    .push(now, actor, Action::Recover, None, None, "ok", None);
            }
            None => {
                self.trace.push(
                    now,
                    actor,
                    Action::Recover,
                    None,
                    None,
                    "key mismatch",
                    None,
                );
            }
        }
    }

    fn finish(mut self) -> ScenarioRun {
        let end = self.ledger.head().timestamp_ms;
        for (v, victim) in self.victims.iter_mut().enumerate() {
            if let Some(state) = victim.state.as_mut() {
                if state.phase != VictimPhase::Recovered {
                    state.phase = VictimPhase::Abandoned;
                    self.trace.push(
                        end,
                        Actor::Victim(v as u32),
                        Action::Abandon,
                        None,
                        None,
                        "ok",
                        None,
                    );
                }
            }
        }
        self.trace.finish(end, self.ledger.head().number);
        info!(
            "scenario seed {} finished at block {} ({} trace records)",
            self.cfg.seed,
            self.ledger.head().number,
            self.trace.records.len()
        );
        ScenarioRun {
            trace: self.trace,
            contract: self.author.contract,
            author: self.author.address,
            author_node: self.author_node,
            registration_page: self.registration_page,
            payment_page: self.payment_page,
            author_stats: self.stats,
            affiliates: self
                .affiliates
                .iter()
                .enumerate()
                .map(|(i, a)| AffiliateReport {
                    index: i as u32,
                    address: a.address,
                    registered: self
                        .ledger
                        .contract(self.author.contract)
                        .map(|c| c.state.is_registered(&a.address))
                        .unwrap_or(false),
                    samples: a.samples.clone(),
                    deferrals: a.deferrals,
                })
                .collect(),
            victims: self
                .victims
                .iter()
                .enumerate()
                .map(|(i, v)| VictimReport {
                    index: i as u32,
                    address: v.address,
                    affiliate: v.affiliate,
                    sample_id: v.sample_id,
                    will_pay: v.will_pay,
                    phase: v.state.as_ref().map(|s| s.phase),
                    pay_attempts: v.pay_attempts,
                    reverted_payments: v.reverted_payments,
                    recovered_at_block: v.recovered_at_block,
                    unlocks: v.unlocks,
                })
                .collect(),
            victim_states: self.victims.into_iter().map(|v| v.state).collect(),
            page_availability: self.page_availability,
            config: self.cfg,
            ledger: self.ledger,
            store: self.store,
        }
    }
}

/// Whether `actor` may perform `action`. No action addresses another agent.
pub fn permitted(actor: Actor, action: Action) -> bool {
    use Action::*;
    match actor {
        Actor::Ledger => matches!(action, Setup | MineBlock | Event | Finish),
        Actor::Store => matches!(action, Retrieve),
        Actor::Author => matches!(action, SubmitTx | Publish | Poll | Depart),
        Actor::Affiliate(_) => matches!(action, Retrieve | SubmitTx | Publish | Defer),
        Actor::Victim(_) => matches!(
            action,
            Infect | Retrieve | SubmitTx | Defer | ReadKey | Recover | Abandon
        ),
    }
}
