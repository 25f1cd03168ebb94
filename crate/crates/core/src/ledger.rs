//! Account-based ledger: queued transactions, block mining at a random
//! inter-block time, flat per-function gas and an append-only event log.
//!
//! Gas proceeds go to a single miner-sink account so the total supply can be
//! checked exactly at every height.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::escrow::{CallContext, DeployArgs, EscrowCall, EscrowError, EscrowState, Payout};
use crate::symcrypto::digest;
use crate::types::{
    Address, Attributes, BlockHash, ContractId, EventKind, Gas, GasSchedule, TxHash, Wei,
    TRANSFER_GAS,
};

pub const MINER_SINK_SEED: &[u8] = b"miner-sink";
pub const DEFAULT_BLOCK_MEAN_S: f64 = 13.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("account seed must not be empty")]
    EmptySeed,
    #[error("address {0} already exists")]
    DuplicateAddress(Address),
    #[error("unknown sender {0}")]
    UnknownSender(Address),
    #[error("bad nonce: expected {expected}, got {got}")]
    BadNonce { expected: u64, got: u64 },
    #[error("cursor block {cursor} is beyond head {head}")]
    CursorBeyondHead { cursor: u64, head: u64 },
    #[error("unknown address {0}")]
    UnknownAddress(Address),
    #[error("unknown contract {0}")]
    UnknownContract(ContractId),
    #[error("total supply would overflow")]
    Overflow,
    #[error("block mean must be positive and finite, got {0}")]
    BadBlockMean(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxTarget {
    Transfer {
        to: Address,
    },
    ContractCall {
        contract: ContractId,
        function: String,
        #[serde(with = "crate::hexbytes::hex_vec")]
        args: Vec<u8>,
    },
    Deploy {
        #[serde(with = "crate::hexbytes::hex_vec")]
        args: Vec<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: Address,
    pub nonce: u64,
    pub target: TxTarget,
    pub value: Wei,
    pub gas_price: Wei,
}

impl Transaction {
    pub fn transfer(sender: Address, nonce: u64, to: Address, value: Wei, gas_price: Wei) -> Self {
        Self {
            sender,
            nonce,
            target: TxTarget::Transfer { to },
            value,
            gas_price,
        }
    }

    pub fn call(
        sender: Address,
        nonce: u64,
        contract: ContractId,
        call: &EscrowCall,
        value: Wei,
        gas_price: Wei,
    ) -> Self {
        Self {
            sender,
            nonce,
            target: TxTarget::ContractCall {
                contract,
                function: call.function_name().to_owned(),
                args: call.encode_args(),
            },
            value,
            gas_price,
        }
    }

    pub fn deploy(sender: Address, nonce: u64, args: &DeployArgs, gas_price: Wei) -> Self {
        Self {
            sender,
            nonce,
            target: TxTarget::Deploy {
                args: args.encode(),
            },
            value: Wei::ZERO,
            gas_price,
        }
    }

    /// Canonical bytes: fields in declaration order.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(&self.sender.0).u64(self.nonce);
        match &self.target {
            TxTarget::Transfer { to } => {
                enc.u8(0).bytes(&to.0);
            }
            TxTarget::ContractCall {
                contract,
                function,
                args,
            } => {
                enc.u8(1).u64(contract.0).str(function).bytes(args);
            }
            TxTarget::Deploy { args } => {
                enc.u8(2).bytes(args);
            }
        }
        enc.u128(self.value.0).u128(self.gas_price.0);
        enc.finish()
    }

    pub fn hash(&self) -> TxHash {
        TxHash(digest(&self.encode()))
    }

    /// Scheduled gas for this transaction; unknown functions meter nothing.
    pub fn scheduled_gas(&self, schedule: &GasSchedule) -> Gas {
        match &self.target {
            TxTarget::Transfer { .. } => TRANSFER_GAS,
            TxTarget::Deploy { .. } => schedule.deploy,
            TxTarget::ContractCall { function, .. } => {
                EscrowCall::gas_for(function, schedule).unwrap_or(0)
            }
        }
    }

    pub fn function(&self) -> Option<&str> {
        match &self.target {
            TxTarget::ContractCall { function, .. } => Some(function),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventPos {
    pub block: u64,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub block_number: u64,
    pub index: u32,
    pub tx_hash: TxHash,
    pub contract: ContractId,
    pub kind: EventKind,
    pub attributes: Attributes,
}

impl Event {
    pub fn pos(&self) -> EventPos {
        EventPos {
            block: self.block_number,
            index: self.index,
        }
    }
}

/// Read position in the event log. Reads return events strictly after it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventCursor(pub Option<EventPos>);

impl EventCursor {
    pub const GENESIS: EventCursor = EventCursor(None);

    pub fn after(event: &Event) -> Self {
        Self(Some(event.pos()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RevertReason {
    InsufficientFunds,
    UnknownContract,
    TransferToContract,
    Escrow(EscrowError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum ReceiptStatus {
    Succeeded,
    Reverted(RevertReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_hash: TxHash,
    pub tx: Transaction,
    pub status: ReceiptStatus,
    pub gas_used: Gas,
    /// Wei actually moved to the miner sink; below `gas_used * gas_price`
    /// only when the sender could not cover it.
    pub fee: Wei,
    pub created_contract: Option<ContractId>,
    pub payouts: Vec<Payout>,
    pub events: Vec<Event>,
}

impl Receipt {
    pub fn succeeded(&self) -> bool {
        self.status == ReceiptStatus::Succeeded
    }

    pub fn revert_reason(&self) -> Option<&RevertReason> {
        match &self.status {
            ReceiptStatus::Reverted(r) => Some(r),
            ReceiptStatus::Succeeded => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub number: u64,
    pub timestamp_ms: u64,
    pub parent: BlockHash,
    pub hash: BlockHash,
    pub receipts: Vec<Receipt>,
}

impl Block {
    fn compute_hash(
        number: u64,
        timestamp_ms: u64,
        parent: &BlockHash,
        receipts: &[Receipt],
    ) -> BlockHash {
        let mut enc = Encoder::new();
        enc.u64(number).u64(timestamp_ms).bytes(&parent.0);
        enc.u64(receipts.len() as u64);
        for r in receipts {
            enc.bytes(&r.tx_hash.0);
        }
        BlockHash(digest(&enc.finish()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerConfig {
    pub block_mean_s: f64,
    pub gas_schedule: GasSchedule,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            block_mean_s: DEFAULT_BLOCK_MEAN_S,
            gas_schedule: GasSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Account {
    balance: Wei,
    nonce: u64,
}

#[derive(Debug, Clone)]
pub struct Contract {
    pub id: ContractId,
    pub address: Address,
    pub state: EscrowState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub address: Address,
    pub balance: Wei,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    accounts: BTreeMap<Address, Account>,
    queued_nonce: BTreeMap<Address, u64>,
    genesis: Vec<Allocation>,
    miner_sink: Address,
    contracts: BTreeMap<ContractId, Contract>,
    contract_addresses: BTreeSet<Address>,
    queue: Vec<(TxHash, Transaction)>,
    blocks: Vec<Block>,
    events: Vec<Event>,
    receipt_index: BTreeMap<TxHash, (u64, usize)>,
    next_block_ms: u64,
    rng: ChaCha8Rng,
    inter_block: Exp<f64>,
}

impl Ledger {
    /// Creates the ledger with an empty genesis block 0 at time 0.
    pub fn new(config: LedgerConfig, seed: u64) -> Result<Self, LedgerError> {
        if !(config.block_mean_s.is_finite() && config.block_mean_s > 0.0) {
            return Err(LedgerError::BadBlockMean(config.block_mean_s));
        }
        let inter_block = Exp::new(1.0 / config.block_mean_s)
            .map_err(|_| LedgerError::BadBlockMean(config.block_mean_s))?;
        let miner_sink = Address::from_seed(MINER_SINK_SEED);
        let mut accounts = BTreeMap::new();
        accounts.insert(miner_sink, Account::default());
        let genesis_block = Block {
            number: 0,
            timestamp_ms: 0,
            parent: BlockHash([0; 32]),
            hash: Block::compute_hash(0, 0, &BlockHash([0; 32]), &[]),
            receipts: Vec::new(),
        };
        let mut ledger = Self {
            config,
            accounts,
            queued_nonce: BTreeMap::new(),
            genesis: Vec::new(),
            miner_sink,
            contracts: BTreeMap::new(),
            contract_addresses: BTreeSet::new(),
            queue: Vec::new(),
            blocks: vec![genesis_block],
            events: Vec::new(),
            receipt_index: BTreeMap::new(),
            next_block_ms: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            inter_block,
        };
        ledger.next_block_ms = ledger.draw_interval_ms();
        Ok(ledger)
    }

    fn draw_interval_ms(&mut self) -> u64 {
        let secs = self.inter_block.sample(&mut self.rng);
        ((secs * 1000.0).round() as u64).max(1)
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn gas_schedule(&self) -> &GasSchedule {
        &self.config.gas_schedule
    }

    /// Adds a genesis allocation.
    pub fn create_account(
        &mut self,
        seed: &[u8],
        initial_balance: Wei,
    ) -> Result<Address, LedgerError> {
        if seed.is_empty() {
            return Err(LedgerError::EmptySeed);
        }
        let address = Address::from_seed(seed);
        if self.accounts.contains_key(&address) || self.contract_addresses.contains(&address) {
            return Err(LedgerError::DuplicateAddress(address));
        }
        self.total_supply()
            .checked_add(initial_balance)
            .ok_or(LedgerError::Overflow)?;
        self.accounts.insert(
            address,
            Account {
                balance: initial_balance,
                nonce: 0,
            },
        );
        self.genesis.push(Allocation {
            address,
            balance: initial_balance,
        });
        Ok(address)
    }

    pub fn next_nonce(&self, sender: &Address) -> Result<u64, LedgerError> {
        let acct = self
            .accounts
            .get(sender)
            .ok_or(LedgerError::UnknownSender(*sender))?;
        Ok(self.queued_nonce.get(sender).copied().unwrap_or(acct.nonce))
    }

    pub fn submit_tx(&mut self, tx: Transaction) -> Result<TxHash, LedgerError> {
        let expected = self.next_nonce(&tx.sender)?;
        if tx.nonce != expected {
            return Err(LedgerError::BadNonce {
                expected,
                got: tx.nonce,
            });
        }
        let hash = tx.hash();
        self.queued_nonce.insert(tx.sender, expected + 1);
        self.queue.push((hash, tx));
        Ok(hash)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Timestamp the next block will carry.
    pub fn next_block_time_ms(&self) -> u64 {
        self.next_block_ms
    }

    /// Applies every queued transaction in submission order and seals a block.
    pub fn mine_next_block(&mut self) -> &Block {
        let head = self.head();
        let number = head.number + 1;
        let parent = head.hash;
        let timestamp_ms = self.next_block_ms;
        let queue = std::mem::take(&mut self.queue);
        self.queued_nonce.clear();

        let mut receipts = Vec::with_capacity(queue.len());
        let mut event_index = 0u32;
        for (hash, tx) in queue {
            let mut receipt = self.apply_tx(hash, tx);
            for ev in &mut receipt.events {
                ev.block_number = number;
                ev.index = event_index;
                event_index += 1;
            }
            self.events.extend(receipt.events.iter().cloned());
            self.receipt_index.insert(hash, (number, receipts.len()));
            receipts.push(receipt);
        }

        let hash = Block::compute_hash(number, timestamp_ms, &parent, &receipts);
        self.blocks.push(Block {
            number,
            timestamp_ms,
            parent,
            hash,
            receipts,
        });
        self.next_block_ms = timestamp_ms + self.draw_interval_ms();
        self.blocks.last().expect("just pushed")
    }

    fn apply_tx(&mut self, tx_hash: TxHash, tx: Transaction) -> Receipt {
        let gas_used = tx.scheduled_gas(&self.config.gas_schedule);
        let cost = tx.gas_price.fee_for(gas_used);
        let sender = self
            .accounts
            .get_mut(&tx.sender)
            .expect("sender checked at submit");
        sender.nonce += 1;
        let balance = sender.balance;

        let mut receipt = Receipt {
            tx_hash,
            tx,
            status: ReceiptStatus::Succeeded,
            gas_used,
            fee: Wei::ZERO,
            created_contract: None,
            payouts: Vec::new(),
            events: Vec::new(),
        };

        let sink = self.miner_sink;
        let needed = cost.and_then(|c| c.checked_add(receipt.tx.value));
        let fee = match (cost, needed) {
            (Some(c), Some(n)) if n <= balance => c,
            _ => {
                let fee = cost.map_or(balance, |c| c.min(balance));
                self.move_funds(&receipt.tx.sender, &sink, fee);
                receipt.fee = fee;
                receipt.status = ReceiptStatus::Reverted(RevertReason::InsufficientFunds);
                return receipt;
            }
        };
        self.move_funds(&receipt.tx.sender, &sink, fee);
        receipt.fee = fee;

        if let Err(reason) = self.execute(&mut receipt) {
            receipt.status = ReceiptStatus::Reverted(reason);
            receipt.events.clear();
            receipt.payouts.clear();
            receipt.created_contract = None;
        }
        receipt
    }

    fn execute(&mut self, receipt: &mut Receipt) -> Result<(), RevertReason> {
        let tx = &receipt.tx;
        match &tx.target {
            TxTarget::Transfer { to } => {
                if self.contract_addresses.contains(to) {
                    return Err(RevertReason::TransferToContract);
                }
                self.accounts.entry(*to).or_default();
                let (from, to, value) = (tx.sender, *to, tx.value);
                self.move_funds(&from, &to, value);
            }
            TxTarget::Deploy { args } => {
                if tx.value != Wei::ZERO {
                    return Err(RevertReason::Escrow(EscrowError::NotPayable));
                }
                let args = DeployArgs::decode(args).map_err(RevertReason::Escrow)?;
                let state = EscrowState::deploy(tx.sender, args).map_err(RevertReason::Escrow)?;
                let id = self.next_contract_id();
                let address = id.address();
                self.accounts.entry(address).or_default();
                self.contract_addresses.insert(address);
                self.contracts.insert(id, Contract { id, address, state });
                receipt.created_contract = Some(id);
            }
            TxTarget::ContractCall {
                contract,
                function,
                args,
            } => {
                let call = EscrowCall::decode(function, args).map_err(RevertReason::Escrow)?;
                let ctx = CallContext {
                    caller: tx.sender,
                    value: tx.value,
                    tx_hash: receipt.tx_hash,
                };
                let contract = self
                    .contracts
                    .get_mut(contract)
                    .ok_or(RevertReason::UnknownContract)?;
                let effects = contract
                    .state
                    .apply(ctx, call)
                    .map_err(RevertReason::Escrow)?;
                let (id, caddr) = (contract.id, contract.address);
                self.move_funds(&ctx.caller, &caddr, ctx.value);
                for p in &effects.payouts {
                    self.accounts.entry(p.to).or_default();
                    self.move_funds(&caddr, &p.to, p.amount);
                }
                receipt.payouts = effects.payouts;
                receipt.events = effects
                    .events
                    .into_iter()
                    .map(|(kind, attributes)| Event {
                        block_number: 0,
                        index: 0,
                        tx_hash: receipt.tx_hash,
                        contract: id,
                        kind,
                        attributes,
                    })
                    .collect();
            }
        }
        Ok(())
    }

    /// Moves funds between existing accounts. Callers have checked coverage.
    fn move_funds(&mut self, from: &Address, to: &Address, amount: Wei) {
        if amount == Wei::ZERO || from == to {
            return;
        }
        let src = self.accounts.get_mut(from).expect("source account exists");
        src.balance = src.balance.checked_sub(amount).expect("covered transfer");
        let dst = self
            .accounts
            .get_mut(to)
            .expect("destination account exists");
        dst.balance = dst
            .balance
            .checked_add(amount)
            .expect("bounded by total supply");
    }

    pub fn next_contract_id(&self) -> ContractId {
        ContractId(self.contracts.len() as u64 + 1)
    }

    pub fn contract(&self, id: ContractId) -> Result<&Contract, LedgerError> {
        self.contracts
            .get(&id)
            .ok_or(LedgerError::UnknownContract(id))
    }

    pub fn contracts(&self) -> impl Iterator<Item = &Contract> {
        self.contracts.values()
    }

    pub fn head(&self) -> &Block {
        self.blocks.last().expect("genesis block always present")
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn genesis(&self) -> &[Allocation] {
        &self.genesis
    }

    pub fn miner_sink(&self) -> Address {
        self.miner_sink
    }

    pub fn balance(&self, addr: &Address) -> Result<Wei, LedgerError> {
        self.accounts
            .get(addr)
            .map(|a| a.balance)
            .ok_or(LedgerError::UnknownAddress(*addr))
    }

    pub fn total_supply(&self) -> Wei {
        self.accounts.values().map(|a| a.balance).sum()
    }

    pub fn initial_supply(&self) -> Wei {
        self.genesis.iter().map(|a| a.balance).sum()
    }

    pub fn receipt(&self, hash: &TxHash) -> Option<&Receipt> {
        let (block, idx) = *self.receipt_index.get(hash)?;
        self.blocks.get(block as usize)?.receipts.get(idx)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events strictly after `cursor`, optionally restricted to `filter`.
    pub fn events_since(
        &self,
        cursor: EventCursor,
        filter: Option<&BTreeSet<EventKind>>,
    ) -> Result<Vec<Event>, LedgerError> {
        let head = self.head().number;
        let start = match cursor.0 {
            None => 0,
            Some(pos) => {
                if pos.block > head {
                    return Err(LedgerError::CursorBeyondHead {
                        cursor: pos.block,
                        head,
                    });
                }
                self.events.partition_point(|e| e.pos() <= pos)
            }
        };
        Ok(self.events[start..]
            .iter()
            .filter(|e| filter.is_none_or(|f| f.contains(&e.kind)))
            .cloned()
            .collect())
    }
}
