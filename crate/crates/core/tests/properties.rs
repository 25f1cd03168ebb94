//! Property tests over the escrow state machine, the ledger and the
//! symbolic crypto.

use proptest::prelude::*;

use escrowsim::escrow::{
    affiliate_cut, CallContext, DeployArgs, EscrowCall, EscrowError, EscrowState, SecretPayload,
};
use escrowsim::ledger::{Ledger, LedgerConfig, Transaction};
use escrowsim::symcrypto::{lock, open, seal, unlock, SecretKey, SymKey};
use escrowsim::{Address, ContractId, EventKind, SampleId, TxHash, Wei};

const RANSOM: Wei = Wei(10_000);

#[derive(Debug, Clone)]
struct Op {
    caller: usize,
    kind: u8,
    sample: usize,
    key: [u8; 32],
    value_ok: bool,
    tx: [u8; 32],
}

fn op() -> impl Strategy<Value = Op> {
    (
        0usize..4,
        0u8..6,
        0usize..8,
        any::<[u8; 32]>(),
        any::<bool>(),
        any::<[u8; 32]>(),
    )
        .prop_map(|(caller, kind, sample, key, value_ok, tx)| Op {
            caller,
            kind,
            sample,
            key,
            value_ok,
            tx,
        })
}

fn actors() -> Vec<Address> {
    (0..4)
        .map(|i| Address::from_seed(format!("actor-{i}").as_bytes()))
        .collect()
}

fn to_call(op: &Op, samples: &[SampleId]) -> (EscrowCall, Wei) {
    let sample_id = samples
        .get(op.sample % samples.len().max(1))
        .copied()
        .unwrap_or(SampleId([7; 32]));
    let sk = SecretKey(op.key);
    match op.kind {
        0 => (EscrowCall::RegisterAffiliate, Wei::ZERO),
        1 => (EscrowCall::RequestSampleKey, Wei::ZERO),
        2 => (
            EscrowCall::SetSamplePk {
                sample_id,
                pk: sk.public_key(),
            },
            Wei::ZERO,
        ),
        3 => (
            EscrowCall::PayRansom {
                sample_id,
                recipient_pk: None,
            },
            if op.value_ok {
                RANSOM
            } else {
                Wei(RANSOM.0 - 1)
            },
        ),
        4 => (EscrowCall::SplitRansom { sample_id }, Wei::ZERO),
        _ => (
            EscrowCall::SetSampleSk {
                sample_id,
                payload: SecretPayload::Clear(sk),
            },
            Wei::ZERO,
        ),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn escrow_reverts_are_atomic_and_writes_are_author_only(
        share in 0u64..=10_000,
        ops in prop::collection::vec(op(), 1..60),
    ) {
        let who = actors();
        let author = who[0];
        let mut state = EscrowState::deploy(author, DeployArgs {
            ransom_amount: RANSOM,
            affiliate_share_bp: share,
            encrypted_delivery: false,
        }).unwrap();
        let mut samples: Vec<SampleId> = Vec::new();
        let mut paid_in = 0u128;
        let mut paid_out = 0u128;
        for op in &ops {
            let caller = who[op.caller];
            let (call, value) = to_call(op, &samples);
            let is_write = matches!(call, EscrowCall::SetSamplePk { .. } | EscrowCall::SetSampleSk { .. });
            let before = state.clone();
            let ctx = CallContext { caller, value, tx_hash: TxHash(op.tx) };
            match state.apply(ctx, call.clone()) {
                Ok(effects) => {
                    prop_assert!(!is_write || caller == author);
                    if matches!(call, EscrowCall::RequestSampleKey) {
                        samples.push(SampleId(op.tx));
                    }
                    if matches!(call, EscrowCall::PayRansom { .. }) {
                        paid_in += value.0;
                    }
                    let out: u128 = effects.payouts.iter().map(|p| p.amount.0).sum();
                    if matches!(call, EscrowCall::SplitRansom { .. }) {
                        prop_assert_eq!(out, RANSOM.0);
                        let split = effects.events.iter().find(|(k, _)| *k == EventKind::RansomSplit);
                        prop_assert!(split.is_some());
                    } else {
                        prop_assert_eq!(out, 0);
                    }
                    paid_out += out;
                }
                Err(e) => {
                    prop_assert_eq!(&state, &before);
                    if is_write && caller != author {
                        prop_assert_eq!(e, EscrowError::NotAuthor);
                    }
                }
            }
            prop_assert!(state.check_invariants().is_ok());
            prop_assert_eq!(state.escrow_balance().0, paid_in - paid_out);
        }
    }

    #[test]
    fn affiliate_cut_is_the_exact_floor(amount in 0u128..(1u128 << 100), bp in 0u64..=10_000) {
        let cut = affiliate_cut(Wei(amount), bp);
        prop_assert_eq!(cut.0, amount * u128::from(bp) / 10_000);
        prop_assert!(cut.0 <= amount);
    }

    #[test]
    fn affiliate_cut_never_exceeds_amount(amount in any::<u128>(), bp in 0u64..=10_000) {
        prop_assert!(affiliate_cut(Wei(amount), bp).0 <= amount);
    }

    #[test]
    fn open_succeeds_only_with_the_matching_key(
        a in any::<[u8; 32]>(),
        b in any::<[u8; 32]>(),
        payload in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let ct = seal(&SecretKey(a).public_key(), &payload);
        prop_assert_eq!(open(&SecretKey(a), &ct).unwrap(), payload.clone());
        prop_assert_eq!(open(&SecretKey(b), &ct).is_ok(), a == b);
    }

    #[test]
    fn unlock_succeeds_only_with_the_locking_key(
        a in any::<[u8; 32]>(),
        b in any::<[u8; 32]>(),
        asset in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let ct = lock(&SymKey(a), &asset);
        prop_assert_eq!(unlock(&SymKey(a), &ct).unwrap(), asset.clone());
        prop_assert_eq!(unlock(&SymKey(b), &ct).is_ok(), a == b);
    }

    #[test]
    fn escrow_calls_round_trip_through_their_encoding(op in op(), n in 0usize..3) {
        let samples: Vec<SampleId> = (0..n as u8).map(|i| SampleId([i; 32])).collect();
        let (call, _) = to_call(&op, &samples);
        let back = EscrowCall::decode(call.function_name(), &call.encode_args()).unwrap();
        prop_assert_eq!(back, call);
    }

    #[test]
    fn ledger_conserves_supply_under_random_traffic(
        seed in any::<u64>(),
        balances in prop::collection::vec(0u128..1_000_000_000, 2..6),
        txs in prop::collection::vec((0usize..6, 0usize..6, 0u128..2_000_000_000, 0u128..3, any::<bool>()), 0..40),
    ) {
        let mut l = Ledger::new(LedgerConfig::default(), seed).unwrap();
        let accounts: Vec<Address> = balances
            .iter()
            .enumerate()
            .map(|(i, b)| l.create_account(format!("acct-{i}").as_bytes(), Wei(*b)).unwrap())
            .collect();
        let initial = l.total_supply();
        prop_assert_eq!(initial.0, balances.iter().sum::<u128>());
        // A deployed contract gives transfers a target that must revert.
        let deployer = accounts[0];
        l.submit_tx(Transaction::deploy(deployer, 0, &DeployArgs {
            ransom_amount: RANSOM,
            affiliate_share_bp: 5_000,
            encrypted_delivery: false,
        }, Wei::ZERO)).unwrap();
        for (from, to, value, price, mine) in txs {
            let sender = accounts[from % accounts.len()];
            let to = if to == 5 { ContractId(1).address() } else { accounts[to % accounts.len()] };
            let nonce = l.next_nonce(&sender).unwrap();
            l.submit_tx(Transaction::transfer(sender, nonce, to, Wei(value), Wei(price))).unwrap();
            if mine {
                l.mine_next_block();
                prop_assert_eq!(l.total_supply(), initial);
            }
        }
        l.mine_next_block();
        prop_assert_eq!(l.total_supply(), initial);
        for b in l.blocks() {
            for r in &b.receipts {
                if !r.succeeded() {
                    prop_assert!(r.payouts.is_empty() && r.events.is_empty());
                }
            }
        }
    }
}
