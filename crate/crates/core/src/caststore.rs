//! Content-addressed store with node churn.
//!
//! Retrieval is an oracle lookup over the online holders of an id: there is
//! no routing or latency model. A successful retrieval leaves an unpinned
//! copy on the requester, which is how content outlives its publisher.
//! Churn alternates exponentially distributed online and offline periods per
//! node, driven by [`ContentStore::advance_to`] on the scenario clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::hexbytes::fixed_bytes;
use crate::symcrypto::{digest, domain_digest};

fixed_bytes!(NodeId, 20);
fixed_bytes!(
    /// SHA-256 of the stored bytes.
    ContentId,
    32
);

impl ContentId {
    pub fn of(bytes: &[u8]) -> Self {
        Self(digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("churn means must be positive, got online {mean_online_s} / offline {mean_offline_s}")]
    BadChurnParams {
        mean_online_s: f64,
        mean_offline_s: f64,
    },
    #[error("node {0} is offline")]
    NodeOffline(NodeId),
    #[error("no online node serves {0}")]
    Unavailable(ContentId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("retrieved bytes do not hash to {0}")]
    IntegrityFailure(ContentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContentKind {
    RegistrationPage,
    PaymentPage,
    SampleDescriptor,
    Other,
}

impl ContentKind {
    fn tag(self) -> u8 {
        match self {
            ContentKind::RegistrationPage => 0,
            ContentKind::PaymentPage => 1,
            ContentKind::SampleDescriptor => 2,
            ContentKind::Other => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self, DecodeError> {
        Ok(match t {
            0 => ContentKind::RegistrationPage,
            1 => ContentKind::PaymentPage,
            2 => ContentKind::SampleDescriptor,
            3 => ContentKind::Other,
            t => return Err(DecodeError::BadTag(t)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentObject {
    pub id: ContentId,
    pub kind: ContentKind,
    pub bytes: Vec<u8>,
}

impl ContentObject {
    pub fn new(kind: ContentKind, bytes: Vec<u8>) -> Self {
        Self {
            id: ContentId::of(&bytes),
            kind,
            bytes,
        }
    }

    /// Canonical form: kind byte, then length-prefixed payload.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(self.kind.tag()).bytes(&self.bytes);
        enc.finish()
    }

    pub fn decode(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(raw);
        let kind = ContentKind::from_tag(dec.u8()?)?;
        let bytes = dec.bytes()?.to_vec();
        dec.finish()?;
        Ok(Self::new(kind, bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChurnParams {
    pub mean_online_s: f64,
    pub mean_offline_s: f64,
}

impl ChurnParams {
    /// Never leaves.
    pub const DISABLED: ChurnParams = ChurnParams {
        mean_online_s: f64::INFINITY,
        mean_offline_s: f64::INFINITY,
    };

    pub fn new(mean_online_s: f64, mean_offline_s: f64) -> Result<Self, StoreError> {
        let p = Self {
            mean_online_s,
            mean_offline_s,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        // NaN fails both comparisons.
        if self.mean_online_s > 0.0 && self.mean_offline_s > 0.0 {
            Ok(())
        } else {
            Err(StoreError::BadChurnParams {
                mean_online_s: self.mean_online_s,
                mean_offline_s: self.mean_offline_s,
            })
        }
    }

    /// An infinite mean on either side means the node never goes offline.
    pub fn is_disabled(&self) -> bool {
        self.mean_online_s.is_infinite() || self.mean_offline_s.is_infinite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Availability {
    pub holders: usize,
    pub online_holders: usize,
}

#[derive(Debug, Clone)]
struct Holding {
    pinned: bool,
    last_used: u64,
}

#[derive(Debug, Clone)]
struct Node {
    id: NodeId,
    online: bool,
    departed: bool,
    churn: ChurnParams,
    blacklist: BTreeSet<ContentId>,
    held: BTreeMap<ContentId, Holding>,
}

impl Node {
    fn serves(&self, id: &ContentId) -> bool {
        self.online && self.held.contains_key(id) && !self.blacklist.contains(id)
    }
}

#[derive(Debug, Clone)]
pub struct ContentStore {
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    objects: BTreeMap<ContentId, ContentObject>,
    transitions: BinaryHeap<Reverse<(u64, u64, usize)>>,
    seq: u64,
    use_tick: u64,
    now_ms: u64,
    /// Max unpinned copies per node; `None` is unbounded.
    cache_capacity: Option<usize>,
    rng: ChaCha8Rng,
}

fn exp_ms(mean_s: f64, rng: &mut ChaCha8Rng) -> u64 {
    let d = Exp::new(1.0 / mean_s).expect("validated mean");
    ((d.sample(rng) * 1000.0).round() as u64).max(1)
}

impl ContentStore {
    pub fn new(seed: u64, cache_capacity: Option<usize>) -> Self {
        Self {
            nodes: Vec::new(),
            index: BTreeMap::new(),
            objects: BTreeMap::new(),
            transitions: BinaryHeap::new(),
            seq: 0,
            use_tick: 0,
            now_ms: 0,
            cache_capacity,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Adds an online node. Ids are salted with a counter, so repeated seeds
    /// still give distinct nodes.
    pub fn add_node(&mut self, seed: &[u8], churn: ChurnParams) -> Result<NodeId, StoreError> {
        churn.validate()?;
        let mut salted = seed.to_vec();
        salted.extend_from_slice(&(self.nodes.len() as u64).to_be_bytes());
        let d = domain_digest(b"node", &salted);
        let id = NodeId(d[..20].try_into().expect("20-byte prefix"));
        let idx = self.nodes.len();
        self.nodes.push(Node {
            id,
            online: true,
            departed: false,
            churn,
            blacklist: BTreeSet::new(),
            held: BTreeMap::new(),
        });
        self.index.insert(id, idx);
        self.schedule_transition(idx);
        Ok(id)
    }

    fn schedule_transition(&mut self, idx: usize) {
        let node = &self.nodes[idx];
        if node.departed || node.churn.is_disabled() {
            return;
        }
        let mean = if node.online {
            node.churn.mean_online_s
        } else {
            node.churn.mean_offline_s
        };
        let at = self.now_ms + exp_ms(mean, &mut self.rng);
        self.seq += 1;
        self.transitions.push(Reverse((at, self.seq, idx)));
    }

    /// Applies every churn transition due at or before `t_ms`.
    pub fn advance_to(&mut self, t_ms: u64) {
        while let Some(Reverse((at, _, idx))) = self.transitions.peek().copied() {
            if at > t_ms {
                break;
            }
            self.transitions.pop();
            self.now_ms = at;
            if self.nodes[idx].departed {
                continue;
            }
            self.nodes[idx].online = !self.nodes[idx].online;
            self.schedule_transition(idx);
        }
        self.now_ms = self.now_ms.max(t_ms);
    }

    fn idx(&self, node: &NodeId) -> Result<usize, StoreError> {
        self.index
            .get(node)
            .copied()
            .ok_or(StoreError::UnknownNode(*node))
    }

    /// Takes a node offline for good.
    pub fn depart(&mut self, node: &NodeId) -> Result<(), StoreError> {
        let i = self.idx(node)?;
        self.nodes[i].online = false;
        self.nodes[i].departed = true;
        Ok(())
    }

    pub fn is_online(&self, node: &NodeId) -> Result<bool, StoreError> {
        Ok(self.nodes[self.idx(node)?].online)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn online_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.online).count()
    }

    pub fn holds(&self, node: &NodeId, id: &ContentId) -> Result<bool, StoreError> {
        Ok(self.nodes[self.idx(node)?].held.contains_key(id))
    }

    pub fn object(&self, id: &ContentId) -> Option<&ContentObject> {
        self.objects.get(id)
    }

    fn touch(&mut self, idx: usize, id: &ContentId) {
        self.use_tick += 1;
        if let Some(h) = self.nodes[idx].held.get_mut(id) {
            h.last_used = self.use_tick;
        }
    }

    fn store_copy(&mut self, idx: usize, id: ContentId, pinned: bool) {
        self.use_tick += 1;
        let tick = self.use_tick;
        let h = self.nodes[idx].held.entry(id).or_insert(Holding {
            pinned,
            last_used: tick,
        });
        h.pinned |= pinned;
        h.last_used = tick;
        self.enforce_capacity(idx, &id);
    }

    fn enforce_capacity(&mut self, idx: usize, keep: &ContentId) {
        let Some(cap) = self.cache_capacity else {
            return;
        };
        let node = &mut self.nodes[idx];
        loop {
            let unpinned = node.held.values().filter(|h| !h.pinned).count();
            if unpinned <= cap {
                break;
            }
            let victim = node
                .held
                .iter()
                .filter(|(cid, h)| !h.pinned && *cid != keep)
                .min_by_key(|(_, h)| h.last_used)
                .map(|(cid, _)| *cid);
            match victim {
                Some(cid) => {
                    node.held.remove(&cid);
                }
                None => break,
            }
        }
    }

    pub fn publish(
        &mut self,
        node: &NodeId,
        kind: ContentKind,
        bytes: Vec<u8>,
        pin: bool,
    ) -> Result<ContentId, StoreError> {
        let i = self.idx(node)?;
        if !self.nodes[i].online {
            return Err(StoreError::NodeOffline(*node));
        }
        let obj = ContentObject::new(kind, bytes);
        let id = obj.id;
        self.objects.entry(id).or_insert(obj);
        self.store_copy(i, id, pin);
        Ok(id)
    }

    /// Fetches `id` for an online requester, caching an unpinned copy on it.
    pub fn retrieve(&mut self, requester: &NodeId, id: &ContentId) -> Result<Vec<u8>, StoreError> {
        let r = self.idx(requester)?;
        if !self.nodes[r].online {
            return Err(StoreError::NodeOffline(*requester));
        }
        let server = self
            .nodes
            .iter()
            .position(|n| n.serves(id))
            .ok_or(StoreError::Unavailable(*id))?;
        let obj = self.objects.get(id).ok_or(StoreError::Unavailable(*id))?;
        if ContentId::of(&obj.bytes) != *id {
            return Err(StoreError::IntegrityFailure(*id));
        }
        let bytes = obj.bytes.clone();
        self.touch(server, id);
        if !self.nodes[r].blacklist.contains(id) {
            self.store_copy(r, *id, false);
        }
        Ok(bytes)
    }

    /// Drops an unpinned copy. Returns whether anything was removed.
    pub fn evict(&mut self, node: &NodeId, id: &ContentId) -> Result<bool, StoreError> {
        let i = self.idx(node)?;
        let held = &mut self.nodes[i].held;
        match held.get(id) {
            Some(h) if !h.pinned => {
                held.remove(id);
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn unpin(&mut self, node: &NodeId, id: &ContentId) -> Result<(), StoreError> {
        let i = self.idx(node)?;
        if let Some(h) = self.nodes[i].held.get_mut(id) {
            h.pinned = false;
        }
        self.enforce_capacity(i, id);
        Ok(())
    }

    /// After this the node never serves `id`.
    pub fn blacklist(&mut self, node: &NodeId, id: ContentId) -> Result<(), StoreError> {
        let i = self.idx(node)?;
        self.nodes[i].blacklist.insert(id);
        Ok(())
    }

    pub fn availability(&self, id: &ContentId) -> Availability {
        let holders = self.nodes.iter().filter(|n| n.held.contains_key(id));
        let (mut total, mut online) = (0, 0);
        for n in holders {
            total += 1;
            if n.online {
                online += 1;
            }
        }
        Availability {
            holders: total,
            online_holders: online,
        }
    }
}
